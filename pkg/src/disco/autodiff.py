"""Reverse-mode gradients for the supported layer kinds, by hand.

Forward passes cache the im2col patch matrices so the backward pass is two
matrix products per conv plus a col2im scatter. Gradients flow through the
dataflow graph in reverse layer order, accumulating into each producer
(residual edges fan in additively). ReLU uses the post-activation sign, so no
pre-activation cache is needed. Everything is dtype-polymorphic: training
runs in float32, finite-difference checks run the identical code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import avgpool_forward, im2col
from .masks import BlockMask, apply_mask
from .model import LayerSpec, ModelSpec
from .weights import WeightStore


def conv2d_fwd(x, kernel, bias, stride, padding):
    b, _, h, w = x.shape
    o, _, kh, kw = kernel.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(o, -1).T + bias
    return out.reshape(b, out_h, out_w, o).transpose(0, 3, 1, 2), cols


def col2im(dcols, x_shape, kh, kw, stride, padding):
    """Scatter patch-matrix gradients back onto the input grid."""
    b, c, h, w = x_shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    dview = dcols.reshape(b, out_h, out_w, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] \
                += dview[:, :, :, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def conv2d_bwd(dout, x_shape, kernel, cols, stride, padding):
    o, _, kh, kw = kernel.shape
    b = dout.shape[0]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dkernel = (dflat.T @ cols).reshape(kernel.shape)
    dbias = dflat.sum(axis=0)
    dcols = dflat @ kernel.reshape(o, -1)
    dx = col2im(dcols, x_shape, kh, kw, stride, padding)
    return dx, dkernel, dbias


def avgpool_bwd(dout, x_shape, kh, kw, stride, padding):
    """Each window element gets an equal 1/(kh*kw) share of the gradient."""
    b, c, h, w = x_shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    share = (dout / (kh * kw)).astype(dout.dtype)
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += share
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return float(nll.mean()), dlogits / n


@dataclass
class _Frame:
    out: np.ndarray
    cols: np.ndarray | None
    in_shape: tuple


def model_forward_backward(
    model: ModelSpec,
    weights: WeightStore,
    x: np.ndarray,
    labels: np.ndarray,
    mask: BlockMask | None = None,
    dtype=np.float32,
    loss_grad=None,
):
    """Loss, parameter gradients, and logits for one batch.

    A mask zeroes pruned kernels before the forward pass; the returned
    gradients are *not* re-masked here (the optimizer owns that), they are
    the plain gradients of the masked network's loss. ``loss_grad`` may
    replace cross-entropy with a callable (logits -> (loss, dlogits)) for
    linear-loss gradient checks.
    """
    if mask is not None:
        weights = apply_mask(weights, mask, model)
    x = x.astype(dtype, copy=False)

    frames: list[_Frame] = []
    acts: list[np.ndarray] = []
    for layer in model.layers:
        src = model.input_source(layer.id)
        inputs = x if src < 0 else acts[src]
        cols = None
        if layer.kind == "conv2d":
            kernel = weights.kernel(layer.id).astype(dtype, copy=False)
            bias = weights.bias(layer.id).astype(dtype, copy=False)
            out, cols = conv2d_fwd(inputs, kernel, bias, layer.stride, layer.padding)
        elif layer.kind == "dense":
            kernel = weights.kernel(layer.id).astype(dtype, copy=False)
            bias = weights.bias(layer.id).astype(dtype, copy=False)
            flat = inputs.reshape(inputs.shape[0], -1)
            out = flat @ kernel[:, :, 0, 0].T + bias
            cols = flat
        elif layer.kind == "pool":
            out = avgpool_forward(inputs, layer.kernel_h, layer.kernel_w,
                                  layer.stride, layer.padding)
        elif layer.kind == "elementwise_add":
            out = inputs + acts[layer.residual_from]
        else:
            raise NotImplementedError(f"training does not support {layer.kind}")
        if layer.activation == "relu":
            out = np.maximum(out, 0)
        frames.append(_Frame(out, cols, inputs.shape))
        acts.append(out)

    logits = acts[-1]
    if loss_grad is None:
        loss, dlogits = softmax_cross_entropy(logits, labels)
    else:
        loss, dlogits = loss_grad(logits)

    d_act: list[np.ndarray | None] = [None] * len(model.layers)
    d_act[-1] = dlogits.astype(dtype, copy=False)
    grads: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def accumulate(idx: int, g: np.ndarray) -> None:
        if idx < 0:
            return
        if d_act[idx] is None:
            d_act[idx] = g.copy()
        else:
            d_act[idx] += g

    for layer in reversed(model.layers):
        g = d_act[layer.id]
        if g is None:
            continue
        frame = frames[layer.id]
        if layer.activation == "relu":
            g = g * (frame.out > 0)
        src = model.input_source(layer.id)
        if layer.kind == "conv2d":
            kernel = weights.kernel(layer.id).astype(dtype, copy=False)
            dx, dk, db = conv2d_bwd(g, frame.in_shape, kernel, frame.cols,
                                    layer.stride, layer.padding)
            grads[layer.id] = (dk, db)
            accumulate(src, dx)
        elif layer.kind == "dense":
            kernel = weights.kernel(layer.id)[:, :, 0, 0].astype(dtype, copy=False)
            dk = (g.T @ frame.cols)[:, :, None, None]
            db = g.sum(axis=0)
            dx = (g @ kernel).reshape(frame.in_shape)
            grads[layer.id] = (dk, db)
            accumulate(src, dx)
        elif layer.kind == "pool":
            accumulate(src, avgpool_bwd(g, frame.in_shape, layer.kernel_h,
                                        layer.kernel_w, layer.stride, layer.padding))
        elif layer.kind == "elementwise_add":
            accumulate(src, g)
            accumulate(layer.residual_from, g)
    return loss, grads, logits


def gradient_check(
    model: ModelSpec,
    weights: WeightStore,
    x: np.ndarray,
    labels: np.ndarray,
    mask: BlockMask | None = None,
    step: float = 1e-3,
    samples_per_layer: int = 4,
    seed: int = 0,
    loss_grad=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs the whole net in float64; perturbs a seeded random subset of kernel
    and bias coordinates per layer by +-step. The relative error denominator
    floors at 1e-8 so genuinely-zero gradients compare as absolute error.
    """
    rng = np.random.default_rng(seed)
    w64 = WeightStore({
        lid: type(lw)(lw.kernel.astype(np.float64), lw.bias.astype(np.float64))
        for lid, lw in weights.tensors.items()
    })

    def loss_at() -> float:
        loss, _, _ = model_forward_backward(model, w64, x, labels, mask=mask,
                                            dtype=np.float64, loss_grad=loss_grad)
        return loss

    _, grads, _ = model_forward_backward(model, w64, x, labels, mask=mask,
                                         dtype=np.float64, loss_grad=loss_grad)
    worst = 0.0
    for layer in model.weighted_layers:
        dk, db = grads[layer.id]
        if mask is not None and layer.id in mask.keep:
            # A pruned weight never reaches the forward pass, so both the
            # step that training applies and the finite difference are zero.
            dk = dk * mask.keep[layer.id].T[:, :, None, None]
        kern = w64.tensors[layer.id].kernel
        bias = w64.tensors[layer.id].bias
        flat_idx = rng.choice(kern.size, size=min(samples_per_layer, kern.size),
                              replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, kern.shape)
            orig = kern[idx]
            kern[idx] = orig + step
            up = loss_at()
            kern[idx] = orig - step
            down = loss_at()
            kern[idx] = orig
            fd = (up - down) / (2 * step)
            an = dk[idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
        bi = int(rng.integers(bias.size))
        orig = bias[bi]
        bias[bi] = orig + step
        up = loss_at()
        bias[bi] = orig - step
        down = loss_at()
        bias[bi] = orig
        fd = (up - down) / (2 * step)
        an = db[bi]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return worst
