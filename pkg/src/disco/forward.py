"""Functional forward pass over a model description.

Array layout is (batch, channels, height, width) in float32. Convolutions run
as im2col followed by one matrix product; the im2col reduction axis is laid
out (channel, kernel_row, kernel_col) with the column index fastest, i.e. the
fixed W-innermost, then H, then ascending-channel accumulation layout that
the distributed shards reproduce. The reduction itself is numpy's dot, which
is deterministic for fixed shapes; runs with *different* shapes (shards vs.
the full model) may differ by float reassociation, which is why cross-path
comparisons carry a 1e-4 relative tolerance while same-path comparisons are
bit-exact.

Masks are applied by zeroing pruned kernels and running the identical dense
code path, which makes "masked forward == explicitly zeroed weights" hold
bit-for-bit by construction.
"""

from __future__ import annotations

import numpy as np

from .masks import BlockMask, apply_mask
from .model import LayerSpec, ModelSpec
from .weights import WeightStore


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Patch matrix (batch*out_h*out_w, C*kh*kw); reduction axis is (c, kh, kw)."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, out_h, out_w, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b * out_h * out_w, c * kh * kw)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   stride: int, padding: int) -> np.ndarray:
    b, _, h, w = x.shape
    o, _, kh, kw = kernel.shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, padding)
    flat = cols @ kernel.reshape(o, -1).T + bias
    return flat.reshape(b, out_h, out_w, o).transpose(0, 3, 1, 2)


def dwconv_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                   stride: int, padding: int) -> np.ndarray:
    """Depthwise conv: channel f sees only channel f. kernel is (C, 1, kh, kw)."""
    b, c, h, w = x.shape
    _, _, kh, kw = kernel.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, out_h, out_w, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    out = np.einsum("bcxyij,cij->bcxy", view, kernel[:, 0], optimize=True)
    return (out + bias[None, :, None, None]).astype(x.dtype, copy=False)


def avgpool_forward(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Average over each window; pad zeros count toward the mean."""
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, c, out_h, out_w, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    scale = np.asarray(1.0 / (kh * kw), dtype=x.dtype)
    return view.sum(axis=(4, 5)) * scale


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def layer_forward(layer: LayerSpec, inputs: np.ndarray,
                  residual: np.ndarray | None,
                  kernel: np.ndarray | None, bias: np.ndarray | None) -> np.ndarray:
    if layer.kind == "conv2d":
        out = conv2d_forward(inputs, kernel, bias, layer.stride, layer.padding)
    elif layer.kind == "dwconv":
        out = dwconv_forward(inputs, kernel, bias, layer.stride, layer.padding)
    elif layer.kind == "dense":
        flat = inputs.reshape(inputs.shape[0], -1)
        out = flat @ kernel[:, :, 0, 0].T + bias
    elif layer.kind == "pool":
        out = avgpool_forward(inputs, layer.kernel_h, layer.kernel_w,
                              layer.stride, layer.padding)
    elif layer.kind == "elementwise_add":
        out = inputs + residual
    elif layer.kind == "feature_matmul":
        raise NotImplementedError("feature_matmul is accounting-only")
    else:
        raise ValueError(f"unknown kind {layer.kind!r}")
    if layer.activation == "relu":
        out = relu(out)
    return out


def forward_model(
    model: ModelSpec,
    weights: WeightStore,
    x: np.ndarray,
    mask: BlockMask | None = None,
    return_activations: bool = False,
):
    """Run the whole network; returns the last layer's output.

    ``x`` is (batch, C, H, W) float32 matching the model's input shape. A mask
    is applied by zeroing pruned kernels, then the dense path runs unchanged.
    """
    if x.ndim != 4 or x.shape[1:] != model.input_shape:
        raise ValueError(f"input shape {x.shape} does not match model "
                         f"(batch, {', '.join(map(str, model.input_shape))})")
    if mask is not None:
        weights = apply_mask(weights, mask, model)
    acts: list[np.ndarray] = []
    for layer in model.layers:
        src = model.input_source(layer.id)
        inputs = x if src < 0 else acts[src]
        residual = acts[layer.residual_from] if layer.residual_from is not None else None
        kernel = weights.kernel(layer.id) if layer.has_weights else None
        bias = weights.bias(layer.id) if layer.has_weights else None
        acts.append(layer_forward(layer, inputs, residual, kernel, bias))
    if return_activations:
        return acts[-1], acts
    return acts[-1]
