"""Parameter storage, seeded initialization, and the binary weights format.

File layout: the 8-byte magic ``DISCOWT1``, a little-endian u32 count of
weighted layers, then for each weighted layer in ascending id order a u32
layer id, a u64 kernel value count, the kernel tensor as little-endian
float32 in (out_features, in_features, kernel_h, kernel_w) row-major order,
and finally the bias vector (length out_features). Bias length is not stored;
readers always hold the model manifest, which fixes every shape. Round-trips
are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelSpec

MAGIC = b"DISCOWT1"


@dataclass
class LayerWeights:
    kernel: np.ndarray  # float32, shape (O, I, kh, kw)
    bias: np.ndarray    # float32, shape (O,)


@dataclass
class WeightStore:
    """Float32 parameters for every weighted layer of one model."""

    tensors: dict[int, LayerWeights]

    def kernel(self, layer_id: int) -> np.ndarray:
        return self.tensors[layer_id].kernel

    def bias(self, layer_id: int) -> np.ndarray:
        return self.tensors[layer_id].bias

    def copy(self) -> "WeightStore":
        return WeightStore({
            lid: LayerWeights(lw.kernel.copy(), lw.bias.copy())
            for lid, lw in self.tensors.items()
        })

    def allclose(self, other: "WeightStore") -> bool:
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            np.array_equal(self.tensors[k].kernel, other.tensors[k].kernel)
            and np.array_equal(self.tensors[k].bias, other.tensors[k].bias)
            for k in self.tensors
        )


def init_weights(model: ModelSpec, seed: int) -> WeightStore:
    """Uniform fan-in-scaled init, deterministic for a given seed.

    Each kernel value is drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with
    fan_in = in_features * kernel_h * kernel_w; biases start at zero. Layers
    are drawn in ascending id order from one PCG64 stream, so the full store
    is bit-reproducible.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[int, LayerWeights] = {}
    for layer in model.weighted_layers:
        o, i, kh, kw = layer.weight_shape
        fan_in = i * kh * kw
        bound = 1.0 / np.sqrt(fan_in)
        kernel = rng.uniform(-bound, bound, size=(o, i, kh, kw)).astype(np.float32)
        bias = np.zeros(o, dtype=np.float32)
        tensors[layer.id] = LayerWeights(kernel, bias)
    return WeightStore(tensors)


def save_weights(store: WeightStore, path: str | Path) -> None:
    ids = sorted(store.tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(ids)))
        for lid in ids:
            lw = store.tensors[lid]
            kernel = np.ascontiguousarray(lw.kernel, dtype="<f4")
            bias = np.ascontiguousarray(lw.bias, dtype="<f4")
            fh.write(struct.pack("<IQ", lid, kernel.size))
            fh.write(kernel.tobytes())
            fh.write(bias.tobytes())


def load_weights(path: str | Path, model: ModelSpec) -> WeightStore:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic)")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[int, LayerWeights] = {}
    for _ in range(count):
        if off + 12 > len(data):
            raise ValueError(f"{path}: truncated weights file")
        lid, nval = struct.unpack_from("<IQ", data, off)
        off += 12
        try:
            shape = model.layer(lid).weight_shape
        except IndexError:
            raise ValueError(f"{path}: layer id {lid} not in model") from None
        if shape is None:
            raise ValueError(f"{path}: layer {lid} carries no weights in this model")
        o, i, kh, kw = shape
        if nval != o * i * kh * kw:
            raise ValueError(
                f"{path}: layer {lid} kernel count {nval} != expected {o * i * kh * kw}")
        need = (nval + o) * 4
        if off + need > len(data):
            raise ValueError(f"{path}: truncated weights file at layer {lid}")
        kernel = np.frombuffer(data, dtype="<f4", count=nval, offset=off).reshape(o, i, kh, kw)
        off += nval * 4
        bias = np.frombuffer(data, dtype="<f4", count=o, offset=off)
        off += o * 4
        tensors[lid] = LayerWeights(kernel.copy(), bias.copy())
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    expected = {l.id for l in model.weighted_layers}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        raise ValueError(f"{path}: missing weights for layers {missing}")
    return WeightStore(tensors)
