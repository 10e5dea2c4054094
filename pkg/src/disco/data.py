"""Hermetic image data: a synthetic grating dataset plus an IDX loader.

The synthetic set stands in for real image corpora so tests never download
anything. Each class is a fixed oriented sinusoidal grating template; samples
are the template times a random amplitude plus Gaussian pixel noise. One
seeded generator draws the train split then the test split, so the two are
disjoint and the whole dataset is a pure function of its arguments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticDataset:
    train_x: np.ndarray  # float32 (n, 1, size, size)
    train_y: np.ndarray  # int64 (n,)
    test_x: np.ndarray
    test_y: np.ndarray
    classes: int

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


def class_template(label: int, classes: int, size: int) -> np.ndarray:
    """Oriented sinusoidal grating for one class, values in [-1, 1].

    Orientation carries the class identity (evenly spaced over 180 degrees);
    frequency and phase also vary per class but only slightly, so no single
    scalar statistic separates the classes.
    """
    theta = np.pi * label / classes
    freq = 3.0 + 0.02 * label
    phase = 0.7 * label
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = xs * np.cos(theta) + ys * np.sin(theta)
    return np.sin(2 * np.pi * freq * wave / size + phase)


def synthetic_dataset(
    classes: int = 10,
    train_per_class: int = 60,
    test_per_class: int = 20,
    size: int = 28,
    noise: float = 1.6,
    seed: int = 0,
) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    templates = np.stack([class_template(k, classes, size) for k in range(classes)])
    # Per-pixel variance is ~0.5 from the grating plus noise^2 from the
    # additive part; dividing by its root keeps inputs near unit scale at
    # every noise level, so one learning rate works across difficulties.
    scale = 1.0 / np.sqrt(0.5 + noise * noise)

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(classes), per_class)
        amp = rng.uniform(0.8, 1.2, size=labels.size)
        imgs = templates[labels] * amp[:, None, None]
        imgs = (imgs + noise * rng.standard_normal(imgs.shape)) * scale
        perm = rng.permutation(labels.size)
        x = imgs[perm, None, :, :].astype(np.float32)
        return x, labels[perm].astype(np.int64)

    train_x, train_y = draw(train_per_class)
    test_x, test_y = draw(test_per_class)
    return SyntheticDataset(train_x, train_y, test_x, test_y, classes)


IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


def load_idx_images(path: str | Path) -> np.ndarray:
    """(n, 1, rows, cols) float32 in [0, 1] from a big-endian IDX image file."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ValueError(f"{path}: truncated IDX image file")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError(f"{path}: bad IDX image magic {magic}")
    need = 16 + n * rows * cols
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return (pixels.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0


def load_idx_labels(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated IDX label file")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != IDX_LABEL_MAGIC:
        raise ValueError(f"{path}: bad IDX label magic {magic}")
    if len(data) != 8 + n:
        raise ValueError(f"{path}: expected {8 + n} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx_dataset(
    train_images: str | Path,
    train_labels: str | Path,
    test_images: str | Path,
    test_labels: str | Path,
) -> SyntheticDataset:
    """Bundle four IDX files into the same container the synthetic set uses."""
    tx, ty = load_idx_images(train_images), load_idx_labels(train_labels)
    vx, vy = load_idx_images(test_images), load_idx_labels(test_labels)
    if tx.shape[0] != ty.shape[0] or vx.shape[0] != vy.shape[0]:
        raise ValueError("image/label counts differ")
    classes = int(max(ty.max(), vy.max())) + 1
    return SyntheticDataset(tx, ty, vx, vy, classes)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Raw little-endian float32 values plus a one-line shape sidecar."""
    path = Path(path)
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)
    Path(str(path) + ".shape").write_text(" ".join(str(d) for d in arr.shape) + "\n")


def load_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    side = Path(str(path) + ".shape")
    if not side.exists():
        raise ValueError(f"{path}: missing shape sidecar {side.name}")
    shape = tuple(int(t) for t in side.read_text().split())
    values = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise ValueError(f"{path}: {values.size} values, shape sidecar implies {expected}")
    return values.reshape(shape)
