"""Desk-scale supervised training and the iterative prune-and-finetune loop.

The optimizer is plain SGD with momentum 0.9 and per-epoch step decay; every
run is bit-reproducible given (seed, config) because initialization, batch
order, and selection all draw from seeded generators. Masked training keeps
pruned kernels at exactly zero: weights are zeroed when a stage starts and
gradients are multiplied by the keep matrix before every update, so neither
the velocity nor the weight at a pruned position ever leaves zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import model_forward_backward
from .data import SyntheticDataset
from .forward import forward_model
from .masks import BlockMask, apply_mask, pattern_dense, save_mask, select_subrows
from .model import ModelSpec
from .weights import WeightStore, init_weights, save_weights

METRICS_HEADER = ["stage", "p", "epoch", "train_loss", "test_accuracy"]

STRATEGIES = {"disco_l1": "l1", "random": "random"}


class TrainError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs_dense: int = 6
    lr_initial: float = 0.02
    lr_decay: float = 1.0  # per-epoch multiplier
    batch_size: int = 64
    prune_schedule: tuple[tuple[float, int], ...] = (
        (0.5, 2), (0.8, 2), (0.9, 2), (0.95, 2), (0.99, 2))
    strategy: str = "disco_l1"
    nodes: int = 2
    finetune_lr_scale: float = 0.1
    momentum: float = 0.9
    one_shot: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TrainError(f"unknown strategy {self.strategy!r}; "
                             f"expected one of {sorted(STRATEGIES)}")
        if self.nodes < 1:
            raise TrainError("nodes must be >= 1")
        if self.epochs_dense < 0:
            raise TrainError("epochs_dense must be >= 0")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        prev = 0.0
        for p, e in self.prune_schedule:
            if not 0.0 < p <= 1.0:
                raise TrainError(f"prune fraction {p} outside (0, 1]")
            if p <= prev:
                raise TrainError("prune fractions must be strictly increasing")
            if e < 1:
                raise TrainError("finetune epochs must be >= 1")
            prev = p

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs_dense": self.epochs_dense,
            "lr_initial": self.lr_initial,
            "lr_decay": self.lr_decay,
            "batch_size": self.batch_size,
            "prune_schedule": [[p, e] for p, e in self.prune_schedule],
            "strategy": self.strategy,
            "nodes": self.nodes,
            "finetune_lr_scale": self.finetune_lr_scale,
            "momentum": self.momentum,
            "one_shot": self.one_shot,
        }

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        known = dict(data)
        sched = known.pop("prune_schedule", None)
        kwargs = {}
        for name in ("seed", "epochs_dense", "lr_initial", "lr_decay", "batch_size",
                     "strategy", "nodes", "finetune_lr_scale", "momentum", "one_shot"):
            if name in known:
                kwargs[name] = known.pop(name)
        if known:
            raise TrainError(f"unknown config fields: {sorted(known)}")
        if sched is not None:
            kwargs["prune_schedule"] = tuple((float(p), int(e)) for p, e in sched)
        return TrainConfig(**kwargs)


def load_train_config(path: str | Path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return TrainConfig.from_dict(json.load(fh))


def save_train_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")


def _grad_step(weights: WeightStore, grads, velocity, lr: float, momentum: float,
               mask: BlockMask | None) -> None:
    for lid, (dk, db) in grads.items():
        if mask is not None and lid in mask.keep:
            dk = dk * mask.keep[lid].T[:, :, None, None]
        vk, vb = velocity[lid]
        vk *= momentum
        vk += dk
        vb *= momentum
        vb += db
        lw = weights.tensors[lid]
        lw.kernel -= np.float32(lr) * vk
        lw.bias -= np.float32(lr) * vb


def _run_epochs(
    model: ModelSpec,
    weights: WeightStore,
    mask: BlockMask | None,
    dataset: SyntheticDataset,
    epochs: int,
    lr: float,
    decay: float,
    batch_size: int,
    momentum: float,
    rng: np.random.Generator,
    metrics: list | None,
    stage: int,
    p: float,
) -> list[float]:
    """SGD epochs in place on ``weights``; returns per-epoch test accuracy."""
    velocity = {
        lid: (np.zeros_like(lw.kernel), np.zeros_like(lw.bias))
        for lid, lw in weights.tensors.items()
    }
    n = dataset.train_y.shape[0]
    history = []
    for epoch in range(epochs):
        lr_e = lr * decay ** epoch
        order = rng.permutation(n)
        total_nll = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads, _ = model_forward_backward(
                model, weights, dataset.train_x[idx], dataset.train_y[idx])
            if not np.isfinite(loss):
                raise TrainError(f"loss diverged at epoch {epoch} (stage {stage})")
            total_nll += loss * idx.size
            _grad_step(weights, grads, velocity, lr_e, momentum, mask)
        acc = evaluate(model, weights, None, dataset, batch_size=256)
        history.append(acc)
        if metrics is not None:
            metrics.append((stage, p, epoch, total_nll / n, acc))
    return history


def evaluate(
    model: ModelSpec,
    weights: WeightStore,
    mask: BlockMask | None,
    dataset: SyntheticDataset,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy on the held-out split."""
    x, y = dataset.test_x, dataset.test_y
    hits = 0
    for start in range(0, y.shape[0], batch_size):
        logits = forward_model(model, weights, x[start:start + batch_size], mask=mask)
        hits += int((logits.argmax(axis=1) == y[start:start + batch_size]).sum())
    return hits / y.shape[0]


def train_dense(
    model: ModelSpec,
    dataset: SyntheticDataset,
    config: TrainConfig,
    metrics: list | None = None,
) -> tuple[WeightStore, list[float]]:
    """Train from a seeded init with dense communications (no mask)."""
    weights = init_weights(model, config.seed)
    rng = np.random.default_rng(config.seed)
    history = _run_epochs(model, weights, None, dataset, config.epochs_dense,
                          config.lr_initial, config.lr_decay, config.batch_size,
                          config.momentum, rng, metrics, stage=0, p=0.0)
    return weights, history


def finetune_masked(
    model: ModelSpec,
    weights: WeightStore,
    mask: BlockMask,
    dataset: SyntheticDataset,
    epochs: int,
    lr: float,
    batch_size: int = 64,
    momentum: float = 0.9,
    decay: float = 1.0,
    seed: int = 0,
    metrics: list | None = None,
    stage: int = 0,
    p: float = 0.0,
) -> WeightStore:
    """SGD on the masked network; the caller's store is left untouched."""
    work = apply_mask(weights, mask, model)
    rng = np.random.default_rng(seed)
    _run_epochs(model, work, mask, dataset, epochs, lr, decay, batch_size,
                momentum, rng, metrics, stage=stage, p=p)
    return work


@dataclass
class StageResult:
    stage: int
    p: float
    mask: BlockMask | None
    weights: WeightStore
    accuracy: float


@dataclass
class TrainResult:
    stages: list[StageResult]
    metrics: list = field(default_factory=list)

    @property
    def final(self) -> StageResult:
        return self.stages[-1]


def _stage_name(stage: int, p: float) -> str:
    return f"stage_{stage}_p{p:g}"


def _checkpoint(out_dir: Path, model: ModelSpec, result: StageResult) -> None:
    name = _stage_name(result.stage, result.p)
    save_weights(result.weights, out_dir / f"{name}.weights")
    mask = result.mask if result.mask is not None else pattern_dense(model, 1)
    save_mask(mask, model, out_dir / f"{name}.mask.json")


def iterative_disco(
    model: ModelSpec,
    dataset: SyntheticDataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Dense training, then prune-and-finetune stages with nested masks.

    Each stage scores sub-rows on the weights it inherits, extends the
    previous stage's mask to the cumulative fraction p_k, and finetunes at
    ``lr_initial * finetune_lr_scale``. ``one_shot`` collapses the schedule
    to its final entry, pruning straight from the dense model. One shuffle
    stream spans the whole run, so results are a pure function of the config.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics: list = []
    rng = np.random.default_rng(config.seed)

    weights = init_weights(model, config.seed)
    _run_epochs(model, weights, None, dataset, config.epochs_dense,
                config.lr_initial, config.lr_decay, config.batch_size,
                config.momentum, rng, metrics, stage=0, p=0.0)
    result = TrainResult([StageResult(0, 0.0, None, weights.copy(),
                                      evaluate(model, weights, None, dataset))])
    if out is not None:
        _checkpoint(out, model, result.stages[0])

    schedule = config.prune_schedule
    if config.one_shot and schedule:
        schedule = (schedule[-1],)
    strategy = STRATEGIES[config.strategy]
    lr_ft = config.lr_initial * config.finetune_lr_scale
    mask: BlockMask | None = None
    for k, (p, epochs) in enumerate(schedule, start=1):
        mask = select_subrows(model, weights, config.nodes, p, strategy=strategy,
                              seed=config.seed * 1000 + k, base_mask=mask)
        weights = apply_mask(weights, mask, model)
        _run_epochs(model, weights, mask, dataset, epochs, lr_ft, config.lr_decay,
                    config.batch_size, config.momentum, rng, metrics, stage=k, p=p)
        result.stages.append(StageResult(k, p, mask, weights.copy(),
                                         evaluate(model, weights, None, dataset)))
        if out is not None:
            _checkpoint(out, model, result.stages[-1])

    result.metrics = metrics
    if out is not None:
        write_metrics_csv(out / "metrics.csv", metrics)
    return result


def metrics_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for stage, p, epoch, loss, acc in rows:
        writer.writerow([stage, repr(float(p)), epoch, repr(float(loss)),
                         repr(float(acc))])
    return buf.getvalue()


def write_metrics_csv(path: str | Path, rows) -> None:
    Path(path).write_text(metrics_csv_text(rows), encoding="utf-8")
