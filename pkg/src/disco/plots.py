"""Figure rendering for the CLI report paths.

Everything draws through the Agg backend into files, never onto a screen,
and strips volatile metadata so identical inputs give identical images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

SAVE_KW = {"dpi": 110, "metadata": {"Date": None}}


def latency_figure(report, path: str | Path, title: str | None = None) -> Path:
    """Per-layer communication vs computation latency, log scale."""
    rows = report.layers
    comm = [(r.layer_id, r.l_comm) for r in rows if r.l_comm > 0]
    comp = [(r.layer_id, r.l_comp) for r in rows if r.l_comp > 0]
    fig, ax = plt.subplots(figsize=(9, 4.2))
    ax.plot([i for i, _ in comm], [v for _, v in comm], marker="o", ms=3,
            lw=1.0, label="communication")
    ax.plot([i for i, _ in comp], [v for _, v in comp], marker="s", ms=3,
            lw=1.0, label="computation")
    ax.set_yscale("log")
    ax.set_xlabel("layer id")
    ax.set_ylabel("latency (s)")
    ax.set_title(title or "per-layer latency")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path


def equilibrium_figure(rows, path: str | Path, title: str | None = None) -> Path:
    """Equilibrium communication sparsity per layer; flagged layers marked."""
    ok = [(r.layer_id, r.s_comm) for r in rows if r.status == "ok"]
    flagged = [(r.layer_id, 0.0) for r in rows if r.status == "compute_bound"]
    fig, ax = plt.subplots(figsize=(9, 4.2))
    if ok:
        ax.plot([i for i, _ in ok], [s for _, s in ok], marker="o", ms=3,
                lw=1.0, label="equilibrium sparsity")
        mean = sum(s for _, s in ok) / len(ok)
        ax.axhline(mean, color="tab:red", lw=0.8, ls="--",
                   label=f"mean {mean:.3f}")
    if flagged:
        ax.plot([i for i, _ in flagged], [s for _, s in flagged], "x",
                color="tab:gray", label="compute bound")
    ax.set_xlabel("layer id")
    ax.set_ylabel("equilibrium communication sparsity")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title or "communication/computation equilibrium")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path


def tradeoff_figure(series, path: str | Path, title: str | None = None,
                    xlabel: str = "communication sparsity",
                    ylabel: str = "total latency (s)") -> Path:
    """One curve per labeled series of (x, y) points, log-scale y."""
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for label, points in series:
        ax.plot([x for x, _ in points], [y for _, y in points],
                marker="o", ms=3, lw=1.0, label=label)
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title or "latency vs communication sparsity")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path


def training_figure(metrics_rows, path: str | Path, title: str | None = None) -> Path:
    """Test accuracy over the training run, stage boundaries shaded."""
    accs = [row[4] for row in metrics_rows]
    stages = [row[0] for row in metrics_rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(range(len(accs)), accs, marker="o", ms=3, lw=1.0)
    prev = None
    for i, st in enumerate(stages):
        if prev is not None and st != prev:
            ax.axvline(i - 0.5, color="tab:gray", lw=0.8, ls=":")
        prev = st
    ax.set_xlabel("epoch (all stages)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title(title or "accuracy across prune-and-finetune stages")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path
