"""Static report figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(history, path, title: str) -> str:
    """Per-step training loss on a log scale."""
    steps = [row[1] for row in history]
    losses = [row[2] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_loss_comparison(histories: dict[str, list], path) -> str:
    """Several training loss curves on a shared step axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, history in histories.items():
        ax.plot([r[1] for r in history], [r[2] for r in history], lw=1.0, label=label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_pred_vs_target(per_rank: dict[int, tuple[np.ndarray, np.ndarray]],
                        path, model: str) -> str:
    """Scatter of predicted vs observed log bids, one panel per rank."""
    ranks = sorted(per_rank)
    ncols = 2
    nrows = (len(ranks) + 1) // 2
    fig, axes = plt.subplots(nrows, ncols, figsize=(9, 4 * nrows), squeeze=False)
    for ax, rank in zip(axes.ravel(), ranks):
        pred, target = per_rank[rank]
        lo = min(target.min(), pred.min())
        hi = max(target.max(), pred.max())
        ax.scatter(target, pred, s=6, alpha=0.4, linewidths=0)
        ax.plot([lo, hi], [lo, hi], color="black", lw=0.8)
        ax.set_xlabel(f"observed log bid (rank {rank})")
        ax.set_ylabel("predicted")
        ax.set_title(f"{model}, rank {rank}")
    for ax in axes.ravel()[len(ranks):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_sweep_curves(result, report, path) -> str:
    """Per-listing normalized curves (thin) plus their mean (thick)."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    grid = list(result.spec.grid)
    for curve in result.curves:
        if curve.normalized is not None:
            ax.plot(grid, curve.normalized, color="steelblue", alpha=0.12, lw=0.8)
    if not np.all(np.isnan(report.mean_normalized)):
        ax.plot(grid, report.mean_normalized, color="crimson", lw=2.0, label="mean")
        ax.legend()
    ax.set_xlabel(result.spec.feature)
    ax.set_ylabel("normalized rank-2 prediction")
    ax.set_title(
        f"{result.spec.feature} sweep: {report.fraction_monotone:.1%} monotone declines"
    )
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_attribution_bars(labels: list[str], values: list[float], path,
                          title: str) -> str:
    fig, ax = plt.subplots(figsize=(7, max(3, 0.35 * len(labels))))
    y = np.arange(len(labels))
    colors = ["firebrick" if v < 0 else "steelblue" for v in values]
    ax.barh(y, values, color=colors)
    ax.set_yticks(y)
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlabel("attribution (log-dollar contribution)")
    ax.set_title(title)
    ax.axvline(0.0, color="black", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
