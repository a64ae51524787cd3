"""Matplotlib renderers for score maps and training curves (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def truth_boundary_segments(truth_grid: np.ndarray) -> list[tuple[tuple[float, float], tuple[float, float]]]:
    """Line segments (in cell coordinates) enclosing exactly the truth-positive
    cells: an edge is drawn wherever a positive cell borders a non-positive
    cell or the grid boundary."""
    rows, cols = truth_grid.shape
    segs = []
    for r in range(rows):
        for c in range(cols):
            if not truth_grid[r, c]:
                continue
            if r == 0 or not truth_grid[r - 1, c]:
                segs.append(((c - 0.5, r - 0.5), (c + 0.5, r - 0.5)))
            if r == rows - 1 or not truth_grid[r + 1, c]:
                segs.append(((c - 0.5, r + 0.5), (c + 0.5, r + 0.5)))
            if c == 0 or not truth_grid[r, c - 1]:
                segs.append(((c - 0.5, r - 0.5), (c - 0.5, r + 0.5)))
            if c == cols - 1 or not truth_grid[r, c + 1]:
                segs.append(((c + 0.5, r - 0.5), (c + 0.5, r + 0.5)))
    return segs


def render_score_map(prob_grid: np.ndarray, truth_grid: np.ndarray | None,
                     path, title: str = "") -> None:
    """Heatmap of per-cell positive probabilities with truth outlines."""
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    im = ax.imshow(prob_grid, cmap="viridis", vmin=0.0, vmax=1.0,
                   origin="upper", interpolation="nearest")
    if truth_grid is not None:
        for (x0, y0), (x1, y1) in truth_boundary_segments(truth_grid):
            ax.plot([x0, x1], [y0, y1], color="red", linewidth=1.6)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=10)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)


def render_training_curves(history, path) -> None:
    """Loss components and pseudo-label AUC against the epoch index.

    ``history`` is a sequence of per-epoch metric records as produced by the
    trainer (attributes: epoch, l_iwscl, l_cls, l_bc, total, pseudo_auc).
    """
    epochs = [rec.epoch for rec in history]
    fig, axes = plt.subplots(1, 2, figsize=(9.6, 3.6))
    ax = axes[0]
    ax.plot(epochs, [rec.l_iwscl for rec in history], label="contrastive")
    ax.plot(epochs, [rec.l_cls for rec in history], label="instance CE")
    ax.plot(epochs, [rec.l_bc for rec in history], label="bag constraint")
    ax.plot(epochs, [rec.total for rec in history], label="total",
            color="black", linewidth=1.0, linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("training losses", fontsize=10)

    ax = axes[1]
    auc_epochs = [rec.epoch for rec in history if rec.pseudo_auc is not None]
    aucs = [rec.pseudo_auc for rec in history if rec.pseudo_auc is not None]
    if aucs:
        ax.plot(auc_epochs, aucs, marker="o", markersize=3)
        ax.set_ylim(0.0, 1.0)
    else:
        ax.text(0.5, 0.5, "no instance truth available",
                ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("epoch")
    ax.set_ylabel("pseudo-label AUC")
    ax.set_title("pseudo-label quality", fontsize=10)

    fig.tight_layout()
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
