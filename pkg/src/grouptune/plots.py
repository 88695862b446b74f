"""Static figure rendering for run artifacts.

Everything draws through the Agg backend straight to files; no window is
ever opened. Each function takes the already-computed result object plus an
output path, so the plotting layer stays free of training logic.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_accuracy_curves(report, path):
    """Test and pseudo-label accuracy per epoch, one figure."""
    epochs = [r.epoch for r in report.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.test_accuracy for r in report.rows],
            marker="o", label="test accuracy")
    pseudo = [r.pseudo_label_accuracy for r in report.rows]
    if not all(np.isnan(pseudo)):
        ax.plot(epochs, pseudo, marker="s", label="pseudo-label accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_gap_curve(report, path):
    """test_accuracy - pseudo_label_accuracy per epoch."""
    epochs = [r.epoch for r in report.rows]
    gaps = report.tolerance_gaps()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, gaps, marker="o", color="tab:red")
    ax.axhline(0.0, color="gray", lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test minus pseudo-label accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ablation_bars(result, path):
    """Mean final accuracy per objective variant, std as error bars."""
    names = [r.name for r in result.rows]
    means = [r.mean for r in result.rows]
    stds = [r.std for r in result.rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4,
           color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("final test accuracy")
    ax.set_ylim(0, 1)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_sensitivity_heatmap(result, path):
    """Accuracy over the (projector_dim, keys_per_category) grid."""
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(result.matrix, cmap="viridis", vmin=0, vmax=1,
                   aspect="auto")
    ax.set_xticks(range(len(result.queue_sizes)))
    ax.set_xticklabels(result.queue_sizes)
    ax.set_yticks(range(len(result.projector_dims)))
    ax.set_yticklabels(result.projector_dims)
    ax.set_xlabel("keys per category")
    ax.set_ylabel("projector dimension")
    for i in range(len(result.projector_dims)):
        for j in range(len(result.queue_sizes)):
            ax.text(j, i, f"{result.matrix[i, j]:.2f}", ha="center",
                    va="center", color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="final test accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
