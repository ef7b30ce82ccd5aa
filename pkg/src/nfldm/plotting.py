"""Matplotlib figures for stage reports (file output only)."""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_history(history: List[Dict[str, float]], keys: Sequence[str], path, title: str = "") -> None:
    """Loss curves against step, one line per key, log-scaled when positive."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = [row["step"] for row in history]
    positive = True
    for k in keys:
        vals = [row[k] for row in history]
        positive &= all(v > 0 for v in vals)
        ax.plot(steps, vals, label=k)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_grid(images: np.ndarray, path, ncols: int = 6, titles: Sequence[str] = ()) -> None:
    """Saves ``(N, H, W, 3)`` images in [0, 1] as a grid."""
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(1.3 * ncols, 1.3 * nrows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1), interpolation="nearest")
            if i < len(titles):
                ax.set_title(titles[i], fontsize=6)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bar_chart(labels: Sequence[str], values: Sequence[float], path, ylabel: str, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(l) for l in labels], values, color="#4c72b0")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
