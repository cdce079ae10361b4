"""Figure rendering for CLI reports: masks, sampled points, metric bars.

All figures go straight to files through the Agg backend, with PNG metadata
suppressed so repeated runs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import BinaryMask


def save_figure(fig, path) -> None:
    kwargs = {"dpi": 120, "bbox_inches": "tight"}
    if str(path).lower().endswith(".png"):
        kwargs["metadata"] = {"Software": None}
    fig.savefig(path, **kwargs)
    plt.close(fig)


def mask_figure(mask: BinaryMask, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(mask.data, cmap="gray_r", interpolation="nearest", origin="upper")
    ax.set_title(title or f"{mask.width}x{mask.height}, {mask.popcount} px")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return fig


def points_figure(mask: BinaryMask, coords: np.ndarray, centers: np.ndarray = None):
    """Mask with sampled point overlay; coords are [0, 1]-normalized."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(
        mask.data,
        cmap="gray_r",
        interpolation="nearest",
        origin="upper",
        extent=(0, 1, 1, 0),
        alpha=0.4,
    )
    ax.scatter(coords[:, 0], coords[:, 1], s=6, c="tab:blue", label="sampled")
    if centers is not None and len(centers):
        ax.scatter(
            centers[:, 0], centers[:, 1], s=30, c="tab:red", marker="x",
            label="kept centers",
        )
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.legend(loc="upper right", fontsize=8)
    return fig


def metrics_figure(report: dict, title: str = ""):
    """Bar chart of every scalar metric in a report (counts excluded)."""
    items = [
        (k, float(v))
        for k, v in report.items()
        if isinstance(v, (int, float)) and not isinstance(v, bool)
    ]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(items)), 3.2))
    if items:
        names, values = zip(*items)
        bars = ax.bar(names, values, color="tab:blue")
        for bar, value in zip(bars, values):
            ax.annotate(
                f"{value:.4g}",
                (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                ha="center",
                va="bottom",
                fontsize=8,
            )
        ax.tick_params(axis="x", rotation=20)
    ax.set_title(title or report.get("task", ""))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig
