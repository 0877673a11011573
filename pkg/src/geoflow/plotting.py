"""Figure rendering for the report commands.

matplotlib is optional: every entry point returns ``None`` (and writes
nothing) when it is not installed, so CSV output never depends on it.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        return None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(
        {
            "font.size": 9,
            "axes.labelsize": 9,
            "legend.fontsize": 8,
            "figure.dpi": 120,
            "axes.spines.top": False,
            "axes.spines.right": False,
        }
    )
    return plt


def save_curve(
    path,
    x: Sequence[float],
    ys: dict[str, Sequence[float]],
    xlabel: str,
    ylabel: str,
    logx: bool = False,
    logy: bool = False,
    title: str | None = None,
    reference: tuple[float, float] | None = None,
) -> Path | None:
    """Line plot of one or more series against ``x``.

    ``reference=(slope, anchor_y)`` overlays a dashed power law through the
    first point, for eyeballing rates on log-log axes.
    """
    plt = _pyplot()
    if plt is None:
        return None
    fig, ax = plt.subplots(figsize=(4.0, 3.0))
    for label, y in ys.items():
        ax.plot(x, y, marker="o", ms=3, label=label)
    if reference is not None:
        slope, y0 = reference
        xs = np.asarray(x, dtype=float)
        ax.plot(xs, y0 * (xs / xs[0]) ** slope, "k--", lw=0.8, label=f"slope {slope:g}")
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(ys) > 1 or reference is not None:
        ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def save_fields(path, coords: np.ndarray, panels: dict[str, np.ndarray], sensors: np.ndarray | None = None) -> Path | None:
    """Side-by-side scatter maps of scalar fields on a 2-D point cloud."""
    plt = _pyplot()
    if plt is None or coords.shape[1] != 2:
        return None
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.5), squeeze=False)
    for ax, (label, vals) in zip(axes[0], panels.items()):
        sc = ax.scatter(coords[:, 0], coords[:, 1], c=np.asarray(vals).reshape(-1), s=6, cmap="viridis")
        if sensors is not None and label.lower().startswith("obs"):
            ax.scatter(coords[sensors, 0], coords[sensors, 1], s=2, c="r")
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(label)
        fig.colorbar(sc, ax=ax, shrink=0.8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
