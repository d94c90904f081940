"""Static report figures: image grids and loss curves, rendered to PNG files."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 100,
    "savefig.bbox": "tight",
}


def image_grid(path: str | os.PathLike, rows: Sequence[Sequence[np.ndarray]], col_titles: Sequence[str] = (),
               row_titles: Sequence[str] = (), cell: float = 2.0) -> Path:
    """Save a grid of (H, W, 3) or (H, W) images; single-channel cells are drawn in gray."""
    nr, nc = len(rows), max(len(r) for r in rows)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nr, nc, figsize=(cell * nc, cell * nr), squeeze=False)
        for i in range(nr):
            for j in range(nc):
                ax = axes[i][j]
                ax.set_xticks([])
                ax.set_yticks([])
                if j >= len(rows[i]) or rows[i][j] is None:
                    ax.axis("off")
                    continue
                img = np.clip(np.asarray(rows[i][j], dtype=np.float64), 0, 1)
                if img.ndim == 3 and img.shape[2] == 1:
                    img = img[..., 0]
                ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
                if i == 0 and j < len(col_titles):
                    ax.set_title(col_titles[j])
                if j == 0 and i < len(row_titles):
                    ax.set_ylabel(row_titles[i])
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def loss_curves(path: str | os.PathLike, curves: Mapping[str, Sequence[dict]], key: str = "total",
                logy: bool = True) -> Path:
    """Plot ``key`` against ``iteration`` for each named list of loss rows."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for label, rows in curves.items():
            xs = [r["iteration"] for r in rows if key in r]
            ys = [float(r[key]) for r in rows if key in r]
            if xs:
                ax.plot(xs, ys, lw=1.2, label=label)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(key)
        ax.spines[["top", "right"]].set_visible(False)
        if len(curves) > 1:
            ax.legend(frameon=False)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path
