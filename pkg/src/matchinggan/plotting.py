"""Figures for reports: contact sheets, training curves and ablation charts.

Contact sheets are composed pixel-exactly with numpy and written as PNG, so
the same bank always gives the same file.  Charts go through matplotlib
with the non-interactive Agg backend.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .data import denormalize_image  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def figure(width: float = 5.0, height: float | None = None, **kwargs):
    golden = (5**0.5 - 1) / 2
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height or width * golden), **kwargs)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


# --------------------------------------------------------------------------
# image grids


def _tile(img: np.ndarray) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    u8 = denormalize_image(img)
    if u8.shape[0] == 1:
        u8 = np.repeat(u8, 3, axis=0)
    return u8.transpose(1, 2, 0)


def contact_sheet(rows, path=None, pad: int = 2, separator: int = 4, n_conditionals: int = 0,
                  background=(255, 255, 255)) -> np.ndarray:
    """Grid of images, one list per row; a wider gap follows the conditional columns.

    Each row is a sequence of ``(C, H, W)`` arrays: the conditionals first,
    then the generations.  Returns the composed uint8 array and writes it as
    PNG when ``path`` is given.
    """
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise ValueError("contact sheet needs at least one image")
    h, w = rows[0][0].shape[1:]
    n_cols = max(len(r) for r in rows)
    gap = lambda j: pad + (separator if n_conditionals and j == n_conditionals else 0)  # noqa: E731
    xs, x = [], pad
    for j in range(n_cols):
        if j:
            x += gap(j)
        xs.append(x)
        x += w
    width = x + pad
    height = pad + len(rows) * (h + pad)
    sheet = np.empty((height, width, 3), dtype=np.uint8)
    sheet[:] = background
    for i, row in enumerate(rows):
        y = pad + i * (h + pad)
        for j, img in enumerate(row):
            sheet[y:y + h, xs[j]:xs[j] + w] = _tile(img)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(sheet).save(path)
    return sheet


def save_image(img: np.ndarray, path) -> None:
    u8 = denormalize_image(img)
    mode = "L" if u8.shape[0] == 1 else "RGB"
    arr = u8[0] if mode == "L" else u8.transpose(1, 2, 0)
    Image.fromarray(arr, mode=mode).save(path)


# --------------------------------------------------------------------------
# charts


def plot_training_curves(history: list[dict], path, terms=("l_d", "l_gd", "l_1", "l_m", "val_l1")):
    fig, ax = figure(5.5)
    epochs = [h["epoch"] for h in history]
    for t in terms:
        if history and t in history[0]:
            ax.plot(epochs, [h[t] for h in history], label=t, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=7)
    return save(fig, path)


def plot_k_grid(cells, path, metric: str = "accuracy"):
    rows = list(dict.fromkeys(c.row for c in cells))
    cols = list(dict.fromkeys(c.column for c in cells))
    at = {(c.row, c.column): c for c in cells}
    grid = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            cell = at[(r, c)]
            if cell.status == "ok" and metric in cell.metrics:
                grid[i, j] = cell.metrics[metric] * (100 if metric == "accuracy" else 1)
    fig, ax = figure(4.2, 3.6)
    im = ax.imshow(grid, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    for i in range(len(rows)):
        for j in range(len(cols)):
            txt = "failed" if np.isnan(grid[i, j]) else f"{grid[i, j]:.1f}"
            ax.text(j, i, txt, ha="center", va="center", color="w", fontsize=7)
    fig.colorbar(im, ax=ax, label=metric)
    return save(fig, path)


def plot_settings(cells, path):
    labels = [c.row for c in cells]
    fig, axes = figure(9.0, 3.0, ncols=3)
    for ax, (metric, title, scale) in zip(
        axes, (("accuracy", "accuracy (%)", 100), ("fid", "FID (lower is better)", 1), ("is", "IS (higher is better)", 1))
    ):
        vals = [c.metrics.get(metric, np.nan) * scale if c.status == "ok" else np.nan for c in cells]
        ax.barh(range(len(cells)), vals, color="0.45")
        ax.set_yticks(range(len(cells)), labels if ax is axes[0] else [""] * len(cells))
        ax.invert_yaxis()
        ax.set_title(title)
    return save(fig, path)
