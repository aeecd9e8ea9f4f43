"""Minimal SVG heatmaps for bird's-eye slices of label, flow and cost grids."""
from __future__ import annotations

import numpy as np

from .semhead import EMPTY

PALETTE = ("#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1",
           "#ff9da7", "#9c755f", "#bab0ac", "#86bcb6", "#d37295", "#8cd17d", "#b6992d",
           "#499894", "#f1ce63", "#a0cbe8")
EMPTY_COLOR = "#ffffff"


def _gray(x: float) -> str:
    g = int(round(255 * (1.0 - x)))
    return f"#{g:02x}{g:02x}{g:02x}"


def _svg(colors: np.ndarray, title: str, cell: int) -> str:
    rows, cols = colors.shape
    w, h = cols * cell, rows * cell + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
           f'viewBox="0 0 {w} {h}">',
           f'<text x="2" y="14" font-family="monospace" font-size="12">{title}</text>']
    for r in range(rows):
        for c in range(cols):
            out.append(f'<rect x="{c * cell}" y="{20 + r * cell}" width="{cell}" '
                       f'height="{cell}" fill="{colors[r, c]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def top_labels(labels: np.ndarray) -> np.ndarray:
    """Highest occupied label of each column (EMPTY where the column is empty)."""
    occ = labels != EMPTY
    z = labels.shape[2]
    top = z - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    out = np.take_along_axis(labels, top[..., None], axis=2)[..., 0]
    return np.where(occ.any(axis=2), out, EMPTY)


def label_svg(labels2d: np.ndarray, title: str = "labels", cell: int = 12) -> str:
    lab = np.asarray(labels2d)
    colors = np.empty(lab.shape, dtype=object)
    for idx, v in np.ndenumerate(lab):
        colors[idx] = EMPTY_COLOR if v == EMPTY else PALETTE[int(v) % len(PALETTE)]
    return _svg(colors, title, cell)


def scalar_svg(values2d: np.ndarray, title: str = "", cell: int = 12,
               lo: float | None = None, hi: float | None = None) -> str:
    """Grayscale heatmap; darker is larger.  NaNs render white."""
    v = np.asarray(values2d, dtype=np.float64)
    finite = v[np.isfinite(v)]
    if lo is None:
        lo = float(finite.min()) if finite.size else 0.0
    if hi is None:
        hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo if hi > lo else 1.0
    colors = np.empty(v.shape, dtype=object)
    for idx, x in np.ndenumerate(v):
        colors[idx] = EMPTY_COLOR if not np.isfinite(x) else _gray(min(max((x - lo) / span, 0), 1))
    return _svg(colors, f"{title} [{lo:.3g}, {hi:.3g}]", cell)
