"""Minimal raster output: retrieval montages, line plots and heatmaps as PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import encode_pgm

TILE = 64
GAP = 4
BOX = 0.6  # grey level of the frame drawn round query tiles


def _frame(canvas: np.ndarray, top: int, left: int, h: int, w: int, value: float, width: int = 2) -> None:
    canvas[top:top + width, left:left + w] = value
    canvas[top + h - width:top + h, left:left + w] = value
    canvas[top:top + h, left:left + width] = value
    canvas[top:top + h, left + w - width:left + w] = value


def montage(rows: list) -> np.ndarray:
    """Grid of 64x64 tiles; ``rows`` is a list of (query, [retrieved...]) pairs.

    The query is the first tile of each row and is framed.
    """
    ncols = max(1 + len(r) for _, r in rows)
    pitch = TILE + GAP
    canvas = np.zeros((len(rows) * pitch + GAP, ncols * pitch + GAP))
    for i, (query, retrieved) in enumerate(rows):
        top = GAP + i * pitch
        for j, img in enumerate([query] + list(retrieved)):
            left = GAP + j * pitch
            canvas[top:top + TILE, left:left + TILE] = np.asarray(img).reshape(TILE, TILE)
        _frame(canvas, top - GAP // 2, GAP // 2, TILE + GAP, TILE + GAP, BOX)
    return canvas


def line_plot(x: np.ndarray, series: dict, height: int = 200, width: int = 320,
              y_range: tuple = (-1.0, 1.0)) -> np.ndarray:
    """Polyline plot of one or more curves on a black background.

    Each series gets its own grey level (brightest first); axes are dim grey.
    """
    x = np.asarray(x, dtype=float)
    pad = 10
    img = np.zeros((height, width))
    img[height - pad, pad:width - pad] = 0.3
    img[pad:height - pad + 1, pad] = 0.3
    lo, hi = y_range
    xs = pad + (x - x.min()) / max(x.max() - x.min(), 1e-12) * (width - 2 * pad - 1)
    levels = np.linspace(1.0, 0.5, max(len(series), 1))
    for level, ys in zip(levels, series.values()):
        ys = np.clip(np.asarray(ys, dtype=float), lo, hi)
        py = (height - pad) - (ys - lo) / (hi - lo) * (height - 2 * pad)
        for (x0, y0), (x1, y1) in zip(zip(xs[:-1], py[:-1]), zip(xs[1:], py[1:])):
            n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
            for t in np.linspace(0, 1, n + 1):
                r = int(round(y0 + t * (y1 - y0)))
                c = int(round(x0 + t * (x1 - x0)))
                img[r, c] = max(img[r, c], level)
    return img


def heatmap(grid: np.ndarray, cell: int = 8, value_range: tuple = (-1.0, 1.0)) -> np.ndarray:
    """Each grid value becomes a ``cell`` x ``cell`` block; ``value_range`` maps to black..white."""
    lo, hi = value_range
    g = (np.clip(np.asarray(grid, dtype=float), lo, hi) - lo) / (hi - lo)
    return np.kron(g, np.ones((cell, cell)))


def save_pgm(values: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_pgm(values))
