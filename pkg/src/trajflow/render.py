"""Track overlays drawn onto the conditioning image, saved as binary PPM."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import encode_ppm


def overlay(image: np.ndarray, grid: np.ndarray, scale: int = 4, every: int = 2, masks=None) -> np.ndarray:
    """Upscale ``image`` by ``scale`` and draw every ``every``-th track, blue at t=0 to red at t=T-1.

    With ``masks`` given, only foreground tracks are drawn.
    """
    img = np.repeat(np.repeat(np.asarray(image, dtype=np.float64), scale, 0), scale, 1)
    H, W = img.shape[:2]
    T, Gh, Gw, _ = grid.shape
    sel = np.zeros((Gh, Gw), dtype=bool)
    sel[::every, ::every] = True
    if masks is not None:
        sel &= np.asarray(masks) >= 1
    pts = np.asarray(grid, dtype=np.float64)[:, sel] * scale  # [T, N, 2]
    for t in range(T - 1):
        a = t / max(T - 2, 1)
        color = np.array([a, 0.2, 1.0 - a])
        for s in np.linspace(0.0, 1.0, 2 * scale, endpoint=False):
            p = pts[t] * (1 - s) + pts[t + 1] * s
            x = np.floor(p[:, 0]).astype(int)
            y = np.floor(p[:, 1]).astype(int)
            ok = (x >= 0) & (x < W) & (y >= 0) & (y < H)
            img[y[ok], x[ok]] = color
    return img


def write_overlay(path, image, grid, **kw) -> None:
    Path(path).write_bytes(encode_ppm(overlay(image, grid, **kw)))
