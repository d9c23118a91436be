"""Reconstruction targets on the final-stage token grid.

A token at the decoder resolution covers ``32 / fh`` x ``32 / fw`` pixels
(16x16 when units end at 2x2 tokens) and, for video, the unit's two frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import TokenLayout

HOG_CELL = 8
HOG_BINS = 9
HOG_EPS = 1e-5


@dataclass
class ReconTarget:
    values: np.ndarray  # [B, U, tokens_per_unit, P]
    kind: str
    mean: np.ndarray | None = None
    var: np.ndarray | None = None


def _as_video(pixels: np.ndarray, layout: TokenLayout) -> np.ndarray:
    x = np.asarray(pixels)
    return x if layout.temporal else x[:, None]


def token_pixels(pixels, layout: TokenLayout, unit_tokens: tuple[int, int]) -> np.ndarray:
    """``[B, (T,) H, W, C]`` -> ``[B, U, fh * fw, P]`` with P ordered (frame, y, x, channel)."""
    x = _as_video(pixels, layout)
    b, frames, height, width, c = x.shape
    uf, uph, upw = layout.unit_pixels()
    t, uh, uw = layout.unit_grid
    fh, fw = unit_tokens
    qh, qw = uph // fh, upw // fw
    y = x.reshape(b, t, uf, uh, fh, qh, uw, fw, qw, c)
    y = y.transpose(0, 1, 3, 6, 4, 7, 2, 5, 8, 9)
    return y.reshape(b, t * uh * uw, fh * fw, uf * qh * qw * c)


def untoken_pixels(values: np.ndarray, layout: TokenLayout, unit_tokens: tuple[int, int],
                   channels: int = 3) -> np.ndarray:
    """Inverse of ``token_pixels``."""
    b = values.shape[0]
    uf, uph, upw = layout.unit_pixels()
    t, uh, uw = layout.unit_grid
    fh, fw = unit_tokens
    qh, qw = uph // fh, upw // fw
    y = np.asarray(values).reshape(b, t, uh, uw, fh, fw, uf, qh, qw, channels)
    y = y.transpose(0, 1, 6, 2, 4, 7, 3, 5, 8, 9)
    y = y.reshape(b, t * uf, uh * uph, uw * upw, channels)
    return y if layout.temporal else y[:, 0]


def pixel_target(pixels, layout: TokenLayout, unit_tokens: tuple[int, int] = (2, 2),
                 eps: float = 1e-6) -> ReconTarget:
    """Per-token pixels normalised to zero mean and unit variance."""
    patches = token_pixels(pixels, layout, unit_tokens).astype(np.float64)
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    values = (patches - mean) / np.sqrt(var + eps)
    dtype = np.asarray(pixels).dtype if np.issubdtype(np.asarray(pixels).dtype, np.floating) else np.float32
    return ReconTarget(values.astype(dtype), "pixel_norm", mean, var)


def hog_cells(gray: np.ndarray, cell: int = HOG_CELL, bins: int = HOG_BINS) -> np.ndarray:
    """Per-cell orientation histograms of ``[..., H, W]`` images -> ``[..., H/cell, W/cell, bins]``.

    Gradients use the centred [-1, 0, 1] kernel with edge replication.
    Orientations are unsigned (0-180 degrees) and split linearly between the
    two nearest bin centres, which sit at (i + 0.5) * 180 / bins.
    """
    g = np.asarray(gray, dtype=np.float64)
    pad = [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(g, pad, mode="edge")
    gx = p[..., 1:-1, 2:] - p[..., 1:-1, :-2]
    gy = p[..., 2:, 1:-1] - p[..., :-2, 1:-1]
    mag = np.hypot(gx, gy)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    pos = ang / (180.0 / bins) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo_bin = lo.astype(np.int64) % bins
    hi_bin = (lo_bin + 1) % bins
    eye = np.eye(bins)
    weights = (mag * (1.0 - frac))[..., None] * eye[lo_bin] + (mag * frac)[..., None] * eye[hi_bin]
    h, w = g.shape[-2:]
    if h % cell or w % cell:
        raise ValueError(f"image {h}x{w} is not a multiple of the {cell} px cell")
    lead = g.shape[:-2]
    cells = weights.reshape(*lead, h // cell, cell, w // cell, cell, bins)
    return cells.sum(axis=(-4, -2))


def hog_target(pixels, layout: TokenLayout, unit_tokens: tuple[int, int] = (2, 2),
               eps: float = HOG_EPS) -> ReconTarget:
    """Channel-mean grayscale HOG, L2-normalised over each token's cells."""
    x = _as_video(pixels, layout)
    gray = x.mean(axis=-1)  # [B, T, H, W]
    cells = hog_cells(gray)  # [B, T, H/8, W/8, bins]
    uf, uph, upw = layout.unit_pixels()
    t, uh, uw = layout.unit_grid
    fh, fw = unit_tokens
    cy, cx = uph // fh // HOG_CELL, upw // fw // HOG_CELL
    if cy < 1 or cx < 1:
        raise ValueError(f"tokens of {uph // fh}x{upw // fw} px are smaller than a HOG cell")
    b = x.shape[0]
    y = cells.reshape(b, t, uf, uh, fh, cy, uw, fw, cx, HOG_BINS)
    y = y.transpose(0, 1, 3, 6, 4, 7, 2, 5, 8, 9)
    y = y.reshape(b, t * uh * uw, fh * fw, uf * cy * cx * HOG_BINS)
    norm = np.sqrt((y * y).sum(axis=-1, keepdims=True) + eps * eps)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return ReconTarget((y / norm).astype(dtype), "hog")


def target_dim(kind: str, layout: TokenLayout, unit_tokens: tuple[int, int], channels: int = 3) -> int:
    uf, uph, upw = layout.unit_pixels()
    fh, fw = unit_tokens
    if kind == "pixel_norm":
        return uf * (uph // fh) * (upw // fw) * channels
    return uf * (uph // fh // HOG_CELL) * (upw // fw // HOG_CELL) * HOG_BINS


def make_target(kind: str, pixels, layout: TokenLayout, unit_tokens: tuple[int, int]) -> ReconTarget:
    if kind == "pixel_norm":
        return pixel_target(pixels, layout, unit_tokens)
    if kind == "hog":
        return hog_target(pixels, layout, unit_tokens)
    raise ValueError(f"unknown target kind {kind!r}")
