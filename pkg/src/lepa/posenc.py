"""2D sinusoidal positional encodings on default and centered patch grids.

Coordinate grids are ``(grid_h * grid_w, 2)`` arrays of ``(h, w)`` pairs in
row-major patch order. Encodings are ``(grid_h * grid_w, dim)`` arrays whose
first half encodes ``h`` and second half encodes ``w``.
"""

from __future__ import annotations

import math

import numpy as np

from lepa.geometry import TransformParams

__all__ = [
    "sincos_1d",
    "default_grid",
    "centered_grid",
    "transform_coord_grid",
    "grid_encodings",
    "cond_pos_encodings",
    "default_pos_encodings",
]


def sincos_1d(pos, half_dim: int) -> np.ndarray:
    """Interleaved ``sin, cos`` encoding of one or many scalar positions.

    Entry ``2i`` is ``sin(pos / 10000**(2i / half_dim))`` and entry ``2i+1``
    the matching cosine. Returns shape ``pos.shape + (half_dim,)``.
    """
    if half_dim <= 0 or half_dim % 2:
        raise ValueError(f"half_dim must be a positive even number, got {half_dim}")
    pos = np.asarray(pos, dtype=np.float64)
    i = np.arange(half_dim // 2, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (2.0 * i / half_dim)
    arg = pos[..., None] * freq
    out = np.empty(pos.shape + (half_dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


def default_grid(grid_h: int, grid_w: int) -> np.ndarray:
    """Integer ``(row, col)`` coordinates starting at the top-left corner."""
    if grid_h <= 0 or grid_w <= 0:
        raise ValueError(f"grid dims must be positive, got {grid_h}x{grid_w}")
    hh, ww = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    return np.stack([hh.ravel(), ww.ravel()], axis=-1).astype(np.float64)


def centered_grid(grid_h: int, grid_w: int) -> np.ndarray:
    """Coordinates relative to the grid center, so they sum to zero."""
    g = default_grid(grid_h, grid_w)
    g[:, 0] -= (grid_h - 1) / 2.0
    g[:, 1] -= (grid_w - 1) / 2.0
    return g


def transform_coord_grid(coords: np.ndarray, p: TransformParams, grid_h: int, grid_w: int) -> np.ndarray:
    """Move centered patch coordinates to where ``p`` puts them.

    Uses the same convention as :func:`lepa.geometry.warp_image`: scale,
    rotate counter-clockwise on screen, then shift by ``(tx * grid_w,
    ty * grid_h)`` patches.
    """
    coords = np.asarray(coords, dtype=np.float64)
    h, w = coords[:, 0] * p.scale, coords[:, 1] * p.scale
    cos, sin = math.cos(p.angle), math.sin(p.angle)
    # (x, y) = (w, h); x' = cos x + sin y, y' = -sin x + cos y
    w2 = cos * w + sin * h + p.tx * grid_w
    h2 = -sin * w + cos * h + p.ty * grid_h
    return np.stack([h2, w2], axis=-1)


def grid_encodings(coords: np.ndarray, dim: int) -> np.ndarray:
    """Concatenate the ``h`` and ``w`` encodings of each coordinate pair."""
    if dim <= 0 or dim % 4:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    coords = np.asarray(coords, dtype=np.float64)
    half = dim // 2
    return np.concatenate([sincos_1d(coords[:, 0], half), sincos_1d(coords[:, 1], half)], axis=-1)


def cond_pos_encodings(grid_h: int, grid_w: int, dim: int, p: TransformParams | None = None) -> np.ndarray:
    """Encodings of the centered grid after transforming it by ``p``."""
    if dim <= 0 or dim % 4:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    coords = centered_grid(grid_h, grid_w)
    if p is not None and not p.is_identity():
        coords = transform_coord_grid(coords, p, grid_h, grid_w)
    return grid_encodings(coords, dim)


def default_pos_encodings(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Standard ViT encodings on the corner-anchored integer grid."""
    return grid_encodings(default_grid(grid_h, grid_w), dim)
