"""Affine image warps and the naive geometric operations on embedding grids.

Conventions used throughout the package:

* images are ``(C, H, W)`` arrays, embedding grids are ``(H, W, D)`` arrays;
* pixel (or patch) centers sit at integer coordinates ``x = column``,
  ``y = row`` with the y axis pointing down;
* a positive angle is a counter-clockwise rotation as seen on screen;
* the forward transform scales, then rotates, then translates, all about
  the image center. Translations are fractions of the image extent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TransformParams",
    "TransformRanges",
    "warp_image",
    "invert",
    "rot90_grid",
    "resample_grid",
    "sample_transform",
    "inverse_map",
]

# Sample coordinates this close to an integer are snapped onto it, so that
# quarter turns and identity warps permute pixels exactly.
_SNAP = 1e-9


@dataclass(frozen=True)
class TransformParams:
    """Translation ``(tx, ty)``, rotation ``angle`` (radians) and ``scale``."""

    tx: float = 0.0
    ty: float = 0.0
    angle: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        vals = self.as_vector()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite transform parameters: {self}")
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "TransformParams":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "TransformParams":
        tx, ty, angle, scale = (float(x) for x in v)
        return cls(tx, ty, angle, scale)

    def as_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.angle, self.scale], dtype=np.float64)

    def is_identity(self) -> bool:
        return self == TransformParams()


@dataclass(frozen=True)
class TransformRanges:
    """Closed intervals from which :func:`sample_transform` draws."""

    tx: tuple[float, float] = (-0.25, 0.25)
    ty: tuple[float, float] = (-0.25, 0.25)
    angle: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    scale: tuple[float, float] = (0.7, 1.4)

    def __post_init__(self):
        limits = {
            "tx": (-0.25, 0.25),
            "ty": (-0.25, 0.25),
            "angle": (-math.pi / 2, math.pi / 2),
            "scale": (0.7, 1.4),
        }
        for name, (lim_lo, lim_hi) in limits.items():
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"empty interval for {name}: [{lo}, {hi}]")
            if lo < lim_lo - 1e-12 or hi > lim_hi + 1e-12:
                raise ValueError(
                    f"interval for {name} [{lo}, {hi}] leaves [{lim_lo}, {lim_hi}]"
                )


def _check_params(p: TransformParams):
    if not isinstance(p, TransformParams):
        raise TypeError(f"expected TransformParams, got {type(p).__name__}")
    if not np.all(np.isfinite(p.as_vector())) or p.scale <= 0:
        raise ValueError(f"invalid transform parameters: {p}")


def inverse_map(p: TransformParams, height: int, width: int):
    """Source coordinates ``(xs, ys)`` sampled by every output pixel.

    The forward map is ``y = R(angle) (scale (x - c)) + t + c``; here we
    evaluate its inverse on the output pixel lattice.
    """
    _check_params(p)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    dx = xx - cx - p.tx * width
    dy = yy - cy - p.ty * height
    cos, sin = math.cos(p.angle), math.sin(p.angle)
    # inverse of [[cos, sin], [-sin, cos]] (CCW on a y-down lattice)
    xs = (cos * dx - sin * dy) / p.scale + cx
    ys = (sin * dx + cos * dy) / p.scale + cy
    return _snap(xs), _snap(ys)


def _snap(a: np.ndarray) -> np.ndarray:
    r = np.rint(a)
    return np.where(np.abs(a - r) < _SNAP, r, a)


def _sample(src: np.ndarray, xs: np.ndarray, ys: np.ndarray, mode: str) -> np.ndarray:
    """Sample ``src`` of shape (C, H, W) at (xs, ys); zero outside the frame."""
    _, h, w = src.shape
    out_shape = (src.shape[0],) + xs.shape
    if mode == "nearest":
        xi = np.floor(xs + 0.5).astype(np.int64)
        yi = np.floor(ys + 0.5).astype(np.int64)
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros(out_shape, dtype=src.dtype)
        out[:, valid] = src[:, yi[valid], xi[valid]]
        return out
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0).astype(src.dtype)
    fy = (ys - y0).astype(src.dtype)
    out = np.zeros(out_shape, dtype=src.dtype)
    for oy, ox, wt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        xi, yi = x0 + ox, y0 + oy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0)
        out[:, valid] += wt[valid] * src[:, yi[valid], xi[valid]]
    return out


def warp_image(img: np.ndarray, p: TransformParams, mode: str = "bilinear") -> np.ndarray:
    """Warp a ``(C, H, W)`` image by ``p`` using inverse mapping.

    Out-of-frame samples are zero. The identity transform returns an exact
    copy.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        img = img.astype(np.float64)
    xs, ys = inverse_map(p, img.shape[1], img.shape[2])
    return _sample(img, xs, ys, mode)


def invert(p: TransformParams, aspect: float = 1.0) -> TransformParams:
    """Parameters of the inverse transform.

    Translations are fractions of the image extent, so the inverse depends
    on the image aspect ratio ``height / width`` unless the image is square.
    """
    _check_params(p)
    s = 1.0 / p.scale
    cos, sin = math.cos(-p.angle), math.sin(-p.angle)
    # translation in units of the image width
    tx, ty = p.tx, p.ty * aspect
    itx = -(cos * tx + sin * ty) * s
    ity = -(-sin * tx + cos * ty) * s / aspect
    return TransformParams(itx + 0.0, ity + 0.0, -p.angle + 0.0, s)


def rot90_grid(g: np.ndarray, k: int = 1) -> np.ndarray:
    """Rearrange an ``(H, W, D)`` grid by ``k`` counter-clockwise quarter turns.

    Vectors are moved, never modified.
    """
    g = np.asarray(g)
    if g.ndim != 3:
        raise ValueError(f"expected (H, W, D) grid, got shape {g.shape}")
    return np.ascontiguousarray(np.rot90(g, k=int(k) % 4, axes=(0, 1)))


def resample_grid(g: np.ndarray, p: TransformParams, mode: str = "nearest") -> np.ndarray:
    """Interpolate an ``(H, W, D)`` embedding grid as a D-channel image."""
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    g = np.asarray(g)
    if g.ndim != 3:
        raise ValueError(f"expected (H, W, D) grid, got shape {g.shape}")
    chw = np.moveaxis(g, -1, 0)
    out = warp_image(chw, p, mode=mode)
    return np.ascontiguousarray(np.moveaxis(out, 0, -1))


def sample_transform(rng: np.random.Generator, ranges: TransformRanges | None = None) -> TransformParams:
    """Draw each parameter independently and uniformly from its interval."""
    r = ranges if ranges is not None else TransformRanges()
    vals = [rng.uniform(lo, hi) if hi > lo else lo for lo, hi in (r.tx, r.ty, r.angle, r.scale)]
    return TransformParams(*(float(v) for v in vals))
