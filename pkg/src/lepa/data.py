"""Synthetic images, portable pixmap I/O, normalization and grid files."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DatasetSpec",
    "SyntheticImage",
    "FormatError",
    "generate_dataset",
    "generate_image",
    "write_ppm",
    "read_ppm",
    "load_images",
    "compute_stats",
    "normalize",
    "write_grid",
    "read_grid",
    "GRID_MAGIC",
    "GRID_VERSION",
]

logger = logging.getLogger(__name__)

GENERATORS = ("grating", "polygon", "blob", "gradient")
GRID_MAGIC = b"EGRD"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """Malformed or truncated file."""


@dataclass
class DatasetSpec:
    n_images: int = 1000
    img_size: int = 32
    channels: int = 3
    weights: dict = field(default_factory=lambda: {g: 1.0 for g in GENERATORS})
    seed: int = 0
    min_cycles: float = 1.5  # grating frequency range, cycles per image width
    max_cycles: float = 5.0

    def __post_init__(self):
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")
        if self.img_size <= 0 or self.channels < 1:
            raise ValueError("img_size and channels must be positive")
        unknown = set(self.weights) - set(GENERATORS)
        if unknown:
            raise ValueError(f"unknown generators {sorted(unknown)}")
        w = np.array([self.weights.get(g, 0.0) for g in GENERATORS], dtype=np.float64)
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise ValueError(f"generator weights must be nonnegative with positive sum: {self.weights}")
        if not 0 < self.min_cycles <= self.max_cycles:
            raise ValueError("grating cycles need 0 < min_cycles <= max_cycles")


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # (C, H, W) float32 on the 8-bit lattice k / 255
    primitives: list


def _grating(rng, yy, xx, size, channels, cycles=(1.5, 5.0)):
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    theta = rng.uniform(0, math.pi)
    freq = rng.uniform(*cycles) / size
    phase = rng.uniform(0, 2 * math.pi)
    sigma = rng.uniform(0.15, 0.35) * size
    u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + phase)
    alpha = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    color = rng.uniform(0, 1, channels)
    value = color[:, None, None] * wave[None]
    meta = dict(kind="grating", center=(cy, cx), theta=theta, freq=freq, phase=phase, sigma=sigma)
    return alpha, value, meta


def _polygon(rng, yy, xx, size, channels):
    n = int(rng.integers(3, 7))
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.12, 0.35, n) * size
    vy = cy + radii * np.sin(angles)
    vx = cx + radii * np.cos(angles)
    # even-odd rule; vertices sorted by angle give a simple polygon
    inside = np.zeros(yy.shape, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        crosses = (vy[i] > yy) != (vy[j] > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = vx[i] + (yy - vy[i]) * (vx[j] - vx[i]) / (vy[j] - vy[i])
        inside ^= crosses & (xx < x_at)
    color = rng.uniform(0, 1, channels)
    alpha = inside.astype(np.float64)
    value = np.broadcast_to(color[:, None, None], (channels,) + yy.shape)
    meta = dict(kind="polygon", vertices=list(zip(vy.tolist(), vx.tolist())), color=color.tolist())
    return alpha, value, meta


def _blob(rng, yy, xx, size, channels):
    cy, cx = rng.uniform(0.1, 0.9, 2) * size
    sy, sx = rng.uniform(0.05, 0.2, 2) * size
    theta = rng.uniform(0, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    alpha = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    color = rng.uniform(0, 1, channels)
    value = np.broadcast_to(color[:, None, None], (channels,) + yy.shape)
    meta = dict(kind="blob", center=(cy, cx), sigma=(sy, sx), theta=theta, color=color.tolist())
    return alpha, value, meta


def _gradient(rng, yy, xx, size, channels):
    theta = rng.uniform(0, 2 * math.pi)
    u = ((xx - size / 2) * math.cos(theta) + (yy - size / 2) * math.sin(theta)) / size + 0.5
    c0, c1 = rng.uniform(0, 1, (2, channels))
    value = c0[:, None, None] + (c1 - c0)[:, None, None] * np.clip(u, 0, 1)[None]
    alpha = np.full(yy.shape, 0.6)
    meta = dict(kind="gradient", theta=theta, colors=(c0.tolist(), c1.tolist()))
    return alpha, value, meta


_GEN = {"grating": _grating, "polygon": _polygon, "blob": _blob, "gradient": _gradient}


def generate_image(rng: np.random.Generator, size: int, channels: int, weights, cycles=(1.5, 5.0)) -> SyntheticImage:
    """Composite 2-5 random primitives over a random background."""
    probs = np.array([weights.get(g, 0.0) for g in GENERATORS], dtype=np.float64)
    probs /= probs.sum()
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = np.broadcast_to(rng.uniform(0, 0.3, channels)[:, None, None], (channels, size, size)).copy()
    prims = []
    for _ in range(int(rng.integers(2, 6))):
        kind = GENERATORS[rng.choice(len(GENERATORS), p=probs)]
        if kind == "grating":
            alpha, value, meta = _grating(rng, yy, xx, size, channels, cycles)
        else:
            alpha, value, meta = _GEN[kind](rng, yy, xx, size, channels)
        img = img * (1 - alpha[None]) + alpha[None] * value
        prims.append(meta)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return SyntheticImage(_from_u8(q), prims)


def _from_u8(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32) / np.float32(255.0)


def generate_dataset(spec: DatasetSpec) -> list[SyntheticImage]:
    """Deterministic synthetic images; image ``i`` uses seed ``(spec.seed, i)``."""
    out = []
    for i in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, i])
        out.append(generate_image(rng, spec.img_size, spec.channels, spec.weights, (spec.min_cycles, spec.max_cycles)))
    return out


# -- portable pixmaps -------------------------------------------------------


def write_ppm(path, img: np.ndarray):
    """Write a ``(C, H, W)`` image in [0, 1] as binary P6 (C=3) or P5 (C=1)."""
    img = np.asarray(img)
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"portable pixmaps hold 1 or 3 channels, got {c}")
    q = np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P6" if c == 3 else b"P5"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.moveaxis(q, 0, -1).tobytes())


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated header")
    return data[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Read a binary P5/P6 file as a float32 ``(C, H, W)`` image in [0, 1]."""
    data = Path(path).read_bytes()
    try:
        magic, pos = _read_token(data, 0)
        if magic not in (b"P5", b"P6"):
            raise FormatError(f"unsupported magic {magic!r}")
        w, pos = _read_token(data, pos)
        h, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad header values")
    pos += 1  # single whitespace before the raster
    c = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * c * dtype.itemsize
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise FormatError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    a = np.frombuffer(raster, dtype=dtype).reshape(h, w, c)
    a = np.moveaxis(a, -1, 0)
    if maxval == 255:
        return _from_u8(a)
    return a.astype(np.float32) / np.float32(maxval)


def load_images(path, img_size: int | None = None) -> list[np.ndarray]:
    """Load every ``.ppm``/``.pgm``/``.pnm`` file of a directory, sorted by name."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    if not files:
        logger.warning("no portable pixmaps found in %s", path)
    out = []
    for f in files:
        img = read_ppm(f)  # errors already name the file
        if img_size is not None and img.shape[1:] != (img_size, img_size):
            raise FormatError(f"{f}: expected {img_size}x{img_size}, got {img.shape[1]}x{img.shape[2]}")
        out.append(img)
    return out


# -- normalization ----------------------------------------------------------


def compute_stats(images) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a list of images."""
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    return stack.mean(axis=(0, 2, 3)), stack.std(axis=(0, 2, 3))


def normalize(images, stats) -> np.ndarray:
    """``(x - mean) / std`` per channel; ``images`` is (N, C, H, W) or (C, H, W)."""
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    if not (np.isfinite(mean).all() and np.isfinite(std).all()) or np.any(std <= 0):
        raise ValueError(f"normalization stats must be finite with positive std: {stats}")
    x = np.asarray(images)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    shape = (-1, 1, 1)
    if np.all(mean == 0) and np.all(std == 1):
        return x.astype(dt, copy=True)
    return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(dt)


# -- embedding grid files ---------------------------------------------------


def write_grid(path, grid: np.ndarray):
    """Write an ``(H, W, D)`` grid: magic, version, dims, float32 LE payload."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise ValueError(f"expected (H, W, D) grid, got shape {grid.shape}")
    h, w, d = grid.shape
    with open(path, "wb") as f:
        f.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, h, w, d))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_grid(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, d = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = data[_GRID_HEADER.size :]
    if len(payload) != h * w * d * 4:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {h * w * d * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, d).astype(np.float32)
