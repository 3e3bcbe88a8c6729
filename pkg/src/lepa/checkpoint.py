"""Binary checkpoint format.

Layout (all little-endian)::

    b"LEPA"  u32 version
    u32 n    n bytes of UTF-8 JSON: {"model": ModelConfig fields, "extra": {...}}
    u32 count, then per tensor:
        u32 name_len, name (UTF-8), u32 rank, rank * u32 dims,
        prod(dims) * float32 data
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from lepa.data import FormatError
from lepa.model import LEPAModel, ModelConfig

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "write_tensors", "read_tensors"]

MAGIC = b"LEPA"
VERSION = 1
_U32 = struct.Struct("<I")


def write_tensors(path, config: dict, tensors: dict):
    """Write ``tensors`` (name -> array) atomically to ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as f:
        f.write(MAGIC + _U32.pack(VERSION))
        f.write(_U32.pack(len(blob)) + blob)
        f.write(_U32.pack(len(tensors)))
        for name, t in tensors.items():
            a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
            a = np.array(a, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
            nb = name.encode("utf-8")
            f.write(_U32.pack(len(nb)) + nb + _U32.pack(a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(a.tobytes())
    os.replace(tmp, path)


def read_tensors(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise FormatError(f"{path}: not a LEPA checkpoint")
    (version,) = _U32.unpack(take(4))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n,) = _U32.unpack(take(4))
    try:
        config = json.loads(take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable config block") from e
    (count,) = _U32.unpack(take(4))
    tensors = {}
    for _ in range(count):
        (ln,) = _U32.unpack(take(4))
        name = take(ln).decode("utf-8", errors="replace")
        (rank,) = _U32.unpack(take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return config, tensors


def save_checkpoint(path, model: LEPAModel, extra: dict | None = None):
    config = {"model": model.cfg.to_dict(), "extra": extra or {}}
    write_tensors(path, config, model.state_dict())


def load_checkpoint(path) -> tuple[LEPAModel, dict]:
    """Rebuild the model; returns ``(model, extra)``."""
    config, tensors = read_tensors(path)
    try:
        cfg = ModelConfig.from_dict(config["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad model config: {e}") from e
    model = LEPAModel(cfg)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra_keys = sorted(set(tensors) - set(expected))
        raise FormatError(f"{path}: tensor mismatch, missing={missing} unexpected={extra_keys}")
    try:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    except RuntimeError as e:
        raise FormatError(f"{path}: tensor shapes do not match the stored config") from e
    return model, config.get("extra", {})
