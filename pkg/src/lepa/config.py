"""Flat ``key = value`` configuration files with flag overrides.

Each command resolves one or more dataclass sections from defaults, an
optional file and ``--set key=value`` flags, in increasing precedence. A
key is routed to every section that declares it (``img_size`` feeds both
the dataset and the model), and a key no section declares is an error.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

__all__ = ["ConfigError", "read_kv_file", "parse_assignments", "resolve", "dump"]


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


def read_kv_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_assignments(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(text: str, typ, key: str):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if typ is dict or typing.get_origin(typ) is dict:
            # name:weight,name:weight
            pairs = [p.split(":") for p in text.split(",") if p.strip()]
            return {k.strip(): float(v) for k, v in pairs}
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from e
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def resolve(sections: dict[str, type], file_values: dict[str, str] | None = None, overrides: dict[str, str] | None = None):
    """Build one instance per section; returns ``{name: instance}``."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    types = {name: _field_types(cls) for name, cls in sections.items()}
    unknown = [k for k in merged if not any(k in t for t in types.values())]
    if unknown:
        known = sorted({k for t in types.values() for k in t})
        raise ConfigError(f"unknown config keys {sorted(unknown)}; known keys: {', '.join(known)}")
    out = {}
    for name, cls in sections.items():
        kwargs = {k: _coerce(v, types[name][k], k) for k, v in merged.items() if k in types[name]}
        try:
            out[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: {e}") from e
    return out


def dump(*instances) -> str:
    """Render instances back to the file format (later ones win on shared keys)."""
    values = {}
    for inst in instances:
        for k, v in dataclasses.asdict(inst).items():
            if isinstance(v, dict):
                v = ",".join(f"{a}:{b}" for a, b in v.items())
            values[k] = v
    return "".join(f"{k} = {v}\n" for k, v in values.items())
