"""Flat ``key = value`` configuration files and dataclass (de)serialization."""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(f: dataclasses.Field, raw):
    """Convert ``raw`` to the type of ``f``'s default."""
    if not isinstance(raw, str):
        return raw
    default = f.default if f.default is not dataclasses.MISSING else None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{f.name}: cannot parse {raw!r}") from exc
    return raw


def from_strings(cls, values: dict):
    """Build dataclass ``cls`` from the subset of ``values`` naming its fields."""
    kwargs = {f.name: parse_value(f, values[f.name]) for f in dataclasses.fields(cls) if f.name in values}
    return cls(**kwargs)


def to_strings(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    return out


def field_names(*classes) -> set:
    return {f.name for cls in classes for f in dataclasses.fields(cls)}


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip()] = value.strip()
    return values


def write_config(values: dict, path) -> Path:
    path = Path(path)
    lines = [f"{k} = {v}" for k, v in sorted(values.items())]
    path.write_text("\n".join(lines) + "\n")
    return path
