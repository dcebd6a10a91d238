"""JSON <-> dataclass configuration plumbing.

Configs are nested dataclasses mirrored by nested JSON objects. Unknown
keys are rejected with their dotted path; any key can be overridden on
the command line with ``--set dotted.path=value`` (values parsed as
JSON, falling back to a raw string).
"""

from __future__ import annotations

import dataclasses
import json
import typing

from .errors import ConfigError


def config_to_dict(cfg) -> dict:
    """Recursively convert a config dataclass to plain JSON-able data."""
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


def _coerce(value, hint, path: str):
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return config_from_dict(hint, value, path)
    origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(cls, data: dict, path: str = ""):
    """Build a config dataclass from nested dicts, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        child = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {child}")
        kwargs[key] = _coerce(value, hints[key], child)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def apply_overrides(data: dict, assignments) -> dict:
    """Apply ``dotted.path=json_value`` assignments onto nested dicts."""
    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override must look like key.path=value: {assignment!r}")
        dotted, raw = assignment.split("=", 1)
        dotted = dotted.strip()
        if not dotted:
            raise ConfigError(f"override has an empty key: {assignment!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-object key")
            node = nxt
        node[parts[-1]] = value
    return data


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
