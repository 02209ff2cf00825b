"""Flat ``key = value`` config text, mapped onto (nested) dataclasses."""

from __future__ import annotations

import dataclasses
from typing import Any


class ConfigError(ValueError):
    pass


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _fmt(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten(obj, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = v
    return out


def dump_text(obj) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in flatten(obj).items())


def _convert(current: Any, raw: str, key: str):
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            kind = type(current[0]) if current else int
            return [kind(p.strip()) for p in raw.split(",") if p.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def apply(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with ``values`` applied; unknown keys are rejected."""
    known = flatten(obj)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return _rebuild(obj, values, "")


def _rebuild(obj, values, prefix):
    kwargs = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            kwargs[f.name] = _rebuild(v, values, key + ".")
        elif key in values:
            kwargs[f.name] = _convert(v, values[key], key)
        else:
            kwargs[f.name] = v
    try:
        return type(obj)(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_text(obj, text: str, source: str = "<config>"):
    return apply(obj, parse_text(text, source))
