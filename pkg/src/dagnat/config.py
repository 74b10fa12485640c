"""``key = value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import math
import typing
from pathlib import Path as FsPath
from typing import Any, Iterable, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config(path) -> dict[str, str]:
    return parse_config_text(FsPath(path).read_text(encoding="utf-8"), str(path))


def _convert(raw: str, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(_convert(p, inner, key) for p in parts)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def apply_overrides(obj: T, kv: dict[str, str]) -> T:
    """Return a copy of dataclass ``obj`` with string values converted to field types."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return dataclasses.replace(obj, **{k: _convert(v, hints[k], k) for k, v in kv.items()})


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return str(value)


def render_config(obj: Any, keys: Iterable[str] | None = None) -> str:
    """Fully-resolved ``key = value`` text for a dataclass."""
    data = dataclasses.asdict(obj)
    keys = list(data) if keys is None else list(keys)
    return "".join(f"{k} = {_format(data[k])}\n" for k in keys)
