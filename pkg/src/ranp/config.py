"""Typed key-value (de)serialization for dataclass configs."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Dict, Mapping, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid configuration; ``keys`` lists the offending entries."""

    def __init__(self, message: str, keys=()):
        self.keys = list(keys)
        super().__init__(message)


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
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
            return raw.strip()
        if origin is tuple:
            (inner, *_rest) = typing.get_args(tp)
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(_coerce(inner, p, key) for p in parts)
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.strip().lower() in ("", "none"):
                return None
            return _coerce(args[0], raw, key)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}", [key]) from None
    raise ConfigError(f"unsupported field type for {key!r}", [key])


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def to_kv(obj) -> Dict[str, str]:
    return {f.name: format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def from_kv(cls: Type[T], values: Mapping[str, str], strict: bool = True) -> T:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown and strict:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}", unknown)
    kwargs = {k: _coerce(hints[k], v, k) for k, v in values.items() if k in names}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), list(kwargs)) from None


def read_ini(path, section: str) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    parser.read(path)
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def write_ini(path, sections: Mapping[str, Mapping[str, str]]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = dict(values)
    with open(path, "w") as fh:
        parser.write(fh)
