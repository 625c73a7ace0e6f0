"""INI-style configuration files shared by every subcommand.

One section per module (``[embodiment]``, ``[scenario]``, ``[grid]``,
``[train]``, ``[eval]``); list values are comma-separated.
"""
from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path
from typing import Any, Mapping, Type, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def read_ini(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive field names
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_list(value: str, cast=float) -> list:
    return [cast(v.strip()) for v in str(value).split(",") if v.strip()]


def _coerce(value: Any, target_type: Any) -> Any:
    if not isinstance(value, str):
        return value
    t = target_type if isinstance(target_type, str) else getattr(target_type, "__name__", str(target_type))
    if "bool" in t:
        return value.strip().lower() in ("1", "true", "yes", "on")
    if "int" in t and "float" not in t:
        return int(value)
    if "float" in t:
        return float(value)
    if "tuple" in t or "list" in t:
        return tuple(parse_list(value))
    return value


def build(cls: Type[T], values: Mapping[str, Any], base: T | None = None) -> T:
    """Instantiate dataclass ``cls`` from string-or-typed values, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for k, v in values.items():
        kwargs[k] = _coerce(v, fields[k].type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def dump_ini(sections: Mapping[str, Mapping[str, Any]]) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {
            k: ", ".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
            for k, v in values.items()
        }
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p
