"""Plain-text ``key = value`` configuration files bound to dataclasses."""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping

_SECTION = "config"


def read_kv(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from exc
    return dict(parser[_SECTION])


def write_kv(path: str | Path, values: Mapping[str, Any]) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _coerce(raw: str, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is tuple:
        (inner, *_) = typing.get_args(hint)
        return tuple(_coerce(x.strip(), inner, key) for x in raw.split(",") if x.strip())
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {hint.__name__}, got {raw!r}") from None
    return raw


def from_mapping(cls, values: Mapping[str, str], strict: bool = True):
    """Build dataclass ``cls`` from string values; unknown keys are rejected when ``strict``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if strict and unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items() if k in names}
    return cls(**kwargs)


def load(cls, path: str | Path, strict: bool = True):
    return from_mapping(cls, read_kv(path), strict)


def dump(obj, path: str | Path) -> None:
    write_kv(path, dataclasses.asdict(obj))
