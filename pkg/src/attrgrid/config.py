"""Plain-text ``key = value`` run configs (``#`` starts a comment)."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import FormatError


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise FormatError(f"config line {lineno}: empty key")
        out[key] = parse_value(value)
    return out


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def format_config(values: dict) -> str:
    def fmt(v):
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v) + ("," if len(v) == 1 else "")
        return str(v).lower() if isinstance(v, bool) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())


def split_known(cls, values: dict) -> tuple[dict, dict]:
    """Separate dataclass fields of ``cls`` from other keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    known = {k: v for k, v in values.items() if k in names}
    rest = {k: v for k, v in values.items() if k not in names}
    return known, rest


def build(cls, values: dict):
    """Instantiate ``cls`` coercing scalars to the type of each field's default."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = f.default
        if isinstance(default, tuple) and not isinstance(v, tuple):
            v = (v,)
        elif isinstance(default, bool):
            v = bool(v)
        elif isinstance(default, float) and isinstance(v, int):
            v = float(v)
        elif isinstance(default, int) and not isinstance(default, bool) and isinstance(v, float):
            if v != int(v):
                raise FormatError(f"{f.name} expects an integer, got {v}")
            v = int(v)
        kwargs[f.name] = v
    return cls(**kwargs)
