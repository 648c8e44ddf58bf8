"""Flat ``key=value`` text codec for frozen config dataclasses.

Field types are inferred from each field's default value, so every config
field must have one. Tuples of ints are written ``a,b``; tuples of int
triples (conv blocks) ``f:k:s,f:k:s``.
"""

from __future__ import annotations

import dataclasses


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join(":".join(str(v) for v in item) for item in value)
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_value(text: str, like):
    """Parse ``text`` into the type of the example value ``like``."""
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        if not text:
            return ()
        parts = [p.strip() for p in text.split(",")]
        if like and isinstance(like[0], tuple):
            return tuple(tuple(int(v) for v in p.split(":")) for p in parts)
        elem = like[0] if like else 0
        return tuple(parse_value(p, elem) for p in parts)
    return text


def to_dict(cfg) -> dict:
    return {f.name: format_value(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def from_dict(cls, values: dict, strict: bool = True):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if strict and unknown:
        raise KeyError(f"unknown {cls.__name__} key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: parse_value(v, getattr(defaults, k)) for k, v in values.items() if k in names}
    return cls(**kwargs)
