"""Deterministic JSON serialization.

Floats are written with 17 significant digits so every value round-trips
bit-exactly through the text form; dict keys keep insertion order. Dicts
nested inside lists are emitted one per line, which keeps detection arrays
diffable without exploding file size.
"""

from __future__ import annotations

import json
import math
from typing import Any


def format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"cannot serialize non-finite float {value!r}")
    text = format(value, ".17g")
    return text


def _encode(obj: Any, indent: int, pretty: bool) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    pad = "  " * (indent + 1)
    close_pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{json.dumps(str(k))}: {_encode(v, indent + 1, pretty)}" for k, v in obj.items()]
        if pretty:
            return "{\n" + ",\n".join(pad + it for it in items) + "\n" + close_pad + "}"
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # One element per line at the top levels, compact rows below.
        inner_pretty = pretty and not all(isinstance(v, (dict, list, tuple)) for v in obj)
        items = [_encode(v, indent + 1, inner_pretty) for v in obj]
        if pretty:
            return "[\n" + ",\n".join(pad + it for it in items) + "\n" + close_pad + "]"
        return "[" + ", ".join(items) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any) -> str:
    return _encode(obj, 0, True) + "\n"


def dump(obj: Any, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def load(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
