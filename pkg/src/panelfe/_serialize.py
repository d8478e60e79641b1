"""Deterministic JSON emission with 17-significant-digit floats.

The %.17g format round-trips IEEE doubles exactly, so re-parsing a report
and re-serializing it is byte-identical.
"""

from __future__ import annotations

import numpy as np


def _fmt_float(x: float) -> str:
    if x != x:
        return "NaN"
    if x == float("inf"):
        return "Infinity"
    if x == float("-inf"):
        return "-Infinity"
    return "%.17g" % x


def _emit(obj, parts: list):
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, str):
        escaped = obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        parts.append(f'"{escaped}"')
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(_fmt_float(float(obj)))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts)
    elif isinstance(obj, dict):
        parts.append("{")
        for j, (key, val) in enumerate(obj.items()):
            if j:
                parts.append(", ")
            _emit(str(key), parts)
            parts.append(": ")
            _emit(val, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for j, val in enumerate(obj):
            if j:
                parts.append(", ")
            _emit(val, parts)
        parts.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_json(obj) -> str:
    parts: list = []
    _emit(obj, parts)
    return "".join(parts)
