"""JSON writing with plain-decimal floats and stable key order.

``json.dumps`` switches to exponent notation for small and large floats;
files written here always use positional notation that still round-trips
exactly through ``float()``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def _float(x):
    if not math.isfinite(x):
        raise ValueError(f"non-finite float {x!r} cannot be written as JSON")
    return np.format_float_positional(x, unique=True, trim="0")


def _encode(obj, indent, level, out):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," if indent else ", "
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        out.append(json.dumps(None if obj is None else bool(obj)))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, key in enumerate(sorted(obj)):
            if i:
                out.append(sep)
            out.append(pad + json.dumps(str(key)) + ": ")
            _encode(obj[key], indent, level + 1, out)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not items:
            out.append("[]")
            return
        out.append("[")
        for i, item in enumerate(items):
            if i:
                out.append(sep)
            out.append(pad)
            _encode(item, indent, level + 1, out)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__} as JSON")


def dumps(obj, indent=None):
    out = []
    _encode(obj, indent, 0, out)
    return "".join(out)


def dump(obj, path, indent=1):
    Path(path).write_text(dumps(obj, indent) + "\n")


def load(path):
    return json.loads(Path(path).read_text())


def loads(text):
    return json.loads(text)
