"""Deterministic structured-text output.

Reports, manifests and cassettes are diffed between runs, so they are
written with sorted keys, two-space indentation and floats fixed at six
decimals. ``json`` cannot format floats this way, hence the small writer.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any

FLOAT_DECIMALS = 6


def _encode(obj: Any, level: int, indent: str, floats: bool) -> str:
    pad = indent * level
    inner = indent * (level + 1)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite float cannot be serialized: {obj!r}")
        if floats:
            return f"{obj:.{FLOAT_DECIMALS}f}"
        return repr(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError(f"keys must be strings, got {key!r}")
            items.append(
                f"{inner}{json.dumps(key, ensure_ascii=False)}: "
                f"{_encode(obj[key], level + 1, indent, floats)}"
            )
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [inner + _encode(v, level + 1, indent, floats) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, *, fixed_floats: bool = True) -> str:
    """Serialize ``obj`` deterministically; output ends with a newline."""
    return _encode(obj, 0, "  ", fixed_floats) + "\n"


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file and rename so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
