"""Deterministic text serialization: 17-significant-digit floats, JSON, CSV.

Every float leaving the package is written with ``%.17g`` so that parsing the
decimal text recovers the exact 64-bit value; this is what makes record replay
and the byte-identical-output contract possible.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Iterable, Sequence

import numpy as np


def fmt(value) -> str:
    """Format a scalar for output; floats get 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value cannot be serialized: {v}")
        return format(v, ".17g")
    raise TypeError(f"not a scalar: {type(value)!r}")


def dumps(obj: Any, indent: int = 0, _level: int = 0) -> str:
    """JSON text with deterministic key order and 17-digit floats."""
    pad = " " * (indent * (_level + 1)) if indent else ""
    end_pad = " " * (indent * _level) if indent else ""
    nl = "\n" if indent else ""
    sep = "," + nl
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_, int, np.integer, float, np.floating)):
        return fmt(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, dict):
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + nl + sep.join(items) + nl + end_pad + "}" if items else "{}"
    if isinstance(obj, (list, tuple)):
        items = [f"{pad}{dumps(v, indent, _level + 1)}" for v in obj]
        return "[" + nl + sep.join(items) + nl + end_pad + "]" if items else "[]"
    raise TypeError(f"cannot serialize {type(obj)!r}")


def write_json(path, obj, indent: int = 2) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj, indent=indent))
        fh.write("\n")


def write_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Write named columns of equal length; floats at full precision."""
    cols = [np.asarray(c) for c in columns]
    if len(cols) != len(header):
        raise ValueError("header/column count mismatch")
    n = len(cols[0]) if cols else 0
    for c in cols:
        if len(c) != n:
            raise ValueError("columns must have equal length")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(fmt(c[i]) for c in cols) + "\n")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a CSV written by :func:`write_csv`; returns (header, columns array)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    return header, np.asarray(data, dtype=float).T.reshape(len(header), -1)


def write_jsonl(path, records: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in records:
            fh.write(line)
            fh.write("\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
