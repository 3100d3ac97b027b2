"""CSV tables with a units row, JSON summaries, and content hashing."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(value)


def write_table(path, columns, units, rows):
    """Write a CSV whose first row names the columns and second row gives units/definitions."""
    if len(columns) != len(units):
        raise ValueError("every column needs a units/definition entry")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerow(units)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_table(path):
    """Return ``(columns, units, rows)`` with rows as lists of strings."""
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    return r[0], r[1], r[2:]


def table_body(path) -> str:
    """Data rows only; used for reproducibility comparisons."""
    lines = Path(path).read_text().splitlines()
    return "\n".join(lines[2:])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def content_hash(*chunks) -> str:
    """Git-style blob hash over the given byte/str chunks."""
    h = hashlib.sha1()
    for c in chunks:
        data = c.encode() if isinstance(c, str) else bytes(c)
        h.update(b"blob %d\0" % len(data))
        h.update(data)
    return h.hexdigest()
