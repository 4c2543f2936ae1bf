"""Serialization helpers: 17-significant-digit JSON/CSV and atomic writes."""

import hashlib
import json
import math
import os
import tempfile

import numpy as np


def fmt(v):
    """Format a real with 17 significant digits (integers stay integers)."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    return "%.17g" % v


def dumps(obj, indent=1, _level=0):
    """JSON text with every float written as ``%.17g``.

    The stdlib encoder always uses ``repr`` for floats, so this is a small
    recursive writer for the plain data shapes used in this package.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            pad + json.dumps(str(k)) + ": " + dumps(v, indent, _level + 1)
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)
               for v in obj):
            return "[" + ", ".join(fmt(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_, int, float, np.integer, np.floating)):
        return fmt(obj)
    return json.dumps(str(obj))


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and ``os.replace``."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header, columns):
    """CSV text from equal-length columns; comma, LF, header row."""
    columns = [np.asarray(c) for c in columns]
    n = len(columns[0]) if columns else 0
    lines = [",".join(header)]
    for i in range(n):
        lines.append(",".join(fmt(c[i]) for c in columns))
    return "\n".join(lines) + "\n"


def write_csv(path, header, columns):
    atomic_write(path, csv_text(header, columns))


def write_json(path, obj):
    atomic_write(path, dumps(obj) + "\n")


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
