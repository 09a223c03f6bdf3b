"""JSON summaries and CSV series written by the command-line runner.

Summaries use sorted keys and fixed indentation, and series carry a
``# schema=N`` first line, so reruns with the same seed produce identical
files apart from ``wall_time_s``.
"""
import json
import math
import os

import numpy as np
import pandas as pd

SCHEMA_VERSION = 1


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": _jsonable(value.real), "im": _jsonable(value.imag)}
    return value


def _ensure_parent(path):
    parent = os.path.dirname(path)
    if parent and not os.path.exists(parent):
        os.makedirs(parent)


def summary_path(prefix):
    return f"{prefix}_summary.json"


def series_path(prefix, name):
    return f"{prefix}_{name}.csv"


def write_summary(prefix, summary):
    """Write ``<prefix>_summary.json`` and return its path."""
    path = summary_path(prefix)
    _ensure_parent(path)
    payload = {"schema_version": SCHEMA_VERSION, **summary}
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(_jsonable(payload), sort_keys=True, indent=2))
        handle.write("\n")
    return path


def write_series(prefix, name, frame):
    """Write ``<prefix>_<name>.csv`` with the schema comment line first."""
    path = series_path(prefix, name)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# schema={SCHEMA_VERSION}\n")
        frame.to_csv(handle, index=False, float_format="%.12g")
    return path


def load_summary(path):
    """Load a summary written by :func:`write_summary`; None if the file is missing."""
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def load_series(path):
    """Load a CSV series, checking the schema line."""
    with open(path, "r", encoding="utf-8") as handle:
        first = handle.readline().strip()
    if first != f"# schema={SCHEMA_VERSION}":
        raise ValueError(f"{path}: unexpected schema line {first!r}")
    return pd.read_csv(path, skiprows=1)
