"""CSV and JSON helpers (comma-separated, header row, full-precision floats)."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .glm import EventTable


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return str(x)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_matrix(path, matrix, names=None) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    names = names or [f"c{j + 1}" for j in range(matrix.shape[1])]
    write_rows(path, names, matrix.tolist())


def read_matrix(path) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(rows) < 2:
        raise FormatError(f"{path}: expected a header row and data rows")
    try:
        return np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric entry ({exc})") from exc


def read_events(path, n_scans: int, tr: float) -> EventTable:
    """Read ``onset,duration,label`` rows; row order defines the regressors."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = {"onset", "duration", "label"} - set(reader.fieldnames or ())
            if missing:
                raise FormatError(f"{path}: missing column(s) {sorted(missing)}")
            rows = list(reader)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    try:
        onsets = [float(r["onset"]) for r in rows]
        durations = [float(r["duration"]) for r in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: bad onset/duration ({exc})") from exc
    labels = [r["label"] for r in rows]
    return EventTable(onsets, durations, labels, n_scans, tr)


def read_labels(path) -> np.ndarray:
    """The ``label`` column of an events CSV."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if "label" not in (reader.fieldnames or ()):
                raise FormatError(f"{path}: missing column 'label'")
            return np.array([r["label"] for r in reader])
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_events(path, events: EventTable) -> None:
    write_rows(path, ["onset", "duration", "label"],
               zip(events.onsets, events.durations, events.labels))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
