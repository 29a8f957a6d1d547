"""Measure CSV files, JSON configs and trace/summary writers.

A measure file is a CSV with header ``x1,...,xd,weight``. Grid measures
carry a sidecar ``<stem>.json`` holding ``{"lo": [...], "hi": [...],
"cells": [...]}``. Floats are written with ``repr`` so files round-trip
exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, DoubaError
from .measures import BoxDomain, DiscreteMeasure, Grid


def _fmt(v) -> str:
    return repr(float(v))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([v if isinstance(v, (int, np.integer, str)) else _fmt(v) for v in row])
    return path


def read_rows(path):
    """Return ``(header, rows)`` of a CSV file as strings."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file ({exc.strerror or exc})") from exc
    if not rows:
        raise ConfigError(str(path), "empty file")
    return rows[0], rows[1:]


def write_measure(path, m: DiscreteMeasure) -> Path:
    header = [f"x{i + 1}" for i in range(m.dim)] + ["weight"]
    rows = (list(p) + [w] for p, w in zip(m.points, m.weights))
    path = write_rows(path, header, rows)
    if m.grid is not None:
        g = m.grid
        side = {"lo": g.domain.lo.tolist(), "hi": g.domain.hi.tolist(), "cells": list(g.cells_per_axis)}
        sidecar_path(path).write_text(json.dumps(side) + "\n", encoding="utf-8")
    return path


def read_grid(path) -> Grid:
    side = load_json(path)
    try:
        return Grid(BoxDomain(side["lo"], side["hi"]), tuple(side["cells"]))
    except KeyError as exc:
        raise ConfigError(str(path), f"missing key {exc.args[0]!r}") from exc
    except (DoubaError, TypeError, ValueError) as exc:
        raise ConfigError(str(path), str(exc)) from exc


def read_measure(path, domain: BoxDomain | None = None, normalize: bool = False) -> DiscreteMeasure:
    """Parse a measure CSV; a sidecar next to it makes a grid measure.

    ``normalize`` rescales the weights to sum to one before validation.
    """
    path = Path(path)
    header, rows = read_rows(path)
    d = len(header) - 1
    if d < 1 or header[-1] != "weight" or header[:-1] != [f"x{i + 1}" for i in range(d)]:
        raise ConfigError(str(path), "header must be x1,...,xd,weight")
    try:
        data = np.array([[float(v) for v in r] for r in rows if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(str(path), f"non-numeric field ({exc})") from exc
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != d + 1:
        raise ConfigError(str(path), "rows must have one field per header column")
    points, weights = data[:, :d], data[:, d]
    if normalize and weights.sum() > 0:
        weights = weights / weights.sum()
    grid = read_grid(sidecar_path(path)) if sidecar_path(path).exists() else None
    try:
        return DiscreteMeasure(points, weights, grid=grid, domain=domain)
    except DoubaError as exc:
        raise ConfigError(str(path), str(exc)) from exc


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read file ({exc.strerror or exc})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(str(path), "top level must be an object")
    return data


def check_keys(config: dict, allowed, required=()) -> None:
    """Reject unknown keys and report the first missing required one."""
    for key in config:
        if key not in allowed:
            raise ConfigError(key, "unknown config key")
    for key in required:
        if key not in config:
            raise ConfigError(key, "missing required config key")


def write_json(path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_summary(path, objective, certificate_upper, iterations, wall_time_ms, **extra) -> Path:
    data = {
        "objective": objective,
        "certificate_upper": certificate_upper,
        "iterations": iterations,
        "wall_time_ms": wall_time_ms,
    }
    data.update(extra)
    return write_json(path, data)


def write_cloud(path, positions) -> Path:
    positions = np.atleast_2d(positions)
    m = positions.shape[0]
    header = [f"x{i + 1}" for i in range(positions.shape[1])] + ["weight"]
    return write_rows(path, header, (list(p) + [1.0 / m] for p in positions))
