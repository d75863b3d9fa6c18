"""File formats: counts CSV, times CSV, YAML run configs, JSON results."""

from __future__ import annotations

import copy
import csv
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .core import CountArrangement
from .movement import SurveyDesign

FORMAT_VERSION = 1
COUNT_FIELDS = ["time_index", "cell_index", "x_lo", "x_hi", "y_lo", "y_hi", "count"]
TIME_FIELDS = ["time_index", "t"]


class ConfigError(ValueError):
    """Invalid configuration or input file."""


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _version_line() -> str:
    return f"# format_version={FORMAT_VERSION}\n"


def _read_versioned_csv(path: Path, fields: list[str]) -> list[dict]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    version = None
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "format_version":
                version = val.strip()
        elif line.strip():
            body.append(line)
    if version is None:
        raise ConfigError(f"{path}: missing format_version marker")
    if version != str(FORMAT_VERSION):
        raise ConfigError(f"{path}: unsupported format_version {version}")
    reader = csv.DictReader(body)
    if reader.fieldnames != fields:
        raise ConfigError(f"{path}: expected columns {','.join(fields)}")
    return list(reader)


def _fmt(x: float) -> str:
    return repr(float(x))


def counts_csv(counts: CountArrangement, design: SurveyDesign) -> str:
    if counts.schedule.m != design.m:
        raise ValueError("counts do not match the design")
    buf = _io.StringIO()
    buf.write(_version_line())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COUNT_FIELDS)
    for k, (row, b) in enumerate(zip(counts.counts, design.bounds)):
        for l, (q, cell) in enumerate(zip(row, b)):
            w.writerow([k, l, *map(_fmt, cell), int(q)])
    return buf.getvalue()


def times_csv(times) -> str:
    buf = _io.StringIO()
    buf.write(_version_line())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIME_FIELDS)
    for k, t in enumerate(times):
        w.writerow([k, _fmt(t)])
    return buf.getvalue()


def write_counts(path, counts: CountArrangement, design: SurveyDesign) -> None:
    atomic_write(path, counts_csv(counts, design))


def write_times(path, times) -> None:
    atomic_write(path, times_csv(times))


def read_times(path) -> np.ndarray:
    rows = _read_versioned_csv(Path(path), TIME_FIELDS)
    try:
        idx = [int(r["time_index"]) for r in rows]
        t = [float(r["t"]) for r in rows]
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if idx != list(range(len(idx))):
        raise ConfigError(f"{path}: time_index must run 0..n-1 in order")
    return np.array(t)


def read_counts(path, times_path=None) -> tuple[CountArrangement, SurveyDesign]:
    """Read a long-format counts file and its ``times.csv`` (default: same directory)."""
    path = Path(path)
    times = read_times(times_path or path.parent / "times.csv")
    rows = _read_versioned_csv(path, COUNT_FIELDS)
    cells: dict[int, dict[int, tuple]] = {}
    try:
        for r in rows:
            k, l = int(r["time_index"]), int(r["cell_index"])
            geom = tuple(float(r[f]) for f in ("x_lo", "x_hi", "y_lo", "y_hi"))
            q = int(r["count"])
            if l in cells.setdefault(k, {}):
                raise ConfigError(f"{path}: duplicate cell ({k},{l})")
            cells[k][l] = (geom, q)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if sorted(cells) != list(range(times.size)):
        raise ConfigError(f"{path}: every time in times.csv needs at least one cell")
    bounds, counts = [], []
    for k in range(times.size):
        ls = sorted(cells[k])
        if ls != list(range(len(ls))):
            raise ConfigError(f"{path}: cell_index at time {k} must run 0..m-1")
        bounds.append([cells[k][l][0] for l in ls])
        counts.append([cells[k][l][1] for l in ls])
    try:
        return CountArrangement(counts), SurveyDesign(times, bounds)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ------------------------------------------------------------ configs

_NUM = {"type": "number"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "seed": {"type": "integer"},
        "model": {
            "type": "object",
            "properties": {
                "family": {"enum": ["steady_ou", "conditioned_ou", "brownian", "mixture"]},
                "params": {"type": "object", "additionalProperties": _NUM},
            },
            "required": ["family", "params"],
            "additionalProperties": False,
        },
        "design": {
            "type": "object",
            "properties": {
                "n_times": {"type": "integer", "minimum": 1},
                "time_window": _PAIR,
                "cells_per_time": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "cell_side": {"type": "number", "exclusiveMinimum": 0},
                "domain": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
            },
            "additionalProperties": False,
        },
        "size": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["ecm", "poisson"]},
                "N": {"type": "integer", "minimum": 1},
                "rate": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["mode"],
            "additionalProperties": False,
        },
        "estimation": {
            "type": "object",
            "properties": {
                "estimator": {"enum": ["mgle", "mcle"]},
                "space": {"enum": ["default", "explicit"]},
                "rate_bounds": _PAIR,
                "parameters": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "name": {"type": "string"},
                            "transform": {"enum": ["identity", "log", "logit"]},
                            "lower": _NUM,
                            "upper": _NUM,
                            "starts": {"type": "array", "items": _NUM, "minItems": 1},
                        },
                        "required": ["name", "transform", "lower", "upper", "starts"],
                        "additionalProperties": False,
                    },
                },
            },
            "additionalProperties": False,
        },
        "bootstrap": {
            "type": "object",
            "properties": {
                "n": {"type": "integer", "minimum": 0},
                "overdraw": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "study": {
            "type": "object",
            "properties": {
                "sizes": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "estimators": {"type": "array", "items": {"enum": ["mgle", "mcle"]}},
                "replicates": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "votes": {
            "type": "object",
            "properties": {
                "starts": {"type": "integer", "minimum": 1},
                "bootstrap": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}

DEFAULT_CONFIG = {
    "format_version": FORMAT_VERSION,
    "seed": 0,
    "design": {
        "n_times": 10,
        "time_window": [0.0, 10.0],
        "cells_per_time": [10, 50],
        "cell_side": 0.1,
        "domain": [-1.0, 1.0, -1.0, 1.0],
    },
    "estimation": {"estimator": "mcle", "space": "default", "rate_bounds": [0.1, 10.0]},
    "bootstrap": {"n": 1000, "overdraw": 0.045},
    "study": {"sizes": [], "estimators": ["mcle"], "replicates": 0},
    "votes": {"starts": 3, "bootstrap": 0},
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not key=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    """Load a YAML config over the defaults, apply overrides, validate."""
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, user)
    for o in overrides:
        apply_override(cfg, o)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    return cfg


def to_json(obj) -> str:
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        if isinstance(o, np.generic):
            return clean(o.item())
        if isinstance(o, float) and not math.isfinite(o):
            return None if math.isnan(o) else ("inf" if o > 0 else "-inf")
        return o

    return json.dumps(clean(obj), indent=2) + "\n"


def read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if data.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: missing or unsupported format_version")
    return data
