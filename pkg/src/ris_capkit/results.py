"""Versioned CSV tables and JSON sidecars.

CSV files carry ``#`` header lines (schema name and version, experiment,
scenario hash, seed and the canonical scenario) and no timestamps, so equal
inputs give byte-identical files.  Timestamps and the package version go to
the JSON sidecar only.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError

__all__ = [
    "Schema",
    "SCHEMAS",
    "region_schema",
    "schema_fingerprint",
    "self_test",
    "format_value",
    "render_csv",
    "write_csv",
    "write_sidecar",
    "read_csv",
]


@dataclass(frozen=True)
class Schema:
    name: str
    version: int
    columns: tuple

    @property
    def fingerprint(self):
        return schema_fingerprint(self.name, self.columns)


def schema_fingerprint(name, columns):
    return hashlib.sha256(f"{name}|{','.join(columns)}".encode()).hexdigest()[:12]


SERIES = Schema("series", 1, ("x_name", "x", "series", "y", "band", "status"))
TRAJECTORY = Schema("trajectory", 1, ("run", "iteration", "objective", "max_phase_change"))
SAMPLES = Schema("samples", 1, ("sample_index", "mi_nats"))


def region_schema(num_txs):
    cols = [f"mu_{m + 1}" for m in range(num_txs)] + [f"R_{m + 1}" for m in range(num_txs)]
    return Schema(f"region{num_txs}", 1, tuple(cols) + ("sum_rate", "optimized", "ns", "sigma_deg"))


SCHEMAS = {s.name: s for s in (SERIES, TRAJECTORY, SAMPLES, region_schema(2), region_schema(3))}

# Frozen fingerprints per (name, version).  Changing a column list without
# bumping the version (and recording the new fingerprint) fails self_test.
_REGISTERED = {
    ("series", 1): "e8b47f20b13c",
    ("trajectory", 1): "9dfd0b0c9932",
    ("samples", 1): "91ccd1bdace7",
    ("region2", 1): "34909423e2bd",
    ("region3", 1): "4eca8850c4b0",
}


def self_test(schemas=None):
    """Raise ``ConfigError`` when a schema's columns drift from its version."""
    for s in (schemas or SCHEMAS).values():
        expected = _REGISTERED.get((s.name, s.version))
        if expected is None:
            raise ConfigError(f"schema {s.name} v{s.version} is not registered", "schema")
        if expected != s.fingerprint:
            raise ConfigError(
                f"schema {s.name} v{s.version} changed (fingerprint {s.fingerprint} != {expected}); bump its version",
                "schema",
            )


def format_value(v):
    """Deterministic text for one cell (shortest round-trip floats)."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float) or hasattr(v, "dtype"):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return repr(f)
    return str(v)


def render_csv(schema: Schema, rows, meta=None) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema.name} v{schema.version} {schema.fingerprint}\n")
    for key, value in (meta or {}).items():
        buf.write(f"# {key}: {value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(schema.columns)
    for row in rows:
        if len(row) != len(schema.columns):
            raise ConfigError(f"row has {len(row)} cells, schema {schema.name} has {len(schema.columns)}", "row")
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, schema: Schema, rows, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(render_csv(schema, rows, meta))
    return path


def read_csv(path):
    """Return ``(meta, header, rows)`` of a file written by :func:`write_csv`."""
    meta, body = {}, []
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                key, _, value = line[2:].rstrip("\n").partition(": ")
                meta[key] = value
            else:
                body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    return meta, header, list(reader)


@dataclass
class Sidecar:
    experiment: str
    scenario_hash: str
    seed: int
    scenario: dict
    summary: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def write_sidecar(path, sidecar: Sidecar, started: _dt.datetime, finished: _dt.datetime) -> Path:
    data = {
        "experiment": sidecar.experiment,
        "scenario_hash": sidecar.scenario_hash,
        "seed": sidecar.seed,
        "version": __version__,
        "started": started.isoformat(timespec="seconds"),
        "finished": finished.isoformat(timespec="seconds"),
        "files": sidecar.files,
        "summary": sidecar.summary,
        "scenario": sidecar.scenario,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
