"""On-disk formats: binary-plus-JSON bundles, run configs and CSV import.

A dataset bundle is a directory holding ``meta.json`` and ``lfp.bin``: raw
little-endian float64 in trial-major, then channel, then time order. Array
bundles (predictions, ground truth) use the same encoding with one ``.bin``
file per named array.
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .dataset import LfpDataset
from .errors import ConfigurationError, ValidationError
from .forward import ElectrodeArray

__all__ = [
    "SCHEMA_VERSION",
    "write_dataset",
    "read_dataset",
    "write_arrays",
    "read_arrays",
    "load_run_config",
    "validate_run_config",
    "import_csv",
    "dump_json",
]

SCHEMA_VERSION = 1
LAYOUT = "trial-major, then channel, then time"
DTYPE = np.dtype("<f8")


def _schema(name):
    text = resources.files("gpcsd.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _validate(doc, schema_name, what, exc=ValidationError):
    try:
        jsonschema.validate(doc, _schema(schema_name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise exc(f"invalid {what} at {where}: {e.message}") from None


def dump_json(obj, path):
    """Deterministic JSON: sorted keys, repr-exact floats, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ValidationError(f"{what} is not valid JSON ({path}): {e}") from None


def _write_bin(path, arr):
    np.ascontiguousarray(arr, dtype=DTYPE).tofile(path)


def _read_bin(path, shape):
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"missing data file {p}")
    expected = 8 * int(np.prod(shape))
    size = p.stat().st_size
    if size != expected:
        raise ValidationError(f"{p.name} has {size} bytes; expected {expected} "
                              f"(8 bytes x {' x '.join(map(str, shape))})")
    return np.fromfile(p, dtype=DTYPE).reshape(shape).astype(float)


def _coords_json(coords):
    c = np.asarray(coords, dtype=float)
    return c.tolist()


def write_dataset(directory, dataset: LfpDataset, provenance=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "lfp_dataset",
        "n_trials": dataset.n_trials,
        "n_channels": dataset.n_channels,
        "n_samples": dataset.n_samples,
        "sample_rate_hz": float(dataset.sample_rate_hz),
        "t0_ms": float(dataset.t0_ms),
        "electrodes": {"dim": dataset.electrodes.dim, "coords": _coords_json(dataset.electrodes.coords),
                       "units": "micron"},
        "dtype": "float64",
        "byte_order": "little-endian",
        "layout": LAYOUT,
    }
    if provenance is not None:
        meta["provenance"] = provenance
    _validate(meta, "dataset_meta", "dataset metadata")
    _write_bin(d / "lfp.bin", dataset.lfp)
    dump_json(meta, d / "meta.json")
    return d


def read_dataset(directory) -> tuple[LfpDataset, dict]:
    """Load a dataset bundle; returns the dataset and its metadata."""
    d = Path(directory)
    meta = _read_json(d / "meta.json", "dataset metadata")
    _validate(meta, "dataset_meta", "dataset metadata")
    coords = meta["electrodes"]["coords"]
    if len(coords) != meta["n_channels"]:
        raise ValidationError(f"{len(coords)} electrode coordinates for {meta['n_channels']} channels")
    shape = (meta["n_trials"], meta["n_channels"], meta["n_samples"])
    lfp = _read_bin(d / "lfp.bin", shape)
    ds = LfpDataset(lfp, ElectrodeArray(coords), meta["sample_rate_hz"], meta.get("t0_ms", 0.0))
    return ds, meta


def write_arrays(directory, kind, arrays: dict, coords, times_ms, provenance=None, data_scale=None):
    """Write named float64 arrays plus coordinates and times."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=float)
        _write_bin(d / f"{name}.bin", a)
        entries[name] = {"file": f"{name}.bin", "shape": list(a.shape)}
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "arrays": entries,
        "coords": _coords_json(coords),
        "times_ms": np.asarray(times_ms, dtype=float).tolist(),
        "dtype": "float64",
        "byte_order": "little-endian",
        "layout": "C order (row-major) per array",
    }
    if data_scale is not None:
        meta["data_scale"] = float(data_scale)
    if provenance is not None:
        meta["provenance"] = provenance
    _validate(meta, "array_bundle", "array bundle metadata")
    dump_json(meta, d / "meta.json")
    return d


def read_arrays(directory) -> tuple[dict, dict]:
    """Load an array bundle; returns ``(arrays, meta)``."""
    d = Path(directory)
    meta = _read_json(d / "meta.json", "array bundle metadata")
    _validate(meta, "array_bundle", "array bundle metadata")
    arrays = {name: _read_bin(d / e["file"], tuple(e["shape"])) for name, e in meta["arrays"].items()}
    return arrays, meta


def validate_run_config(cfg: dict) -> dict:
    _validate(cfg, "run_config", "run configuration", exc=ConfigurationError)
    return cfg


def load_run_config(path) -> dict:
    if path is None:
        return {}
    return validate_run_config(_read_json(path, "run configuration"))


def import_csv(path, coords, sample_rate_hz, t0_ms=0.0) -> LfpDataset:
    """Convert a wide CSV (``trial, channel, v0, v1, ...`` per row) into a dataset.

    A header row is optional. Every (trial, channel) pair must appear exactly
    once and all rows must have the same number of samples.
    """
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append((int(row[0]), int(row[1]), [float(v) for v in row[2:]]))
            except ValueError:
                if i == 0:
                    continue
                raise ValidationError(f"{path}: row {i + 1} is not numeric") from None
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    lengths = {len(r[2]) for r in rows}
    if len(lengths) != 1:
        raise ValidationError(f"{path}: rows have different sample counts {sorted(lengths)}")
    trials = sorted({r[0] for r in rows})
    chans = sorted({r[1] for r in rows})
    if trials != list(range(len(trials))) or chans != list(range(len(chans))):
        raise ValidationError(f"{path}: trial and channel indices must be 0-based and contiguous")
    out = np.zeros((len(trials), len(chans), lengths.pop()))
    seen = set()
    for t, c, v in rows:
        if (t, c) in seen:
            raise ValidationError(f"{path}: duplicate row for trial {t}, channel {c}")
        seen.add((t, c))
        out[t, c] = v
    if len(seen) != out.shape[0] * out.shape[1]:
        raise ValidationError(f"{path}: some (trial, channel) rows are missing")
    return LfpDataset(out, ElectrodeArray(coords), sample_rate_hz, t0_ms)
