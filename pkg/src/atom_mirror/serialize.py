"""CSV data files plus a JSON metadata sidecar per run."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))  # shortest round-trip form; 'nan' and 'inf' included


def hz(omega, time_unit: float = 1.0):
    """Angular frequency in internal units -> Hz."""
    return np.asarray(omega, dtype=float) / (2 * np.pi * time_unit)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) if isinstance(v, (float, np.floating, int, np.integer))
                            and not isinstance(v, bool) else v for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def write_spectrum(path, spec, time_unit: float = 1.0) -> Path:
    """Frequency axis in Hz; S values are the raw transform in internal units."""
    return write_csv(path, ["omega_hz", "s_value", "s_stderr"],
                     zip(hz(spec.omega, time_unit), spec.values, spec.stderr))


def write_reflection(path, trace, time_unit: float = 1.0) -> Path:
    return write_csv(path, ["freq_hz", "re_r", "im_r", "se_re", "se_im"],
                     zip(hz(trace.omega_p, time_unit), trace.r.real, trace.r.imag,
                         trace.se_re, trace.se_im))


def write_correlation(path, series, time_unit: float = 1.0) -> Path:
    return write_csv(path, ["t2_s", "re_c", "im_c", "c_stderr"],
                     zip(series.lags * time_unit, series.values.real / time_unit,
                         series.values.imag / time_unit, series.stderr / time_unit))


def read_reflection(path, time_unit: float = 1.0):
    """Read a reflection CSV (``freq_hz`` or ``frequency_hz`` column) into angular units."""
    from .observables import ReflectionTrace
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    fkey = "freq_hz" if "freq_hz" in rows[0] else "frequency_hz"
    f = np.array([float(r[fkey]) for r in rows])
    r = np.array([complex(float(x["re_r"]), float(x["im_r"])) for x in rows])
    se_re = np.array([float(x.get("se_re", "nan") or "nan") for x in rows])
    se_im = np.array([float(x.get("se_im", "nan") or "nan") for x in rows])
    return ReflectionTrace(2 * np.pi * f * time_unit, r, se_re, se_im, float("nan"))


def _jsonable(obj):
    if is_dataclass(obj):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": float(obj.real), "im": float(obj.imag)}
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_sidecar(path, metadata: dict) -> Path:
    path = Path(path)
    meta = dict(metadata)
    meta.setdefault("package_version", __version__)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def serialize(results: dict, directory, metadata: dict, time_unit: float = 1.0) -> list:
    """Write each result by type; returns the written paths (sidecar last).

    ``results`` maps a file stem to a Spectrum, ReflectionTrace or
    CorrelationSeries.
    """
    from .observables import CorrelationSeries, ReflectionTrace, Spectrum
    directory = Path(directory)
    written = []
    for stem, obj in results.items():
        if isinstance(obj, Spectrum):
            written.append(write_spectrum(directory / f"{stem}.csv", obj, time_unit))
        elif isinstance(obj, ReflectionTrace):
            written.append(write_reflection(directory / f"{stem}.csv", obj, time_unit))
        elif isinstance(obj, CorrelationSeries):
            written.append(write_correlation(directory / f"{stem}.csv", obj, time_unit))
        else:
            raise TypeError(f"cannot serialise {type(obj).__name__}")
    meta = dict(metadata)
    meta["files"] = sorted(p.name for p in written)
    written.append(write_sidecar(directory / "metadata.json", meta))
    return written
