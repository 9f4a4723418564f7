"""YAML experiment configuration and its validation."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .drive import LINEAR, NONLINEAR, DriveParams
from .engine import LoopConfig, QubitParams

EXPERIMENTS = ("reflection-map", "reflection-cut", "tilt-scan", "spectrum-single",
               "spectrum-power-sweep", "validate")

_SECTIONS = {
    "loop": {"tau", "n_bins", "phi", "phi_M", "reference_antinode_freq", "max_total",
             "per_bin_cap"},
    "qubit": {"omega0", "Gamma", "gamma_phi", "gamma_L"},
    "drive": {"omega_p", "mode", "Omega_L", "Omega_NL"},
    "sweep": {"omega_p", "phi", "omega0", "Omega_NL", "power_dbm", "omega"},
    "tolerances": {"steady_tol", "lag_span", "n_anchors", "settle", "stride", "average",
                   "tail_floor", "kappa", "batch_size"},
}
_TOP = {"experiment", "master_seed", "n_trajectories", "output", "workers", "time_unit"} \
    | set(_SECTIONS)

DEFAULTS = {
    "experiment": "spectrum-single",
    "master_seed": 0,
    "n_trajectories": 1000,
    "output": "results",
    "workers": 1,
    # seconds per internal time unit; frequency columns are written in Hz
    "time_unit": 1.0,
    "loop": {"phi": 0.0, "phi_M": float(np.pi), "reference_antinode_freq": None,
             "max_total": 2, "per_bin_cap": 1},
    "qubit": {"omega0": 0.0, "gamma_phi": 0.0, "gamma_L": 0.0},
    "drive": {"omega_p": 0.0, "mode": LINEAR, "Omega_L": 0.0, "Omega_NL": 0.0},
    "sweep": {},
    "tolerances": {"steady_tol": None, "lag_span": None, "n_anchors": 10, "settle": None,
                   "stride": None, "average": None, "tail_floor": 0.05, "kappa": None,
                   "batch_size": 32},
}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


def sweep_values(spec) -> np.ndarray:
    """``{start, stop, step}`` (inclusive of stop within half a step) or ``{values: [...]}``."""
    if isinstance(spec, dict) and "values" in spec:
        vals = np.asarray(spec["values"], dtype=float)
    elif isinstance(spec, dict) and {"start", "stop", "step"} <= set(spec):
        start, stop, step = (float(spec[k]) for k in ("start", "stop", "step"))
        if step <= 0:
            raise ValueError("sweep step must be positive")
        n = int(np.floor((stop - start) / step + 0.5)) + 1
        vals = start + step * np.arange(max(n, 0))
    else:
        raise ValueError("sweep axis needs {start, stop, step} or {values}")
    if vals.ndim != 1 or len(vals) == 0:
        raise ValueError("sweep axis is empty")
    return vals


@dataclass
class ExperimentConfig:
    experiment: str
    loop: LoopConfig
    qubit: QubitParams
    drive: DriveParams
    sweep: dict
    n_trajectories: int
    master_seed: int
    output: Path
    workers: int = 1
    time_unit: float = 1.0
    tolerances: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    def axis(self, name: str) -> Optional[np.ndarray]:
        return sweep_values(self.sweep[name]) if name in self.sweep else None

    def resolved(self) -> dict:
        """Plain-data view of the full configuration (for metadata sidecars)."""
        out = copy.deepcopy(self.raw)
        out["experiment"] = self.experiment
        out["n_trajectories"] = self.n_trajectories
        out["master_seed"] = self.master_seed
        out["output"] = str(self.output)
        out["workers"] = self.workers
        return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read a YAML file (optional), apply ``overrides`` and validate."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"YAML parse error: {exc}"]) from None
        if not isinstance(data, dict):
            raise ConfigError(["top level must be a mapping"])
    data = _merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(data)


def _auto_bins(lsec, qubit, cfg) -> int:
    """Default discretisation for the strongest drive the run will use."""
    omega_nl = [float(cfg["drive"].get("Omega_NL") or 0.0)]
    sweep = cfg.get("sweep") or {}
    try:
        if "Omega_NL" in sweep:
            omega_nl.append(float(np.max(sweep_values(sweep["Omega_NL"]))))
        if "power_dbm" in sweep and cfg["tolerances"].get("kappa"):
            from .drive import dbm_to_rabi
            omega_nl.append(float(np.max(dbm_to_rabi(sweep_values(sweep["power_dbm"]),
                                                     cfg["tolerances"]["kappa"]))))
    except (TypeError, ValueError):
        pass
    return LoopConfig.default_bins(float(lsec["tau"]), qubit.Gamma, 2 * max(omega_nl))


def build_config(data: dict) -> ExperimentConfig:
    problems = []
    for k in data:
        if k not in _TOP:
            problems.append(f"unknown key {k!r}")
    for sec, keys in _SECTIONS.items():
        val = data.get(sec, {})
        if val is None:
            continue
        if not isinstance(val, dict):
            problems.append(f"section {sec!r} must be a mapping")
            continue
        for k in val:
            if k not in keys:
                problems.append(f"unknown key {sec}.{k}")
    cfg = _merge(DEFAULTS, data)

    exp = cfg["experiment"]
    if exp not in EXPERIMENTS:
        problems.append(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    for key in ("n_trajectories", "workers", "master_seed"):
        v = cfg[key]
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
            problems.append(f"{key} must be an integer")
    if isinstance(cfg["n_trajectories"], int) and cfg["n_trajectories"] < 1:
        problems.append("n_trajectories must be >= 1")
    if isinstance(cfg["workers"], int) and cfg["workers"] < 1:
        problems.append("workers must be >= 1")
    if isinstance(cfg["master_seed"], int) and cfg["master_seed"] < 0:
        problems.append("master_seed must be >= 0")
    if not (isinstance(cfg["time_unit"], (int, float)) and cfg["time_unit"] > 0):
        problems.append("time_unit must be a positive number")

    loop = qubit = drive = None
    try:
        qubit = QubitParams(**cfg["qubit"])
    except (TypeError, ValueError) as exc:
        problems.append(f"qubit: {exc}")
    lsec = dict(cfg["loop"])
    if lsec.get("n_bins", "auto") == "auto" and qubit is not None and "tau" in lsec:
        lsec["n_bins"] = _auto_bins(lsec, qubit, cfg)
    try:
        loop = LoopConfig(**lsec)
    except (TypeError, ValueError) as exc:
        problems.append(f"loop: {exc}")
    dsec = dict(cfg["drive"])
    if dsec.get("mode") not in (LINEAR, NONLINEAR):
        problems.append(f"drive.mode must be {LINEAR!r} or {NONLINEAR!r}")
    else:
        # inactive amplitude of the other mode is ignored rather than rejected
        if dsec["mode"] == LINEAR:
            dsec["Omega_NL"] = 0.0
        else:
            dsec["Omega_L"] = 0.0
        try:
            drive = DriveParams(**dsec)
            if loop is not None:
                drive.check_loop(loop.tau)
        except (TypeError, ValueError) as exc:
            problems.append(f"drive: {exc}")

    for name, spec in (cfg.get("sweep") or {}).items():
        try:
            sweep_values(spec)
        except (TypeError, ValueError) as exc:
            problems.append(f"sweep.{name}: {exc}")
    needs = {"reflection-map": [("omega_p",), ("phi", "omega0")],
             "reflection-cut": [("omega_p",)],
             "tilt-scan": [("omega_p",), ("phi", "omega0")],
             "spectrum-single": [("omega",)],
             "spectrum-power-sweep": [("omega",), ("Omega_NL", "power_dbm")]}
    for group in needs.get(exp, []):
        if not any(g in (cfg.get("sweep") or {}) for g in group):
            problems.append(f"{exp} needs a sweep axis {' or '.join(group)}")
    if exp in ("reflection-map", "reflection-cut", "tilt-scan") and drive is not None \
            and drive.mode != LINEAR:
        problems.append(f"{exp} needs drive.mode = {LINEAR!r}")
    if exp in ("spectrum-single", "spectrum-power-sweep") and drive is not None \
            and drive.mode != NONLINEAR:
        problems.append(f"{exp} needs drive.mode = {NONLINEAR!r}")
    if "power_dbm" in (cfg.get("sweep") or {}) and not cfg["tolerances"].get("kappa"):
        problems.append("sweep.power_dbm needs tolerances.kappa (dBm -> rate calibration)")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(exp, loop, qubit, drive, dict(cfg.get("sweep") or {}),
                            int(cfg["n_trajectories"]), int(cfg["master_seed"]),
                            Path(cfg["output"]), int(cfg["workers"]), float(cfg["time_unit"]),
                            dict(cfg["tolerances"]), cfg)
