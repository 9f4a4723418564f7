"""Named experiment pipelines driven by an :class:`ExperimentConfig`."""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analytic
from .config import ExperimentConfig
from .drive import _wrap_signed, dbm_to_rabi, round_trip_phase
from .engine import NumericalError, SteadyStateError, config_hash, run_ensemble
from .fitting import NoResonanceError, circle_fit, tilt_consistency
from .observables import (ReflectionTrace, g1_correlation, incoherent_spectrum,
                          reflection_coefficient)
from .serialize import hz, write_csv, write_correlation, write_reflection, write_sidecar, \
    write_spectrum

log = logging.getLogger(__name__)

NUMERICAL_ERRORS = (NumericalError, SteadyStateError, NoResonanceError, np.linalg.LinAlgError)


class SweepPointError(RuntimeError):
    """A numerical failure at one sweep point; partial results are already on disk."""

    def __init__(self, point: dict, cause: Exception):
        super().__init__(f"at {point}: {type(cause).__name__}: {cause}")
        self.point = point
        self.cause = cause


def _metadata(cfg: ExperimentConfig, **extra) -> dict:
    meta = {"experiment": cfg.experiment, "config": cfg.resolved(),
            "master_seed": cfg.master_seed,
            "config_hash": config_hash(cfg.loop, cfg.qubit, cfg.drive), "partial": False}
    meta.update(extra)
    return meta


def _phi_for_omega0(cfg: ExperimentConfig, omega0: float) -> float:
    if cfg.loop.reference_antinode_freq is not None:
        return round_trip_phase(omega0, cfg.loop.tau, cfg.loop.reference_antinode_freq)
    return _wrap_signed(cfg.loop.phi_M + omega0 * cfg.loop.tau)


def _outer_axis(cfg: ExperimentConfig):
    """(name, values, per-point (loop, qubit)) for sweeps over phi or omega0."""
    if "phi" in cfg.sweep:
        vals = cfg.axis("phi")
        return "phi", vals, [(replace(cfg.loop, phi=float(v)), cfg.qubit) for v in vals]
    vals = cfg.axis("omega0")
    return "omega0", vals, [(replace(cfg.loop, phi=_phi_for_omega0(cfg, float(v))),
                             replace(cfg.qubit, omega0=float(v))) for v in vals]


def _refl_kwargs(cfg):
    t = cfg.tolerances
    kw = {"settle": t.get("settle"), "average": t.get("average"), "workers": cfg.workers}
    if t.get("steady_tol") is not None:
        kw["tol"] = t["steady_tol"]
    return kw


def _trace(cfg, loop, qubit, grid):
    rs, ses = [], []
    for w in grid:
        try:
            r, se = reflection_coefficient(loop, qubit, replace(cfg.drive, omega_p=float(w)),
                                           cfg.n_trajectories, cfg.master_seed,
                                           **_refl_kwargs(cfg))
        except NUMERICAL_ERRORS as exc:
            raise SweepPointError({"phi": loop.phi, "omega0": qubit.omega0,
                                   "omega_p": float(w)}, exc) from exc
        rs.append(r)
        ses.append(se)
        yield float(w), r, se


def reflection_map(cfg: ExperimentConfig, out: Path) -> list:
    name, vals, points = _outer_axis(cfg)
    grid = cfg.axis("omega_p")
    rows = []
    path = out / "reflection_map.csv"
    axis_col = "phi" if name == "phi" else "omega0_hz"
    header = [axis_col, "freq_hz", "re", "im", "se_re", "se_im"]
    try:
        for v, (loop, qubit) in zip(vals, points):
            a = v if name == "phi" else float(hz(v, cfg.time_unit))
            for w, r, se in _trace(cfg, loop, qubit, grid):
                rows.append([a, float(hz(w, cfg.time_unit)), r.real, r.imag, se.real, se.imag])
            write_csv(path, header, rows)  # flush after every line cut
    except SweepPointError:
        write_csv(path, header, rows)
        write_sidecar(out / "metadata.json", _metadata(cfg, partial=True, files=[path.name]))
        raise
    return [path, write_sidecar(out / "metadata.json", _metadata(cfg, files=[path.name]))]


def _cut(cfg, loop, qubit, grid):
    pts = list(_trace(cfg, loop, qubit, grid))
    r = np.array([p[1] for p in pts])
    se = np.array([p[2] for p in pts])
    meta = {"phi": loop.phi, "omega0": qubit.omega0, "tau": loop.tau,
            "n_trajectories": cfg.n_trajectories}
    return ReflectionTrace(np.asarray(grid, float), r, se.real, se.imag, cfg.drive.Omega_L, meta)


def _fit_dict(fit, time_unit):
    return {"Gamma_tilde": fit.Gamma_tilde, "gamma_d": fit.gamma_d,
            "omega0_tilde": fit.omega0_tilde,
            "omega0_tilde_hz": float(hz(fit.omega0_tilde, time_unit)),
            "center": fit.center, "radius": fit.radius, "tilt": fit.tilt,
            "rms_residual": fit.rms_residual, "stderr": fit.stderr}


def reflection_cut(cfg: ExperimentConfig, out: Path) -> list:
    trace = _cut(cfg, cfg.loop, cfg.qubit, cfg.axis("omega_p"))
    path = write_reflection(out / "reflection.csv", trace, cfg.time_unit)
    try:
        fit = circle_fit(trace)
    except NoResonanceError as exc:
        write_sidecar(out / "metadata.json",
                      _metadata(cfg, partial=True, files=[path.name], fit_error=str(exc)))
        raise SweepPointError({"phi": cfg.loop.phi}, exc) from exc
    tilt = tilt_consistency(fit, cfg.qubit.omega0, cfg.loop.tau)
    meta = _metadata(cfg, files=[path.name], circle_fit=_fit_dict(fit, cfg.time_unit),
                     tilt={"predicted": tilt.predicted, "measured": tilt.measured,
                           "difference": tilt.difference, "uncertainty": tilt.uncertainty})
    return [path, write_sidecar(out / "metadata.json", meta)]


def tilt_scan(cfg: ExperimentConfig, out: Path) -> list:
    """Circle fit per outer-axis point; the omega_p axis is a detuning from omega0."""
    name, vals, points = _outer_axis(cfg)
    offsets = cfg.axis("omega_p")
    rows = []
    path = out / "tilt.csv"
    header = ["omega0_hz", "phi", "omega0_tilde_hz", "predicted_tilt", "measured_tilt",
              "difference", "uncertainty"]
    try:
        for loop, qubit in points:
            trace = _cut(cfg, loop, qubit, qubit.omega0 + offsets)
            try:
                fit = circle_fit(trace)
            except NoResonanceError as exc:
                raise SweepPointError({"phi": loop.phi, "omega0": qubit.omega0}, exc) from exc
            t = tilt_consistency(fit, qubit.omega0, loop.tau)
            rows.append([float(hz(qubit.omega0, cfg.time_unit)), loop.phi,
                         float(hz(fit.omega0_tilde, cfg.time_unit)), t.predicted, t.measured,
                         t.difference, t.uncertainty])
            write_csv(path, header, rows)
    except SweepPointError:
        write_csv(path, header, rows)
        write_sidecar(out / "metadata.json", _metadata(cfg, partial=True, files=[path.name]))
        raise
    return [path, write_sidecar(out / "metadata.json", _metadata(cfg, files=[path.name]))]


def _spectrum(cfg, drive, omega):
    t = cfg.tolerances
    kw = {"n_anchors": int(t.get("n_anchors") or 10), "settle": t.get("settle"),
          "stride": t.get("stride"), "workers": cfg.workers,
          "batch_size": int(t.get("batch_size") or 32)}
    if t.get("steady_tol") is not None:
        kw["tol"] = t["steady_tol"]
    try:
        series = g1_correlation(cfg.loop, cfg.qubit, drive, t.get("lag_span"),
                                cfg.n_trajectories, cfg.master_seed, **kw)
    except NUMERICAL_ERRORS as exc:
        raise SweepPointError({"Omega_NL": drive.Omega_NL}, exc) from exc
    spec = incoherent_spectrum(series, omega, tail_floor=float(t.get("tail_floor") or 0.05))
    return series, spec


def _spectrum_meta(spec):
    return {k: spec.metadata[k] for k in ("phi", "phi_p", "Omega_eff", "delta",
                                          "incoherent_flux", "imag_residue") if k in spec.metadata}


def spectrum_single(cfg: ExperimentConfig, out: Path) -> list:
    series, spec = _spectrum(cfg, cfg.drive, cfg.axis("omega"))
    files = [write_spectrum(out / "spectrum.csv", spec, cfg.time_unit),
             write_correlation(out / "correlation.csv", series, cfg.time_unit)]
    meta = _metadata(cfg, files=[p.name for p in files], spectrum=_spectrum_meta(spec),
                     coherent_offset=series.offset, sum_rule={
                         "integral": spec.integral(),
                         "pi_incoherent_flux": np.pi * (series.values[0].real - series.offset)})
    return files + [write_sidecar(out / "metadata.json", meta)]


def spectrum_power_sweep(cfg: ExperimentConfig, out: Path) -> list:
    if "Omega_NL" in cfg.sweep:
        levels = cfg.axis("Omega_NL")
        dbm = [None] * len(levels)
    else:
        dbm = list(cfg.axis("power_dbm"))
        levels = dbm_to_rabi(np.array(dbm), float(cfg.tolerances["kappa"]))
    omega = cfg.axis("omega")
    files, index = [], []
    phi_p, _, _ = cfg.drive.derived(cfg.qubit.omega0, cfg.loop.tau, cfg.loop.phi)
    tau = cfg.loop.tau
    kmax = int(np.ceil((omega.max() - omega.min()) * tau / (2 * np.pi))) + 2
    ks = np.arange(-kmax, kmax + 1)
    overlays = []
    for kind, fn in (("node", analytic.node_frequencies),
                     ("antinode", analytic.antinode_frequencies)):
        for k, w in zip(ks, fn(phi_p, cfg.drive.omega_p, tau, ks)):
            if omega.min() <= w <= omega.max():
                overlays.append([kind, int(k), float(hz(w, cfg.time_unit))])
    files.append(write_csv(out / "overlays.csv", ["kind", "k", "omega_hz"], overlays))
    index_path = out / "sweep.csv"
    try:
        for i, (lvl, p) in enumerate(zip(levels, dbm)):
            drive = replace(cfg.drive, Omega_NL=float(lvl))
            _, spec = _spectrum(cfg, drive, omega)
            name = f"spectrum_{i:03d}.csv"
            files.append(write_spectrum(out / name, spec, cfg.time_unit))
            index.append([i, float(lvl), "" if p is None else float(p),
                          float(spec.metadata["Omega_eff"]), name])
            write_csv(index_path, ["index", "Omega_NL", "power_dbm", "Omega_eff", "file"], index)
    except SweepPointError:
        write_csv(index_path, ["index", "Omega_NL", "power_dbm", "Omega_eff", "file"], index)
        write_sidecar(out / "metadata.json",
                      _metadata(cfg, partial=True, files=[f.name for f in files]))
        raise
    files.append(index_path)
    meta = _metadata(cfg, files=sorted(f.name for f in files), phi_p=phi_p)
    return files + [write_sidecar(out / "metadata.json", meta)]


# -- self-validation -------------------------------------------------------------

def validation_suite(seed: int = 0, workers: int = 1) -> list:
    """Quick oracle checks; returns ``(name, passed, detail)`` tuples."""
    from .analytic import (MarkovianQubit, delayed_reflection, dense_loop_oracle,
                           markovian_reflection, mollow_spectrum_oracle)
    from .drive import DriveParams
    from .engine import LoopConfig, QubitParams
    from .observables import ensemble_average
    out = []

    def check(name, fn):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - report, do not abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), f"{detail} [{time.perf_counter() - t0:.1f}s]"))

    def decay():
        cfg = LoopConfig(tau=0.01, n_bins=1)
        recs = run_ensemble(cfg, QubitParams(Gamma=1.0), DriveParams(0.0), 200,
                            list(range(seed, seed + 2000)), ("pe",), "excited", False)
        pe, _ = ensemble_average(recs, "pe")
        t = cfg.dt * np.arange(1, 201)
        rate = -np.polyfit(t, np.log(pe), 1)[0]
        return abs(rate / 2 - 1) < 0.05, f"rate {rate:.4f} vs 2"

    def dense():
        cfg = LoopConfig(tau=1.0, n_bins=4, phi=0.5, max_total=1)
        q = QubitParams(Gamma=1.0, gamma_phi=0.2)
        d = DriveParams(0.1, Omega_L=0.3)
        pe_o, _ = dense_loop_oracle(cfg, q, d, 100)
        recs = run_ensemble(cfg, q, d, 100, list(range(seed, seed + 2000)), ("pe",))
        pe, se = ensemble_average(recs, "pe")
        z = np.abs(pe - pe_o) / np.maximum(se, 1e-12)
        return np.mean(z) < 1.2 and z.max() < 5, f"mean |z| {np.mean(z):.2f}, max {z.max():.2f}"

    def circle():
        m = MarkovianQubit(1.0, 0.7, 0.2)
        w = np.linspace(-5, 5, 101)
        f = circle_fit(markovian_reflection(w, m), w)
        err = max(abs(f.Gamma_tilde - 1.0), abs(f.gamma_d / 0.7 - 1), abs(f.omega0_tilde / 0.2 - 1))
        return err < 1e-6, f"max relative error {err:.2e}"

    def linear():
        cfg = LoopConfig(tau=0.5, n_bins=20, phi=-1.0)
        q = QubitParams(Gamma=1.0)
        errs = []
        for w in (-0.5, 0.3):
            r, _ = reflection_coefficient(cfg, q, DriveParams(w, Omega_L=1e-4), 2, seed)
            errs.append(abs(r - delayed_reflection(w, 0.0, 1.0, 0.5, -1.0)))
        return max(errs) < 0.02, f"max |r - oracle| {max(errs):.2e}"

    def mollow():
        cfg = LoopConfig(tau=0.005, n_bins=1)
        d = DriveParams(0.0, mode="nonlinear", Omega_NL=2.0)
        s = g1_correlation(cfg, QubitParams(Gamma=1.0), d, 8.0, 200, seed, n_anchors=5,
                           workers=workers, batch_size=200)
        w = np.arange(-12, 12.001, 0.25)
        spec = incoherent_spectrum(s, w)
        ref = mollow_spectrum_oracle(MarkovianQubit(2.0, 1.0), 0.0, 4.0, 0.0, w, s.lags)
        z = np.abs(spec.values - ref.values) / spec.stderr
        return z.max() < 4.5, f"max |z| {z.max():.2f}"

    for name, fn in (("markov-decay", decay), ("dense-oracle", dense), ("circle-fit", circle),
                     ("linear-reflection", linear), ("mollow", mollow)):
        check(name, fn)
    return out


def validate(cfg: ExperimentConfig, out: Path) -> list:
    results = validation_suite(cfg.master_seed, cfg.workers)
    path = write_csv(out / "validate.csv", ["check", "passed", "detail"],
                     [[n, "pass" if ok else "FAIL", d] for n, ok, d in results])
    meta = _metadata(cfg, files=[path.name],
                     all_passed=all(ok for _, ok, _ in results))
    # timings make the report non-reproducible; keep them out of the sidecar
    return [path, write_sidecar(out / "metadata.json", meta)], results


PIPELINES = {
    "reflection-map": reflection_map,
    "reflection-cut": reflection_cut,
    "tilt-scan": tilt_scan,
    "spectrum-single": spectrum_single,
    "spectrum-power-sweep": spectrum_power_sweep,
}


def run_experiment(cfg: ExperimentConfig):
    """Run the configured pipeline; returns the list of written files."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "validate":
        files, _ = validate(cfg, out)
        return files
    return PIPELINES[cfg.experiment](cfg, out)
