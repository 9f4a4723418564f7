"""Ensemble estimators built on the trajectory engine.

Field quantities are reported as fluxes: a bin operator ``b`` of one time
step carries ``<b^dag b>/dt`` photons per unit time, so correlations and
spectra below are divided by ``dt``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Optional, Sequence

import numpy as np

from .drive import LINEAR, DriveParams
from .engine import (LoopConfig, QubitParams, SteadyStateError, UniformStreams,
                     detect_steady_state, get_propagator, initial_states, run_ensemble)
from .parallel import schedule_trajectories

# weights of the four auxiliary states (1 + c B) psi, c in (1, -1, i, -i)
_AUX_C = np.array([1.0, -1.0, 1j, -1j])
_AUX_W = np.array([0.25, -0.25, -0.25j, 0.25j])


@dataclass
class CorrelationSeries:
    """Stationary ``C(t2) = <B0^dag(t2) B0(0)>`` on a uniform lag grid (flux units)."""

    lags: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    n_trajectories: int
    offset: float
    omega_p: float = 0.0
    offset_stderr: float = 0.0
    per_trajectory: Optional[np.ndarray] = field(default=None, repr=False)
    underflow: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lags = np.asarray(self.lags, dtype=float)
        if len(self.lags) < 2:
            raise ValueError("need at least two lags")
        steps = np.diff(self.lags)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("lag grid must be uniform")

    @property
    def dt(self) -> float:
        return float(self.lags[1] - self.lags[0])


@dataclass
class Spectrum:
    omega: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.values = np.asarray(self.values)
        if np.iscomplexobj(self.values):
            raise TypeError("spectrum values must be real")
        if np.any(np.diff(self.omega) <= 0):
            raise ValueError("frequency grid must be strictly increasing")

    def integral(self) -> float:
        """Riemann sum of S over the grid (assumes a uniform grid)."""
        return float(np.sum(self.values) * (self.omega[1] - self.omega[0]))


@dataclass
class ReflectionTrace:
    omega_p: np.ndarray
    r: np.ndarray
    se_re: np.ndarray
    se_im: np.ndarray
    drive_level: float
    metadata: dict = field(default_factory=dict)

    def passive(self, n_sigma: float = 5.0) -> bool:
        se = np.hypot(np.nan_to_num(self.se_re), np.nan_to_num(self.se_im))
        return bool(np.all(np.abs(self.r) <= 1 + n_sigma * se + 1e-12))


def ensemble_average(records, key: str):
    """Mean and standard error of one recorded observable over trajectories.

    With a single record the standard error is undefined and returned as NaN.
    """
    if not records:
        raise ValueError("no records")
    hashes = {r.config_hash for r in records}
    if len(hashes) > 1:
        raise ValueError(f"records come from different configurations: {sorted(hashes)}")
    try:
        data = np.array([r.observables[key] for r in records])
    except KeyError:
        raise KeyError(f"observable {key!r} was not recorded") from None
    except ValueError:
        raise ValueError("records have different time grids") from None
    mean = data.mean(axis=0)
    n = len(records)
    if n == 1:
        warnings.warn("standard error undefined for a single trajectory")
        return mean, np.full(mean.shape, np.nan)
    return mean, data.std(axis=0, ddof=1) / np.sqrt(n)


# -- timescales -------------------------------------------------------------

def emission_rate(cfg: LoopConfig, q: QubitParams) -> float:
    """Markovian estimate of the dressed decay rate, floored for node configurations."""
    return max(q.Gamma * (1 + np.cos(cfg.phi)), 0.1 * q.Gamma) + q.gamma_L


def _default_settle(cfg: LoopConfig, q: QubitParams) -> float:
    rate = 0.5 * emission_rate(cfg, q) + q.gamma_phi
    return (12.0 / rate if rate > 0 else 0.0) + 2 * cfg.tau


def _linear_settle(cfg: LoopConfig, q: QubitParams) -> float:
    # the delayed response can relax much more slowly than its Markovian estimate
    from .analytic import slowest_dipole_rate

    rate = slowest_dipole_rate(q.Gamma, cfg.tau, cfg.phi, q.gamma_phi, q.gamma_L)
    rate = max(rate, 0.05 * q.Gamma + q.gamma_phi + 0.5 * q.gamma_L)
    return (12.0 / rate if rate > 0 else 0.0) + 2 * cfg.tau


def _steps(t: float, dt: float) -> int:
    return max(1, int(np.ceil(t / dt - 1e-9)))


# -- reflection -------------------------------------------------------------

def _reflection_task(cfg, q, d, n_steps, seeds):
    recs = run_ensemble(cfg, q, d, n_steps, seeds, observables=("b_exit",), record_jumps=False)
    return [r.observables["b_exit"] for r in recs]


def reflection_coefficient(cfg: LoopConfig, q: QubitParams, d: DriveParams, n_traj: int = 8,
                           seed: int = 0, settle: Optional[float] = None,
                           average: Optional[float] = None, tol: float = 2e-3,
                           workers: int = 1):
    """Steady-state reflection ``r`` and its standard error (complex, per component).

    ``r`` is the output bin amplitude with the pump round-trip phase removed,
    divided by the coherent amplitude of one input bin, so a decoupled
    emitter gives ``r = 1``.
    """
    if d.mode != LINEAR:
        raise ValueError("reflection needs the linear drive mode")
    if d.Omega_L <= 0:
        raise ValueError("Omega_L must be positive to measure reflection")
    prop = get_propagator(cfg, q, d)
    dt = cfg.dt
    n_settle = _steps(settle if settle is not None else _linear_settle(cfg, q), dt)
    n_avg = _steps(average if average is not None else max(4 * cfg.tau, 2.0 / q.Gamma if q.Gamma > 0 else 0.0), dt)
    n_avg = max(n_avg, 8)
    n_steps = n_settle + n_avg
    series = np.array(schedule_trajectories(
        partial(_reflection_task, cfg, q, d, n_steps), n_traj, seed, workers))
    mean = series.mean(axis=0)
    window = max(1, n_avg // 2)
    start = detect_steady_state(np.abs(mean), window, tol)
    start = max(start, n_settle)
    if n_steps - start < window:
        raise SteadyStateError(f"steady state reached only at step {start} of {n_steps}",
                               last_means=(mean[-2 * window:-window].mean(), mean[-window:].mean()))
    b_in = np.sqrt((1 - d.Omega_L * dt) * d.Omega_L * dt)
    norm = np.exp(-1j * prop.phi_p) / b_in
    per_traj = series[:, start:].mean(axis=1) * norm
    r = per_traj.mean()
    if n_traj > 1:
        se = complex(per_traj.real.std(ddof=1), per_traj.imag.std(ddof=1)) / np.sqrt(n_traj)
    else:
        se = complex(np.nan, np.nan)
    return complex(r), se


def reflection_trace(cfg: LoopConfig, q: QubitParams, d: DriveParams,
                     omega_p_grid: Sequence[float], n_traj: int = 8, seed: int = 0,
                     **kwargs) -> ReflectionTrace:
    """Reflection at each pump frequency of ``omega_p_grid`` (``d.omega_p`` is ignored)."""
    grid = np.asarray(omega_p_grid, dtype=float)
    rs, ses = [], []
    for w in grid:
        r, se = reflection_coefficient(cfg, q, replace(d, omega_p=float(w)), n_traj, seed,
                                       **kwargs)
        rs.append(r)
        ses.append(se)
    ses = np.array(ses)
    meta = {"phi": cfg.phi, "tau": cfg.tau, "n_bins": cfg.n_bins, "Gamma": q.Gamma,
            "gamma_phi": q.gamma_phi, "gamma_L": q.gamma_L, "omega0": q.omega0,
            "n_trajectories": n_traj, "seed": seed}
    return ReflectionTrace(grid, np.array(rs), ses.real, ses.imag, d.Omega_L, meta)


# -- first-order correlation ------------------------------------------------

def _correlation_task(cfg, q, d, n_settle, n_anchors, stride, n_lag, seeds):
    prop = get_propagator(cfg, q, d)
    n = len(seeds)
    K = -(-(n_lag + 1) // stride)
    per = 1 + 4 * K
    psi = initial_states(prop, n * per)
    main = np.arange(n) * per
    aux_rows = main[:, None, None] + 1 + 4 * np.arange(K)[None, :, None] + np.arange(4)
    parent = np.repeat(np.arange(n), per)
    streams = UniformStreams(seeds)
    n_total = n_settle + (n_anchors - 1) * stride + n_lag + 1

    acc = np.zeros((n, n_lag + 1), dtype=complex)
    coef = np.zeros((n, K, 4), dtype=complex)
    born = np.full(K, -1)
    pe_series = np.zeros((n, n_total))
    b_sum = np.zeros(n, dtype=complex)
    n_sum = np.zeros(n)
    b_norm_max = np.zeros(n)
    n_avg = 0
    anchors_done = 0

    for clock in range(n_total):
        u = streams.next()[parent]
        live = [k for k in range(K) if born[k] >= 0]
        rows = np.concatenate([main] + [aux_rows[:, k].ravel() for k in live]).astype(np.int64)
        prop.inject(psi, rows, clock)
        t = prop.unitary(psi, rows, clock)

        if (anchors_done < n_anchors and clock >= n_settle
                and (clock - n_settle) % stride == 0):
            k = anchors_done % K
            if born[k] >= 0:
                raise AssertionError("auxiliary slot still in use")
            mu, bnorm = _spawn_aux(psi, main, aux_rows[:, k], t)
            coef[:, k] = _AUX_W * mu
            b_norm_max = np.maximum(b_norm_max, bnorm)
            born[k] = clock
            live.append(k)
            anchors_done += 1
            rows = np.concatenate([main] + [aux_rows[:, j].ravel() for j in live]).astype(np.int64)

        probs, bexp, pe = prop.exit_stats(psi, rows, t)
        pe_series[:, clock] = pe[:n]
        if clock >= n_settle:
            b_sum += bexp[:n]
            n_sum += probs[:n] @ np.arange(probs.shape[1])
            n_avg += 1
        for pos, k in enumerate(live):
            lag = clock - born[k]
            seg = np.conj(bexp[n + 4 * n * pos: n + 4 * n * (pos + 1)]).reshape(n, 4)
            acc[:, lag] += (coef[:, k] * seg).sum(axis=1)
            if lag == n_lag:
                born[k] = -1
        prop.collapse(psi, rows, t, probs, u[rows, 0])
        prop.ancillary(psi, rows, u[rows, 1], u[rows, 2])

    out = []
    for i in range(n):
        out.append({"C": acc[i] / n_anchors, "b_mean": b_sum[i] / n_avg,
                    "n_mean": n_sum[i] / n_avg, "pe": pe_series[i],
                    "b_norm_max": b_norm_max[i]})
    return out


def _spawn_aux(psi, main, targets, t):
    """Write normalised (1 + c B0) psi into the four auxiliary rows of each trajectory."""
    occ = np.nonzero(t["n_ret"] > 0)[0]
    low = t["lower_ret"][occ]
    amp = np.sqrt(t["n_ret"][occ])
    src = psi[main]
    bpsi = np.zeros_like(src)
    bpsi[:, 2 * low] = amp * src[:, 2 * occ]
    bpsi[:, 2 * low + 1] = amp * src[:, 2 * occ + 1]
    mu = np.empty((len(main), 4))
    for c_idx, c in enumerate(_AUX_C):
        chi = src + c * bpsi
        nrm2 = np.einsum("ij,ij->i", chi.conj(), chi).real
        mu[:, c_idx] = nrm2
        psi[targets[:, c_idx]] = chi / np.sqrt(np.maximum(nrm2, 1e-300))[:, None]
    bnorm = np.einsum("ij,ij->i", bpsi.conj(), bpsi).real
    return mu, bnorm


def g1_correlation(cfg: LoopConfig, q: QubitParams, d: DriveParams,
                   lag_span: Optional[float] = None, n_traj: int = 100, seed: int = 0,
                   n_anchors: int = 10, settle: Optional[float] = None,
                   stride: Optional[float] = None, tol: float = 0.05,
                   workers: int = 1, batch_size: int = 32) -> CorrelationSeries:
    """Stationary first-order correlation of the output field.

    Each trajectory is anchored ``n_anchors`` times after the settling
    period, ``stride`` apart.  At an anchor four auxiliary copies
    ``(1 + c B0) psi`` are split off and evolved with the parent's random
    numbers; their single-time ``<B0^dag>`` values recombine into ``C``.
    """
    dt = cfg.dt
    rate = emission_rate(cfg, q)
    if rate == 0:
        rate = 1.0 / cfg.tau  # decoupled emitter: only the loop sets a timescale
    if lag_span is None:
        lag_span = 10.0 / rate + 2 * cfg.tau
    if lag_span <= 0:
        raise ValueError("lag span must be positive")
    # rounded up to whole steps
    n_lag = max(1, int(np.ceil(lag_span / dt - 1e-9)))
    n_settle = _steps(settle if settle is not None else _default_settle(cfg, q), dt)
    n_stride = _steps(stride if stride is not None else 1.0 / rate, dt)
    task = partial(_correlation_task, cfg, q, d, n_settle, n_anchors, n_stride, n_lag)
    res = schedule_trajectories(task, n_traj, seed, workers, batch_size)

    pe = np.mean([r["pe"] for r in res], axis=0)
    window = max(1, n_settle // 4)
    if pe[: n_settle + window].max() > 1e-12:
        try:
            start = detect_steady_state(pe[: n_settle + window], window, tol)
        except SteadyStateError as exc:
            raise SteadyStateError(f"correlation anchors start in the transient: {exc}",
                                   exc.last_means) from exc
        if start > n_settle:
            raise SteadyStateError(f"steady state detected at step {start} > {n_settle}")

    C = np.array([r["C"] for r in res]) / dt
    b = np.array([r["b_mean"] for r in res])
    b_mean = b.mean()
    offset = abs(b_mean) ** 2 / dt
    lags = dt * np.arange(n_lag + 1)
    prop = get_propagator(cfg, q, d)
    meta = {"phi": cfg.phi, "phi_p": prop.phi_p, "Omega_eff": abs(prop.Omega_eff),
            "delta": prop.delta, "Gamma": q.Gamma, "gamma_phi": q.gamma_phi,
            "gamma_L": q.gamma_L, "tau": cfg.tau, "n_bins": cfg.n_bins,
            "n_trajectories": n_traj, "n_anchors": n_anchors, "seed": seed,
            "config_hash": prop.hash, "flux": float(np.mean([r["n_mean"] for r in res]) / dt)}
    if np.max([r["b_norm_max"] for r in res]) < 1e-24 and abs(b_mean) < 1e-12:
        z = np.zeros(n_lag + 1, dtype=complex)
        return CorrelationSeries(lags, z, np.zeros(n_lag + 1), n_traj, 0.0, d.omega_p,
                                 0.0, np.zeros_like(C), True, meta)
    if n_traj > 1:
        se = np.hypot(C.real.std(axis=0, ddof=1), C.imag.std(axis=0, ddof=1)) / np.sqrt(n_traj)
        # delta-method error of |<b>|^2
        grad = 2 * np.array([b_mean.real, b_mean.imag])
        cov = np.cov(np.stack([b.real, b.imag])) / n_traj
        off_se = float(np.sqrt(grad @ cov @ grad)) / dt
    else:
        se = np.full(n_lag + 1, np.nan)
        off_se = float("nan")
    return CorrelationSeries(lags, C.mean(axis=0), se, n_traj, offset, d.omega_p, off_se,
                             C, False, meta)


# -- spectrum ---------------------------------------------------------------

def _half_transform(nu, lags, dt, D):
    """sum_l dt w_l exp(-i nu t_l) D_l with trapezoid end weights; D may be 2-D (lags last)."""
    w = np.ones(len(lags))
    w[0] = w[-1] = 0.5
    out = []
    for chunk in np.array_split(nu, max(1, len(nu) // 256)):
        ph = np.exp(-1j * np.outer(chunk, lags)) * (dt * w)
        out.append(ph @ np.atleast_2d(D).T)
    return np.concatenate(out, axis=0)


def incoherent_spectrum(series: CorrelationSeries, omega: Sequence[float],
                        tail_floor: float = 0.05) -> Spectrum:
    """One-sided transform of ``C - offset`` onto the angular-frequency grid ``omega``.

    Emission at lab frequency ``omega_p + nu`` oscillates as ``exp(-i nu t)``
    in the pump frame, so that exponent is undone here.
    """
    omega = np.asarray(omega, dtype=float)
    D = series.values - series.offset
    head = abs(D[0])
    if head > 0 and abs(D[-1]) > tail_floor * head:
        warnings.warn(f"correlation has not decayed: |C - offset| at the last lag is "
                      f"{abs(D[-1]) / head:.3g} of its initial value; extend the lag span")
    nu = omega - series.omega_p
    dt = series.dt
    values = _half_transform(nu, series.lags, dt, D)[:, 0].real
    if series.per_trajectory is not None and series.n_trajectories > 1:
        per = _half_transform(nu, series.lags, dt, series.per_trajectory - series.offset).real
        stderr = per.std(axis=1, ddof=1) / np.sqrt(series.n_trajectories)
    else:
        w = np.ones(len(D))
        w[0] = w[-1] = 0.5
        stderr = np.full(len(omega), dt * np.sqrt(np.sum((w * series.stderr) ** 2)))
    meta = dict(series.metadata)
    meta["imag_residue"] = _two_sided_residue(nu, series.lags, dt, D)
    meta["incoherent_flux"] = float((D[0]).real)
    return Spectrum(omega, values, stderr, meta)


def _two_sided_residue(nu, lags, dt, D):
    """Largest |Im| / largest |Re| of the transform over the Hermitian extension."""
    t = np.concatenate([-lags[:0:-1], lags])
    full = np.concatenate([np.conj(D[:0:-1]), D])
    w = np.ones(len(t))
    w[0] = w[-1] = 0.5
    val = np.concatenate([(np.exp(-1j * np.outer(chunk, t)) * (dt * w)) @ full
                          for chunk in np.array_split(nu, max(1, len(nu) // 256))])
    scale = np.max(np.abs(val.real))
    return float(np.max(np.abs(val.imag)) / scale) if scale > 0 else 0.0
