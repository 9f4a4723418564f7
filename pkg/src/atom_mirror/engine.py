"""Conveyor-belt evolution of a qubit coupled to a delayed feedback loop.

The loop is a ring of ``N + 1`` bin slots.  At step ``n`` the fresh input
bin sits in slot ``n % (N+1)`` and the bin that entered ``N`` steps earlier
(the returning bin) in slot ``(n+1) % (N+1)``.  After the interaction the
returning bin leaves the loop as the output bin ``B0``: it is measured in the
photon-number basis, reset to vacuum and reused as the next fresh slot.

Everything is expressed in the frame rotating at the pump frequency.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from . import _kernels as K
from .drive import LINEAR, DriveParams, _wrap_signed, fresh_input_bin
from .hilbert import DEFAULT_MAX_DIMENSION, FockBasis, StateVector, build_basis

log = logging.getLogger(__name__)

OUTPUT = "output"
DEPHASING = "dephasing"
LOSS = "loss"

OBSERVABLES = ("pe", "b_exit", "n_exit")
_MASK64 = (1 << 64) - 1


class NumericalError(RuntimeError):
    """Non-finite amplitudes or broken probability bookkeeping."""


class SteadyStateError(RuntimeError):
    """No steady state detected; carries the last pair of window means."""

    def __init__(self, message, last_means=None):
        super().__init__(message)
        self.last_means = last_means


def splitmix64(master_seed: int, index: int) -> int:
    """Per-trajectory seed from (master seed, trajectory index)."""
    z = (int(master_seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class LoopConfig:
    """Feedback loop geometry and discretisation.

    ``phi`` is the round-trip phase at the bare qubit frequency; the pump
    phase follows as ``phi - delta * tau``.
    """

    tau: float
    n_bins: int
    phi: float = 0.0
    phi_M: float = np.pi
    reference_antinode_freq: Optional[float] = None
    max_total: int = 2
    per_bin_cap: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError("n_bins must be a positive integer")
        object.__setattr__(self, "n_bins", int(self.n_bins))
        object.__setattr__(self, "phi", _wrap_signed(float(self.phi)))

    @property
    def dt(self) -> float:
        return self.tau / self.n_bins

    @property
    def n_slots(self) -> int:
        return self.n_bins + 1

    @staticmethod
    def default_bins(tau: float, Gamma: float, Omega_eff: complex = 0.0,
                     min_bins: int = 20) -> int:
        """Smallest N with dt <= min(0.02/Gamma, 0.1/|Omega_eff|, tau/min_bins)."""
        limits = [tau / min_bins]
        if Gamma > 0:
            limits.append(0.02 / Gamma)
        if abs(Omega_eff) > 0:
            limits.append(0.1 / abs(Omega_eff))
        return int(np.ceil(tau / min(limits) - 1e-9))


@dataclass(frozen=True)
class QubitParams:
    omega0: float = 0.0
    Gamma: float = 1.0
    gamma_phi: float = 0.0
    gamma_L: float = 0.0

    def __post_init__(self):
        if min(self.Gamma, self.gamma_phi, self.gamma_L) < 0:
            raise ValueError("rates must be non-negative")


def config_hash(cfg: LoopConfig, q: QubitParams, d: DriveParams) -> str:
    payload = json.dumps({"loop": asdict(cfg), "qubit": asdict(q), "drive": asdict(d)},
                         sort_keys=True, default=float)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    """One trajectory: jump list, per-step observables and final summary.

    Jumps are ``(time, channel)`` tuples with channel ``"output"`` (with the
    detected photon number appended, e.g. ``("output", 1)``), ``"dephasing"``
    or ``"loss"``.  Within one step the order is output, dephasing, loss.
    """

    seed: int
    dt: float
    config_hash: str
    jumps: list = field(default_factory=list)
    observables: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        n = len(next(iter(self.observables.values()))) if self.observables else 0
        return self.dt * np.arange(1, n + 1)


def _local_configs(cap: int):
    return sorted(product(range(cap + 1), repeat=2), key=lambda t: (t[0] + t[1], t))


class LoopPropagator:
    """Precomputed step operators and index tables for one parameter set."""

    def __init__(self, cfg: LoopConfig, q: QubitParams, d: DriveParams,
                 max_dimension: int = DEFAULT_MAX_DIMENSION):
        d.check_loop(cfg.tau)
        self.cfg, self.q, self.d = cfg, q, d
        self.dt = cfg.dt
        self.basis: FockBasis = build_basis(cfg.n_slots, cfg.max_total, cfg.per_bin_cap,
                                            max_dimension=max_dimension)
        self.S = cfg.n_slots
        self.cap = cfg.per_bin_cap
        self.phi_p, self.delta, self.Omega_eff = d.derived(q.omega0, cfg.tau, cfg.phi)
        self.hash = config_hash(cfg, q, d)
        if d.mode == LINEAR and d.Omega_L > 0:
            self.fresh = fresh_input_bin(d.Omega_L, self.dt)
        else:
            self.fresh = np.array([1.0, 0.0])
        for rate, name in ((q.gamma_phi, "gamma_phi"), (q.gamma_L, "gamma_L")):
            if rate * self.dt > 0.1:
                warnings.warn(f"{name}*dt = {rate * self.dt:.3g} > 0.1; refine the bins")
        self.p_deph = 0.5 * (1.0 - np.exp(-q.gamma_phi * self.dt))
        self.loss_decay = float(np.exp(-q.gamma_L * self.dt))
        self._configs = _local_configs(self.cap)
        self._unitaries = {}
        self._phase_tables = {}
        self._totals = self.basis.totals

    # -- local operators -------------------------------------------------
    def local_hamiltonian(self, room: int) -> np.ndarray:
        """Qubit + (in, ret) bin Hamiltonian on the configurations that fit in ``room``."""
        configs = [c for c in self._configs if c[0] + c[1] <= room]
        pos = {c: i for i, c in enumerate(configs)}
        L = 2 * len(configs)
        H = np.zeros((L, L), dtype=complex)
        g = np.sqrt(self.q.Gamma / (2 * self.dt))
        eph = np.exp(1j * self.phi_p)
        W = self.Omega_eff
        for (a, b), i in pos.items():
            H[2 * i + 1, 2 * i + 1] += self.delta
            H[2 * i + 1, 2 * i] += W / 2
            H[2 * i, 2 * i + 1] += np.conj(W) / 2
            # i g sigma+ b_in : |g, a, b> -> |e, a-1, b>
            if a > 0:
                k = pos[(a - 1, b)]
                H[2 * k + 1, 2 * i] += 1j * g * np.sqrt(a)
            if b > 0:
                k = pos[(a, b - 1)]
                H[2 * k + 1, 2 * i] += 1j * g * eph * np.sqrt(b)
        # add the Hermitian conjugate of the coupling part
        coupling = H.copy()
        np.fill_diagonal(coupling, 0)
        for i in range(len(configs)):
            coupling[2 * i + 1, 2 * i] = 0
            coupling[2 * i, 2 * i + 1] = 0
        H = H + coupling.conj().T
        return H, configs

    def local_unitary(self, room: int) -> np.ndarray:
        room = min(room, 2 * self.cap)
        if room not in self._unitaries:
            H, configs = self.local_hamiltonian(room)
            U = expm(-1j * self.dt * H)
            # output bin picks up the round-trip phase as it leaves
            n_ret = np.repeat([c[1] for c in configs], 2)
            U = np.exp(1j * self.phi_p * n_ret)[:, None] * U
            self._unitaries[room] = (U, configs)
        return self._unitaries[room]

    # -- index tables ----------------------------------------------------
    def slots(self, clock: int):
        return clock % self.S, (clock + 1) % self.S

    def tables(self, clock: int) -> dict:
        p_in, p_ret = self.slots(clock)
        key = p_in
        t = self._phase_tables.get(key)
        if t is None:
            t = self._build_tables(p_in, p_ret)
            self._phase_tables[key] = t
        return t

    def _build_tables(self, p_in: int, p_ret: int) -> dict:
        basis = self.basis
        occ = basis.occupations
        base = basis.emptied([p_in, p_ret])
        room_of_base = self.cfg.max_total - self._totals
        room = np.minimum(room_of_base[base], 2 * self.cap)
        n_in = occ[:, p_in].astype(np.int64)
        n_ret = occ[:, p_ret].astype(np.int64)
        blocks = []
        for r in np.unique(room):
            U, configs = self.local_unitary(int(r))
            cpos = {c: i for i, c in enumerate(configs)}
            sel = np.nonzero(room == r)[0]
            ub, gidx = np.unique(base[sel], return_inverse=True)
            lc = np.array([cpos[(a, b)] for a, b in zip(n_in[sel], n_ret[sel])], dtype=np.int64)
            idx = np.full((len(ub), 2 * len(configs)), -1, dtype=np.int64)
            idx[gidx, 2 * lc] = 2 * sel
            idx[gidx, 2 * lc + 1] = 2 * sel + 1
            if (idx < 0).any():
                raise AssertionError("incomplete local block")
            blocks.append((idx, np.ascontiguousarray(U)))
        lower_ret = basis.shifted(p_ret, -1)
        vac_ret = basis.emptied([p_ret])
        up_ret = basis.shifted(p_ret, +1)  # the exit slot is the next fresh slot
        return {
            "blocks": blocks,
            "n_ret": occ[:, p_ret].astype(np.int64),
            "lower_ret": np.where(lower_ret < 0, 0, lower_ret),
            "vac_ret": vac_ret,
            "up_next": up_ret,
            "n_in": n_in,
        }

    # -- batched primitives ----------------------------------------------
    def discard_returning(self, psi: np.ndarray, rows: np.ndarray, clock: int,
                          u: np.ndarray) -> None:
        """Trace out the returning bin before it reaches the qubit (measure and reset)."""
        t = self.tables(clock)
        probs, _, _ = self.exit_stats(psi, rows, t)
        self.collapse(psi, rows, t, probs, u)

    def inject(self, psi: np.ndarray, rows: np.ndarray, clock: int) -> None:
        a, b = self.fresh
        if b == 0.0:
            return
        # the fresh slot of this step is the exit slot of the previous one
        prev = self.tables(clock - 1)
        K.inject(psi, rows, prev["n_ret"], prev["up_next"], a, b)

    def unitary(self, psi: np.ndarray, rows: np.ndarray, clock: int) -> dict:
        t = self.tables(clock)
        for idx, U in t["blocks"]:
            K.apply_blocks(psi, rows, idx, U)
        return t

    def exit_stats(self, psi, rows, t):
        return K.exit_stats(psi, rows, t["n_ret"], t["lower_ret"], self.cap)

    def collapse(self, psi, rows, t, probs, u):
        """Sample outcomes with uniforms ``u``; returns outcomes."""
        total = probs.sum(axis=1)
        if np.any(np.abs(total - 1.0) > 1e-8):
            bad = np.max(np.abs(total - 1.0))
            raise NumericalError(f"exit-bin probabilities sum to 1 +/- {bad:.3g}")
        cum = np.cumsum(probs, axis=1)
        outcomes = (u[:, None] * total[:, None] >= cum[:, :-1]).sum(axis=1)
        p = probs[np.arange(len(rows)), outcomes]
        scale = 1.0 / np.sqrt(p)
        buf = np.empty(psi.shape[1], dtype=np.complex128)
        K.collapse_reset(psi, rows, outcomes, scale, t["n_ret"], t["vac_ret"], buf)
        return outcomes

    def ancillary(self, psi, rows, u_deph, u_loss):
        flags = np.zeros(len(rows), dtype=np.int64)
        if self.p_deph > 0 or self.loss_decay < 1.0:
            K.ancillary(psi, rows, u_deph, u_loss, self.p_deph, self.loss_decay, flags)
        return flags


_PROPAGATORS: dict = {}


def get_propagator(cfg: LoopConfig, q: QubitParams, d: DriveParams) -> LoopPropagator:
    key = (cfg, q, d)
    prop = _PROPAGATORS.get(key)
    if prop is None:
        if len(_PROPAGATORS) > 16:
            _PROPAGATORS.clear()
        prop = _PROPAGATORS[key] = LoopPropagator(cfg, q, d)
    return prop


def _check_mode(d: DriveParams, mode: Optional[str]):
    if mode is not None and mode != d.mode:
        raise ValueError(f"drive mode mismatch: run is {mode!r}, step got {d.mode!r}")


# -- single-state operations ----------------------------------------------

def step(state: StateVector, cfg: LoopConfig, q: QubitParams, d: DriveParams,
         clock: int, mode: Optional[str] = None):
    """Inject the fresh bin and apply one interval of evolution.

    Returns the new state and the slot index of the exit bin (not yet measured).
    """
    _check_mode(d, mode)
    prop = get_propagator(cfg, q, d)
    if state.dimension != prop.basis.dimension:
        raise ValueError("state dimension does not match the loop basis")
    psi = state.amplitudes.copy()[None, :]
    rows = np.zeros(1, dtype=np.int64)
    if prop.fresh[1] != 0.0 and not _slot_empty(prop, psi[0], clock):
        raise ValueError(f"input slot {prop.slots(clock)[0]} is occupied at step {clock}")
    prop.inject(psi, rows, clock)
    prop.unitary(psi, rows, clock)
    if not np.all(np.isfinite(psi)):
        raise NumericalError(f"non-finite amplitudes at step {clock}; reduce dt")
    return StateVector(prop.basis, psi[0]), prop.slots(clock)[1]


def _slot_empty(prop, amps, clock):
    p_in, _ = prop.slots(clock)
    n = prop.basis.occupations[:, p_in]
    return not np.any(np.abs(amps.reshape(-1, 2)[n > 0]) > 0)


def measure_exit_bin(state: StateVector, exit_slot: int, rng: np.random.Generator):
    """Projective photon-number measurement of the exit bin, followed by reset."""
    basis = state.basis
    n_exit = basis.occupations[:, exit_slot].astype(np.int64)
    lower = basis.shifted(exit_slot, -1)
    vac = basis.emptied([exit_slot])
    psi = state.amplitudes.copy()[None, :]
    nrm = np.linalg.norm(psi[0])
    psi /= nrm
    rows = np.zeros(1, dtype=np.int64)
    probs, _, _ = K.exit_stats(psi, rows, n_exit, np.where(lower < 0, 0, lower),
                               basis.per_bin_cap)
    total = probs.sum()
    if abs(total - 1.0) > 1e-8:
        raise NumericalError(f"exit-bin probabilities sum to {total:.12f}")
    u = rng.random()
    cum = np.cumsum(probs[0])
    outcome = int(np.searchsorted(cum, u * total, side="right"))
    outcome = min(outcome, basis.per_bin_cap)
    scale = np.array([1.0 / np.sqrt(probs[0, outcome])])
    buf = np.empty(psi.shape[1], dtype=np.complex128)
    K.collapse_reset(psi, rows, np.array([outcome]), scale, n_exit, vac, buf)
    return StateVector(basis, psi[0]), outcome


def apply_ancillary_jumps(state: StateVector, dt: float, q: QubitParams,
                          rng: np.random.Generator) -> StateVector:
    """Dephasing and loss jumps over one interval ``dt``."""
    if q.gamma_phi * dt > 0.1 or q.gamma_L * dt > 0.1:
        warnings.warn("ancillary rate*dt exceeds 0.1")
    if q.gamma_phi == 0 and q.gamma_L == 0:
        return state
    psi = (state.amplitudes / state.norm).copy()[None, :]
    rows = np.zeros(1, dtype=np.int64)
    u = rng.random(2)
    flags = np.zeros(1, dtype=np.int64)
    K.ancillary(psi, rows, u[:1], u[1:], 0.5 * (1 - np.exp(-q.gamma_phi * dt)),
                float(np.exp(-q.gamma_L * dt)), flags)
    if not np.all(np.isfinite(psi)):
        raise NumericalError("non-finite amplitudes after ancillary jumps")
    return StateVector(state.basis, psi[0])


# -- batched ensembles ----------------------------------------------------

class UniformStreams:
    """Chunked per-trajectory uniforms; three per step (exit, dephasing, loss)."""

    def __init__(self, seeds: Sequence[int], chunk: int = 256):
        self.gens = [np.random.Generator(np.random.PCG64(s)) for s in seeds]
        self.chunk = chunk
        self._buf = None
        self._pos = chunk

    def next(self) -> np.ndarray:
        if self._pos >= self.chunk:
            self._buf = np.stack([g.random((self.chunk, 3)) for g in self.gens])
            self._pos = 0
        out = self._buf[:, self._pos, :]
        self._pos += 1
        return out


def initial_states(prop: LoopPropagator, n: int, initial=None) -> np.ndarray:
    """Rows of the starting state: ground + empty loop unless ``initial`` given.

    ``initial`` may be a StateVector, an amplitude array, or ``"excited"``.
    """
    psi = np.zeros((n, prop.basis.dimension), dtype=np.complex128)
    if initial is None or (isinstance(initial, str) and initial == "ground"):
        psi[:, 0] = 1.0
    elif isinstance(initial, str) and initial == "excited":
        psi[:, 1] = 1.0
    else:
        amps = initial.amplitudes if isinstance(initial, StateVector) else np.asarray(initial)
        if amps.shape != (prop.basis.dimension,):
            raise ValueError("initial state dimension does not match the loop basis")
        psi[:] = amps / np.linalg.norm(amps)
    if prop.fresh[1] != 0.0 and not _slot_empty(prop, psi[0], 0):
        raise ValueError("the step-0 input slot must start empty when the drive injects photons")
    return psi


def run_ensemble(cfg: LoopConfig, q: QubitParams, d: DriveParams, n_steps: int,
                 seeds: Sequence[int], observables: Iterable[str] = OBSERVABLES,
                 initial=None, record_jumps: bool = True,
                 open_loop_steps: int = 0) -> list:
    """Run independent trajectories side by side; one record per seed.

    Each row consumes only its own random stream, so records do not depend
    on how trajectories are batched.  For the first ``open_loop_steps`` steps
    the returning bin is discarded before it reaches the qubit (feedback cut).
    """
    observables = tuple(observables)
    for name in observables:
        if name not in OBSERVABLES:
            raise ValueError(f"unknown observable {name!r}; choose from {OBSERVABLES}")
    prop = get_propagator(cfg, q, d)
    n = len(seeds)
    psi = initial_states(prop, n, initial)
    rows = np.arange(n, dtype=np.int64)
    streams = UniformStreams(seeds)
    # the feedback cut draws from its own streams so closed-loop draws are unchanged
    cut_streams = UniformStreams([splitmix64(s, 1) for s in seeds]) if open_loop_steps else None
    rec = {name: np.zeros((n, n_steps), dtype=complex if name == "b_exit" else float)
           for name in observables}
    jumps = [[] for _ in range(n)]
    dt = prop.dt
    for clock in range(n_steps):
        u = streams.next()
        try:
            prop.inject(psi, rows, clock)
            if clock < open_loop_steps:
                prop.discard_returning(psi, rows, clock, cut_streams.next()[:, 0])
            t = prop.unitary(psi, rows, clock)
            probs, bexp, pe = prop.exit_stats(psi, rows, t)
            if "pe" in rec:
                rec["pe"][:, clock] = pe
            if "b_exit" in rec:
                rec["b_exit"][:, clock] = bexp
            if "n_exit" in rec:
                rec["n_exit"][:, clock] = probs @ np.arange(probs.shape[1])
            outcomes = prop.collapse(psi, rows, t, probs, u[:, 0])
            flags = prop.ancillary(psi, rows, u[:, 1], u[:, 2])
        except NumericalError as exc:
            raise NumericalError(f"step {clock}: {exc}") from exc
        if not np.isfinite(psi[:, 0]).all():
            raise NumericalError(f"step {clock}: non-finite amplitudes; reduce dt")
        if record_jumps:
            time = (clock + 1) * dt
            for i in np.nonzero(outcomes | flags)[0]:
                if outcomes[i]:
                    jumps[i].append((time, (OUTPUT, int(outcomes[i]))))
                if flags[i] & 1:
                    jumps[i].append((time, DEPHASING))
                if flags[i] & 2:
                    jumps[i].append((time, LOSS))
    norms = K.row_norms(psi, rows)
    pe_final = K.excited_population(psi, rows)
    records = []
    for i, seed in enumerate(seeds):
        records.append(TrajectoryRecord(
            seed=int(seed), dt=dt, config_hash=prop.hash, jumps=jumps[i],
            observables={k: v[i] for k, v in rec.items()},
            final={"norm": float(norms[i]), "pe": float(pe_final[i])}))
    return records


def run_trajectory(cfg: LoopConfig, q: QubitParams, d: DriveParams, duration: float,
                   observables: Iterable[str] = OBSERVABLES, seed: int = 0,
                   initial=None) -> TrajectoryRecord:
    """Single trajectory of length ``duration`` (a multiple of dt)."""
    n_steps = int(round(duration / cfg.dt))
    if n_steps < 1 or abs(n_steps * cfg.dt - duration) > 1e-9 * max(1.0, abs(duration)):
        raise ValueError(f"duration {duration} is not a multiple of dt = {cfg.dt}")
    return run_ensemble(cfg, q, d, n_steps, [seed], observables, initial)[0]


def detect_steady_state(series, window: int, tol: float) -> int:
    """First index ``i`` where the means over ``[i-window, i)`` and ``[i, i+window)``
    agree to relative tolerance ``tol`` for every monitored series.

    ``series`` is one array or a 2-D array / sequence of arrays (one per
    observable).  Raises :class:`SteadyStateError` if no such index exists.
    """
    arr = np.atleast_2d(np.asarray(series))
    if window < 1 or arr.shape[1] < 2 * window:
        raise ValueError("series must be at least two windows long")
    c = np.concatenate([np.zeros((arr.shape[0], 1), dtype=arr.dtype),
                        np.cumsum(arr, axis=1)], axis=1)
    idx = np.arange(window, arr.shape[1] - window + 1)
    m1 = (c[:, idx] - c[:, idx - window]) / window
    m2 = (c[:, idx + window] - c[:, idx]) / window
    scale = np.maximum(np.abs(m1), np.abs(m2))
    ok = np.all(np.abs(m2 - m1) <= tol * scale, axis=0)
    hits = np.nonzero(ok)[0]
    if len(hits) == 0:
        raise SteadyStateError(
            f"no steady state within {arr.shape[1]} samples (window {window}, tol {tol})",
            last_means=(m1[:, -1], m2[:, -1]))
    return int(idx[hits[0]])
