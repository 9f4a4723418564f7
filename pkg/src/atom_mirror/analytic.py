"""Closed-form and small dense-matrix references."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm, null_space
from scipy.special import lambertw

from .drive import LINEAR, DriveParams
from .engine import LoopConfig, QubitParams
from .hilbert import LOWER, QUBIT, RAISE, StateVector, apply_ladder, build_basis

_SM = np.array([[0, 1], [0, 0]], dtype=complex)  # |g><e| on (g, e)
_SZ = np.diag([-1.0, 1.0]).astype(complex)
_I2 = np.eye(2, dtype=complex)


@dataclass(frozen=True)
class MarkovianQubit:
    Gamma_tilde: float
    gamma_d: float
    omega0_tilde: float = 0.0

    def __post_init__(self):
        if self.Gamma_tilde < 0:
            raise ValueError("Gamma_tilde must be >= 0")
        if self.gamma_d < 0.5 * self.Gamma_tilde * (1 - 1e-12):
            raise ValueError("gamma_d must be at least Gamma_tilde/2")


@dataclass(frozen=True)
class TransmonParams:
    """Josephson and charging energies in angular-frequency units."""

    E_J0: float
    E_C: float

    def __post_init__(self):
        if not self.E_J0 > self.E_C > 0:
            raise ValueError("transmon regime needs E_J0 > E_C > 0")


def markovian_rates(Gamma: float, phi: float) -> float:
    if Gamma < 0:
        raise ValueError("Gamma must be >= 0")
    return Gamma * (1.0 + np.cos(phi))


def markovian_reflection(omega_p, m: MarkovianQubit):
    """Lorentzian reflection ``1 - i Gt / (Delta + i gamma_d)``, ``Delta = omega_p - w0t``."""
    if m.gamma_d <= 0:
        raise ValueError("gamma_d must be positive")
    delta = np.asarray(omega_p, dtype=float) - m.omega0_tilde
    return 1.0 - 1j * m.Gamma_tilde / (delta + 1j * m.gamma_d)


def delayed_reflection(omega_p, omega0: float, Gamma: float, tau: float, phi: float,
                       gamma_phi: float = 0.0, gamma_L: float = 0.0):
    """Weak-drive reflection of the delayed-feedback model at any delay.

    In the weak-drive limit the dipole follows the drive, so the field that
    left one round trip earlier differs only by the round-trip phase at the
    pump frequency.  The resulting linear response has a single pole term.
    """
    w = np.asarray(omega_p, dtype=float)
    php = phi + (w - omega0) * tau
    den = gamma_phi + 0.5 * gamma_L + 0.5 * Gamma * (1 + np.exp(1j * php)) + 1j * (omega0 - w)
    return 1.0 - Gamma * (1 + np.cos(php)) / den


def slowest_dipole_rate(Gamma: float, tau: float, phi: float, gamma_phi: float = 0.0,
                        gamma_L: float = 0.0, branches: int = 4) -> float:
    """Decay rate of the slowest pole of the weak-drive dipole equation.

    ``ds/dt = -a s - b s(t - tau)`` with ``a = gamma_phi + gamma_L/2 + Gamma/2`` and
    ``b = Gamma/2 e^{i phi}`` (rotating frame of the bare qubit).  Poles are
    ``-a + W_k(-b tau e^{a tau}) / tau`` on the Lambert-W branches.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = gamma_phi + 0.5 * gamma_L + 0.5 * Gamma
    b = 0.5 * Gamma * np.exp(1j * phi)
    if Gamma == 0:
        return float(a)
    arg = -b * tau * np.exp(a * tau)
    poles = [-a + lambertw(arg, k) / tau for k in range(-branches, branches + 1)]
    return float(-max(p.real for p in poles))


def node_frequencies(phi_p: float, omega_p: float, tau: float, ks: Sequence[int]) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    k = np.asarray(ks, dtype=float)
    return omega_p + ((2 * k - 1) * np.pi - phi_p) / tau


def antinode_frequencies(phi_p: float, omega_p: float, tau: float,
                         ks: Sequence[int]) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    k = np.asarray(ks, dtype=float)
    return omega_p + (2 * np.pi * k - phi_p) / tau


def transmon_frequency(Phi_ext, t: TransmonParams, Phi0: float = 1.0):
    """Flux-tuned transition frequency ``sqrt(8 E_J E_C) - E_C``."""
    EJ = t.E_J0 * np.abs(np.cos(np.pi * np.asarray(Phi_ext, dtype=float) / Phi0))
    root = np.sqrt(8 * EJ * t.E_C)
    if np.any(root <= t.E_C):
        raise ValueError("flux too close to half a quantum: transmon formula invalid")
    return root - t.E_C


def phase_at_frequency(omega_prime, omega0: float, tau: float, phi: float):
    if tau <= 0:
        raise ValueError("tau must be positive")
    return (np.asarray(omega_prime, dtype=float) - omega0) * tau + phi


# -- two-level master equation ---------------------------------------------

def _dissipator(L):
    # column-stacked vec: vec(A X B) = (B^T kron A) vec(X)
    LdL = L.conj().T @ L
    return (np.kron(L.conj(), L) - 0.5 * np.kron(_I2, LdL) - 0.5 * np.kron(LdL.T, _I2))


def two_level_liouvillian(Gamma1: float, gamma_phi: float, Omega: complex = 0.0,
                          delta: float = 0.0) -> np.ndarray:
    """4x4 generator for H = delta s+s- + (Omega s+ + h.c.)/2 with decay and dephasing.

    ``Gamma1`` is the population decay rate; ``gamma_phi`` the extra
    coherence decay rate (jump operator sqrt(gamma_phi/2) sigma_z).
    """
    sp = _SM.conj().T
    H = delta * sp @ _SM + 0.5 * (Omega * sp + np.conj(Omega) * _SM)
    L = -1j * (np.kron(_I2, H) - np.kron(H.T, _I2))
    L = L + Gamma1 * _dissipator(_SM) + 0.5 * gamma_phi * _dissipator(_SZ)
    return L


def steady_state(L: np.ndarray) -> np.ndarray:
    ns = null_space(L)
    if ns.shape[1] != 1:
        raise np.linalg.LinAlgError("steady state not unique")
    rho = ns[:, 0].reshape(2, 2, order="F")
    return rho / np.trace(rho)


def evolve_two_level(L: np.ndarray, rho0: np.ndarray, times: Sequence[float]) -> np.ndarray:
    """Density matrices at ``times`` (array of shape (len(times), 2, 2))."""
    v0 = np.asarray(rho0, dtype=complex).reshape(-1, order="F")
    return np.array([(expm(L * t) @ v0).reshape(2, 2, order="F") for t in times])


def mollow_spectrum_oracle(m: MarkovianQubit, gamma_phi: float, Omega: complex, delta: float,
                           omega: Sequence[float], lags: Optional[Sequence[float]] = None):
    """Incoherent resonance-fluorescence spectrum of a Markovian two-level emitter.

    ``delta = omega0_tilde - omega_p``.  The stationary dipole correlation
    follows from quantum regression on the 4x4 generator; it is scaled to the
    emitted flux (factor Gamma_tilde) and transformed exactly like a
    trajectory correlation.  ``lags`` defaults to a grid that resolves the
    Rabi period and covers twenty decay times.
    """
    from .observables import CorrelationSeries, incoherent_spectrum

    if min(m.Gamma_tilde, gamma_phi, m.gamma_d) < 0:
        raise ValueError("rates must be >= 0")
    Gamma1 = 2.0 * (m.gamma_d - gamma_phi)
    if Gamma1 < -1e-12:
        raise ValueError("gamma_d must exceed gamma_phi")
    Gamma1 = max(Gamma1, 0.0)
    if Gamma1 == 0 and gamma_phi == 0 and Omega == 0:
        raise np.linalg.LinAlgError("Bloch generator is singular without decay or drive")
    L = two_level_liouvillian(Gamma1, gamma_phi, Omega, delta)
    if lags is None:
        slow = max(min(Gamma1 / 2 + 1e-300, m.gamma_d), 1e-12)
        dt = 0.02 / max(abs(Omega), Gamma1, m.gamma_d, abs(delta), 1e-12)
        lags = dt * np.arange(int(np.ceil(20 / slow / dt)) + 1)
    lags = np.asarray(lags, dtype=float)
    dt = lags[1] - lags[0]
    omega_p = m.omega0_tilde - delta
    if Omega == 0:
        C = np.zeros(len(lags), dtype=complex)
        offset = 0.0
    else:
        rho = steady_state(L)
        sp = _SM.conj().T
        sm_mean = np.trace(_SM @ rho)
        # C(t) = Tr[s+ e^{Lt}(s- rho)]
        x = (_SM @ rho).reshape(-1, order="F")
        step = expm(L * dt)
        C = np.empty(len(lags), dtype=complex)
        for i in range(len(lags)):
            C[i] = np.trace(sp @ x.reshape(2, 2, order="F"))
            x = step @ x
        C *= m.Gamma_tilde
        offset = m.Gamma_tilde * abs(sm_mean) ** 2
    series = CorrelationSeries(lags, C, np.zeros(len(lags)), 0, float(offset), omega_p)
    spec = incoherent_spectrum(series, omega, tail_floor=np.inf)
    spec.metadata.update({"Gamma_tilde": m.Gamma_tilde, "gamma_d": m.gamma_d,
                          "gamma_phi": gamma_phi, "Omega": abs(Omega), "delta": delta})
    spec.stderr = np.zeros(len(spec.omega))
    return spec


# -- dense propagation of the discretised loop --------------------------------

def _ladder_matrix(basis, target, direction):
    D = basis.dimension
    M = np.zeros((D, D), dtype=complex)
    for i in range(D):
        e = np.zeros(D, dtype=complex)
        e[i] = 1.0
        M[:, i] = apply_ladder(StateVector(basis, e), target, direction).amplitudes
    return M


def dense_loop_oracle(cfg: LoopConfig, q: QubitParams, d: DriveParams, n_steps: int,
                      initial: Optional[np.ndarray] = None):
    """Deterministic density-matrix propagation of the same discretised loop model.

    Builds full operator matrices on the whole register and exponentiates the
    step Hamiltonian directly.  Returns per-step arrays ``pe`` and ``b_exit``
    (expectations after the interaction, before the exit bin is read out).
    Only practical for a handful of bins.
    """
    basis = build_basis(cfg.n_slots, cfg.max_total, cfg.per_bin_cap)
    D = basis.dimension
    if D > 400:
        raise ValueError(f"dense oracle limited to small registers (dimension {D})")
    S = cfg.n_slots
    dt = cfg.dt
    phi_p, delta, W = d.derived(q.omega0, cfg.tau, cfg.phi)
    sm = _ladder_matrix(basis, QUBIT, LOWER)
    sp = sm.conj().T
    b = [_ladder_matrix(basis, k, LOWER) for k in range(S)]
    nop = [bk.conj().T @ bk for bk in b]
    g = np.sqrt(q.Gamma / (2 * dt))
    Us, Vs, Ks = [], [], []
    for p_in in range(S):
        p_ret = (p_in + 1) % S
        A = sp @ (b[p_in] + np.exp(1j * phi_p) * b[p_ret])
        H = delta * sp @ sm + 0.5 * (W * sp + np.conj(W) * sm) + 1j * g * (A - A.conj().T)
        U = expm(-1j * dt * H)
        U = np.diag(np.exp(1j * phi_p * np.diag(nop[p_ret]).real)) @ U
        Us.append(U)
        # injection isometry on the empty fresh slot
        V = np.eye(D, dtype=complex)
        if d.mode == LINEAR and d.Omega_L > 0:
            a_amp, b_amp = np.sqrt(1 - d.Omega_L * dt), np.sqrt(d.Omega_L * dt)
            raise_in = b[p_in].conj().T
            for col in range(D):
                occ = basis.occupations[col // 2]
                if occ[p_in] != 0:
                    continue
                up = raise_in[:, col]
                if np.any(up):
                    V[:, col] = a_amp * np.eye(D)[:, col] + b_amp * up
        Vs.append(V)
        # readout and reset of the exit slot: |vac><n| on that slot
        Kn = []
        for n in range(cfg.per_bin_cap + 1):
            K = np.zeros((D, D), dtype=complex)
            for col in range(D):
                occ = basis.occupations[col // 2]
                if occ[p_ret] == n:
                    new = list(occ)
                    new[p_ret] = 0
                    K[basis.state_index(col % 2, new), col] = 1.0
            Kn.append(K)
        Ks.append(Kn)
    # ancillary channels
    p_deph = 0.5 * (1 - np.exp(-q.gamma_phi * dt))
    Zq = sp @ sm - sm @ sp
    decay = np.exp(-q.gamma_L * dt)
    K0 = np.eye(D) - (1 - np.sqrt(decay)) * sp @ sm
    K1 = np.sqrt(1 - decay) * sm

    if initial is None:
        rho = np.zeros((D, D), dtype=complex)
        rho[0, 0] = 1.0
    else:
        psi = np.asarray(initial, dtype=complex)
        rho = np.outer(psi, psi.conj()) / np.vdot(psi, psi).real
    pe = np.zeros(n_steps)
    bx = np.zeros(n_steps, dtype=complex)
    for clock in range(n_steps):
        p_in = clock % S
        p_ret = (clock + 1) % S
        V = Vs[p_in]
        rho = V @ rho @ V.conj().T
        rho = Us[p_in] @ rho @ Us[p_in].conj().T
        pe[clock] = np.trace(sp @ sm @ rho).real
        bx[clock] = np.trace(b[p_ret] @ rho)
        rho = sum(K @ rho @ K.conj().T for K in Ks[p_in])
        if q.gamma_phi > 0:
            rho = (1 - p_deph) * rho + p_deph * Zq @ rho @ Zq
        if q.gamma_L > 0:
            rho = K0 @ rho @ K0.conj().T + K1 @ rho @ K1.conj().T
    return pe, bx
