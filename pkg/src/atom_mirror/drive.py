"""Waveguide input field: weak coherent input bins and the effective pump."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

LINEAR = "linear"
NONLINEAR = "nonlinear"


def _wrap_pi(angle: float) -> float:
    """Reduce to (-pi, pi]."""
    a = float(np.mod(angle, 2 * np.pi))
    if a > np.pi:
        a -= 2 * np.pi
    return a


def fresh_input_bin(Omega_L: float, dt: float) -> np.ndarray:
    """Amplitudes of a fresh input bin on (|0>, |1>) carrying flux ``Omega_L``."""
    p = Omega_L * dt
    if Omega_L < 0 or dt <= 0:
        raise ValueError("Omega_L must be >= 0 and dt > 0")
    if p >= 1:
        raise ValueError(f"Omega_L*dt = {p:.3g} must be < 1")
    return np.array([np.sqrt(1.0 - p), np.sqrt(p)])


def pump_phase(omega_p: float, tau: float, phi_M: float = np.pi) -> float:
    """Round-trip phase seen by the pump, reduced to (-pi, pi]."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    # reduce omega_p*tau modulo 2pi before adding so the period is exact
    return _wrap_pi(phi_M + float(np.mod(omega_p * tau, 2 * np.pi)))


def effective_rabi(Omega_NL: float, phi_p: float) -> complex:
    """Standing-wave Rabi rate ``Omega_NL (1 + e^{i phi_p})``."""
    if Omega_NL < 0:
        raise ValueError("Omega_NL must be >= 0")
    return Omega_NL * (1.0 + np.exp(1j * phi_p))


def _wrap_signed(angle: float) -> float:
    # (-2pi, 2pi] keeping the sign of the input
    if -2 * np.pi < angle <= 2 * np.pi:
        return float(angle)
    r = float(np.fmod(angle, 2 * np.pi))
    if r <= -2 * np.pi:
        r += 2 * np.pi
    return r


@dataclass(frozen=True)
class PhaseCalibration:
    """Measured (omega0 -> phi) table used instead of the linear formula."""

    omega0: Sequence[float]
    phi: Sequence[float]

    def __post_init__(self):
        w = np.asarray(self.omega0, dtype=float)
        if w.ndim != 1 or len(w) < 2 or np.any(np.diff(w) <= 0):
            raise ValueError("calibration frequencies must be strictly increasing, >= 2 points")
        if len(self.phi) != len(w):
            raise ValueError("calibration table columns differ in length")

    def __call__(self, omega0: float) -> float:
        return float(np.interp(omega0, self.omega0, self.phi))


def round_trip_phase(omega0: float, tau: float, reference_antinode_freq: float,
                     calibration: Optional[PhaseCalibration] = None) -> float:
    """Round-trip phase at the qubit frequency relative to a reference antinode.

    Reduced to (-2pi, 2pi] without folding -pi onto pi.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if calibration is not None:
        return calibration(omega0)
    return _wrap_signed((omega0 - reference_antinode_freq) * tau)


def dbm_to_rabi(power_dbm, kappa: float):
    """Pump power to Omega_NL with a single amplitude calibration ``kappa``."""
    return kappa * 10.0 ** (np.asarray(power_dbm, dtype=float) / 20.0)


@dataclass(frozen=True)
class DriveParams:
    """Drive settings.  Derived quantities need the loop delay and qubit frequency.

    ``Omega_L`` is the input photon flux per unit time of the weak coherent
    field (linear mode); ``Omega_NL`` the pump Rabi rate (nonlinear mode).
    """

    omega_p: float
    mode: str = LINEAR
    Omega_L: float = 0.0
    Omega_NL: float = 0.0

    def __post_init__(self):
        if self.mode not in (LINEAR, NONLINEAR):
            raise ValueError(f"mode must be {LINEAR!r} or {NONLINEAR!r}")
        if self.Omega_L < 0 or self.Omega_NL < 0:
            raise ValueError("Rabi rates must be non-negative")
        if self.mode == LINEAR and self.Omega_NL != 0:
            raise ValueError("linear mode uses Omega_L only")
        if self.mode == NONLINEAR and self.Omega_L != 0:
            raise ValueError("nonlinear mode uses Omega_NL only")

    def derived(self, omega0: float, tau: float, phi: float):
        """(phi_p, delta, Omega_eff) given the qubit frequency and its round-trip phase.

        Uses phi_p = phi - delta*tau, which follows from both phases sharing
        the mirror phase.
        """
        delta = omega0 - self.omega_p
        phi_p = _wrap_pi(phi - delta * tau)
        if self.mode == LINEAR:
            return phi_p, delta, 0j
        return phi_p, delta, effective_rabi(self.Omega_NL, phi_p)

    def check_loop(self, tau: float) -> None:
        if self.mode == LINEAR and self.Omega_L * tau >= 2:
            raise ValueError(
                f"Omega_L*tau = {self.Omega_L * tau:.3g} exceeds the two-photon loop truncation")
