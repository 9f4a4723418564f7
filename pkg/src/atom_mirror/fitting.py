"""Circle-fit extraction of linewidths, resonance and tilt from complex reflection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares


class NoResonanceError(ValueError):
    """Trace does not trace out a resolvable circle."""


class CircleFitWarning(UserWarning):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass
class CircleFitResult:
    Gamma_tilde: float
    gamma_d: float
    omega0_tilde: float
    center: complex
    radius: float
    tilt: float
    rms_residual: float
    anchor: complex = 1.0
    theta0: float = 0.0
    stderr: dict = field(default_factory=dict)

    @property
    def resonance_point(self) -> complex:
        return self.center + self.radius * np.exp(1j * self.theta0)


@dataclass
class TiltCheck:
    predicted: float
    measured: float
    difference: float
    uncertainty: float = float("nan")

    def __iter__(self):
        return iter((self.predicted, self.measured, self.difference))

    @property
    def consistent(self) -> bool:
        return abs(self.difference) <= self.uncertainty


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _arc_weights(z):
    # spacing along the locus: densely sampled stretches get less weight each
    gaps = np.abs(np.diff(z))
    w = np.empty(len(z))
    w[1:-1] = 0.5 * (gaps[:-1] + gaps[1:])
    w[0], w[-1] = gaps[0], gaps[-1]
    w = np.maximum(w, 1e-12 * max(w.max(), 1e-300))
    return w / w.mean()


def _algebraic_circle(z, w):
    """Weighted Kasa fit: minimise sum w (|z|^2 + a x + b y + c)^2."""
    A = np.c_[z.real, z.imag, np.ones(len(z))] * np.sqrt(w)[:, None]
    rhs = -np.abs(z) ** 2 * np.sqrt(w)
    (a, b, c), *_ = np.linalg.lstsq(A, rhs, rcond=None)
    center = complex(-a / 2, -b / 2)
    r2 = abs(center) ** 2 - c
    return center, np.sqrt(max(r2, 0.0))


def _geometric_circle(z, w, center, radius):
    sw = np.sqrt(w)

    def res(p):
        return sw * (np.abs(z - complex(p[0], p[1])) - p[2])

    sol = least_squares(res, [center.real, center.imag, radius], xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, method="lm")
    return sol


def _covariance(sol, n):
    J = sol.jac
    dof = max(n - J.shape[1], 1)
    s2 = 2 * sol.cost / dof
    try:
        return np.linalg.inv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        return np.full((J.shape[1], J.shape[1]), np.nan)


def circle_fit(trace, omega=None, normalize: bool = True, weighted: bool = True,
               residual_threshold: float = 0.05, min_radius: float = 1e-6) -> CircleFitResult:
    """Fit a reflection trace.

    ``trace`` is a :class:`~atom_mirror.observables.ReflectionTrace` or a
    complex array (then ``omega`` gives the pump frequencies).

    1. least-squares circle (algebraic start, geometric refinement);
    2. phase around the centre fitted as ``theta0 + 2 arctan((w - w0t)/gamma_d)``,
       which gives the resonance and ``Gamma_tilde = 2 R gamma_d``;
    3. tilt: direction from the resonance point to the fitted off-resonant
       point (the circle point reached as the detuning diverges).  A Markovian
       trace anchored at r = 1 gives 0; a global rotation adds to it.

    With ``normalize`` the trace is rescaled so the fitted off-resonant point
    has unit magnitude, which makes the result independent of overall gain.
    """
    if omega is None:
        omega, z = np.asarray(trace.omega_p, dtype=float), np.asarray(trace.r, dtype=complex)
    else:
        omega, z = np.asarray(omega, dtype=float), np.asarray(trace, dtype=complex)
    if len(z) < 8:
        raise ValueError("circle fit needs at least 8 points")
    order = np.argsort(omega)
    omega, z = omega[order], z[order]

    n_out = max(1, int(round(0.05 * len(z))))
    edges = np.concatenate([z[:n_out], z[-n_out:]]).mean()
    if abs(edges) == 0:
        raise NoResonanceError("off-resonant points average to zero")

    spread = np.max(np.abs(z - z.mean()))
    if spread < min_radius:
        raise NoResonanceError(f"trace spread {spread:.3g} below {min_radius:g}")
    w = _arc_weights(z) if weighted else np.ones(len(z))
    c0, r0 = _algebraic_circle(z, w)
    geo = _geometric_circle(z, w, c0, r0)
    center = complex(geo.x[0], geo.x[1])
    radius = abs(geo.x[2])
    dist = np.abs(z - center) - radius
    rms = float(np.sqrt(np.mean(dist ** 2)))
    if radius < min_radius:
        raise NoResonanceError(f"circle radius {radius:.3g} below {min_radius:g}")
    if rms > residual_threshold * radius:
        warnings.warn(CircleFitWarning(
            f"trace is not circular: rms residual {rms:.3g} vs radius {radius:.3g}", rms))
    cov_c = _covariance(geo, len(z))

    theta = np.unwrap(np.angle(z - center))
    # resonance guess: the point farthest from the scan edges
    i0 = int(np.argmax(np.abs(z - edges)))
    slope = np.gradient(theta, omega)[i0]
    g0 = 2.0 / slope if slope != 0 else (omega[-1] - omega[0]) / 10
    p0 = [theta[i0], omega[i0], g0]

    def phase_res(p):
        return theta - (p[0] + 2 * np.arctan((omega - p[1]) / p[2]))

    ph = least_squares(phase_res, p0, xtol=1e-15, ftol=1e-15, gtol=1e-15, method="lm")
    theta0, w0t, gd_signed = ph.x
    cov_p = _covariance(ph, len(z))
    gamma_d = abs(gd_signed)
    # point reached far off resonance, diametrically opposite the resonance
    anchor = center - radius * np.exp(1j * theta0)
    if normalize:
        scale = abs(anchor)
        if scale == 0:
            raise NoResonanceError("fitted off-resonant point is zero")
        center, radius, anchor, rms = center / scale, radius / scale, anchor / scale, rms / scale
        cov_c = cov_c / scale ** 2
    Gamma_tilde = 2 * radius * gamma_d

    r_res = center + radius * np.exp(1j * theta0)
    # direction from the resonance point to the off-resonant point: theta0 + pi
    tilt = float(np.angle(anchor - r_res))

    # first-order propagation of fit errors
    se = {"omega0_tilde": float(np.sqrt(cov_p[1, 1])), "gamma_d": float(np.sqrt(cov_p[2, 2])),
          "theta0": float(np.sqrt(cov_p[0, 0])), "radius": float(np.sqrt(cov_c[2, 2])),
          "center_re": float(np.sqrt(cov_c[0, 0])), "center_im": float(np.sqrt(cov_c[1, 1]))}
    se["Gamma_tilde"] = float(Gamma_tilde * np.hypot(se["radius"] / radius,
                                                     se["gamma_d"] / gamma_d))
    se["tilt"] = se["theta0"]
    return CircleFitResult(float(Gamma_tilde), float(gamma_d), float(w0t), center,
                           float(radius), tilt, rms, complex(anchor), float(theta0), se)


def tilt_consistency(fit: CircleFitResult, omega0_bare: float, tau: float) -> TiltCheck:
    """Predicted tilt ``(omega0_tilde - omega0) tau`` against the measured one."""
    predicted = (fit.omega0_tilde - omega0_bare) * tau
    measured = fit.tilt
    unc = np.hypot(tau * fit.stderr.get("omega0_tilde", np.nan), fit.stderr.get("tilt", np.nan))
    return TiltCheck(float(predicted), float(measured), float(_wrap(measured - predicted)),
                     float(unc))
