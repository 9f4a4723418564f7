import warnings
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atom_mirror.analytic import delayed_reflection
from atom_mirror.drive import LINEAR, NONLINEAR, DriveParams
from atom_mirror.engine import LoopConfig, QubitParams, TrajectoryRecord
from atom_mirror.observables import (CorrelationSeries, ReflectionTrace, Spectrum,
                                     ensemble_average, g1_correlation, incoherent_spectrum,
                                     reflection_coefficient, reflection_trace)
from atom_mirror.observables import _reflection_task
from atom_mirror.parallel import WorkerFailure, schedule_trajectories


def rec(values, h="abc"):
    return TrajectoryRecord(0, 0.1, h, observables={"pe": np.asarray(values, float)})


def test_ensemble_average():
    mean, se = ensemble_average([rec([1, 2]), rec([3, 2])], "pe")
    assert np.allclose(mean, [2, 2])
    assert np.allclose(se, [np.sqrt(2) / np.sqrt(2), 0])
    with pytest.raises(ValueError):
        ensemble_average([rec([1]), rec([1], "other")], "pe")
    with pytest.raises(KeyError):
        ensemble_average([rec([1])], "b_exit")
    with pytest.warns(UserWarning):
        _, se1 = ensemble_average([rec([1, 2])], "pe")
    assert np.all(np.isnan(se1))


def exp_series(gamma, flux, omega_p=0.0, dt=0.01, span=40.0, offset=0.0):
    lags = dt * np.arange(int(span / dt) + 1)
    return CorrelationSeries(lags, flux * np.exp(-gamma * lags) + offset, np.zeros(len(lags)),
                             0, offset, omega_p)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.3, 3), st.floats(0.1, 5), st.floats(-3, 3))
def test_exponential_gives_lorentzian(g, flux, wp):
    w = np.linspace(wp - 10, wp + 10, 81)
    s = incoherent_spectrum(exp_series(g, flux, wp, offset=0.7), w)
    ref = flux * g / (g ** 2 + (w - wp) ** 2)
    assert np.allclose(s.values, ref, rtol=1e-3, atol=1e-4 * flux)


def test_sum_rule_and_reality():
    w = np.arange(-60, 60.0001, 0.05)
    ser = exp_series(1.0, 2.0)
    s = incoherent_spectrum(ser, w)
    assert s.integral() == pytest.approx(np.pi * 2.0, rel=0.02)
    assert s.metadata["imag_residue"] < 1e-6
    assert s.metadata["incoherent_flux"] == pytest.approx(2.0)


def test_emission_frequency_sign():
    # a field at omega_p + nu0 evolves as exp(-i nu0 t), so <B^dag(t) B(0)> as exp(+i nu0 t)
    ser = exp_series(0.5, 1.0, omega_p=2.0)
    ser.values = ser.values * np.exp(1j * 1.5 * ser.lags)
    w = np.linspace(-2, 6, 161)
    s = incoherent_spectrum(ser, w)
    assert w[np.argmax(s.values)] == pytest.approx(3.5, abs=0.05)


def test_undecayed_correlation_warns():
    with pytest.warns(UserWarning, match="not decayed"):
        incoherent_spectrum(exp_series(0.01, 1.0, span=5.0), np.linspace(-1, 1, 5))


def test_containers_validate():
    with pytest.raises(ValueError):
        CorrelationSeries(np.array([0, 0.1, 0.3]), np.zeros(3), np.zeros(3), 1, 0.0)
    with pytest.raises(TypeError):
        Spectrum(np.arange(3.0), np.zeros(3, complex), np.zeros(3))
    with pytest.raises(ValueError):
        Spectrum(np.array([0.0, 2.0, 1.0]), np.zeros(3), np.zeros(3))
    tr = ReflectionTrace(np.arange(3.0), np.array([1.0, 1.2, 0.5]), np.full(3, 0.01),
                         np.full(3, 0.01), 1e-3)
    assert not tr.passive()


def test_weak_drive_reflection_matches_linear_response():
    cfg = LoopConfig(tau=0.3, n_bins=15, phi=0.8)
    q = QubitParams(Gamma=1.0)
    grid = [-1.0, 0.4]
    tr = reflection_trace(cfg, q, DriveParams(0.0, LINEAR, Omega_L=1e-4), grid, n_traj=2)
    ref = delayed_reflection(np.array(grid), 0.0, 1.0, 0.3, 0.8)
    assert np.max(np.abs(tr.r - ref)) < 5e-3
    assert tr.passive()


def test_reflection_with_dephasing_and_loss():
    # jumps randomise single trajectories; the ensemble follows the master equation
    cfg = LoopConfig(tau=0.1, n_bins=5, phi=0.5)
    q = QubitParams(Gamma=1.0, gamma_phi=0.3, gamma_L=0.2)
    r, se = reflection_coefficient(cfg, q, DriveParams(0.2, LINEAR, Omega_L=1e-4), n_traj=300,
                                   average=10.0)
    ref = delayed_reflection(0.2, 0.0, 1.0, 0.1, 0.5, 0.3, 0.2)
    assert abs(r.real - ref.real) < 4 * se.real + 2e-3
    assert abs(r.imag - ref.imag) < 4 * se.imag + 2e-3


def test_reflection_needs_linear_drive():
    cfg = LoopConfig(tau=0.3, n_bins=15)
    with pytest.raises(ValueError):
        reflection_coefficient(cfg, QubitParams(), DriveParams(0.0, NONLINEAR, Omega_NL=1.0))
    with pytest.raises(ValueError):
        reflection_coefficient(cfg, QubitParams(), DriveParams(0.0, LINEAR))


def test_undriven_correlation_underflows():
    cfg = LoopConfig(tau=0.05, n_bins=2)
    s = g1_correlation(cfg, QubitParams(), DriveParams(0.0, NONLINEAR), lag_span=1.0,
                       n_traj=2, n_anchors=2)
    assert s.underflow
    assert np.all(s.values == 0)


def test_correlation_stationary_and_hermitian_at_zero():
    cfg = LoopConfig(tau=0.02, n_bins=1)
    s = g1_correlation(cfg, QubitParams(), DriveParams(0.0, NONLINEAR, Omega_NL=1.0),
                       lag_span=4.0, n_traj=40, n_anchors=4)
    assert abs(s.values[0].imag) < 1e-12
    # C(0) is the output flux, at most the Markovian maximum rate 2 Gamma
    assert 0 < s.values[0].real <= 2.0
    assert s.values[0].real == pytest.approx(s.metadata["flux"], rel=0.1)
    assert s.offset <= s.values[0].real


def test_worker_count_does_not_change_results():
    cfg = LoopConfig(tau=0.5, n_bins=10, phi=0.3)
    task = partial(_reflection_task, cfg, QubitParams(gamma_phi=0.2),
                   DriveParams(0.1, LINEAR, Omega_L=0.5), 30)
    one = schedule_trajectories(task, 10, 42, workers=1, batch_size=64)
    many = schedule_trajectories(task, 10, 42, workers=8, batch_size=3)
    assert all(np.array_equal(a, b) for a, b in zip(one, many))
    # prefix of a larger ensemble equals the smaller ensemble
    more = schedule_trajectories(task, 14, 42, workers=1, batch_size=5)
    assert all(np.array_equal(a, b) for a, b in zip(one, more[:10]))


def _flaky(state, seeds):
    state["calls"] += 1
    if state["calls"] == 1:
        raise RuntimeError("transient")
    return list(seeds)


def _broken(seeds):
    raise RuntimeError("always")


def test_scheduler_retry_and_failure():
    state = {"calls": 0}
    out = schedule_trajectories(partial(_flaky, state), 3, 1)
    assert len(out) == 3 and state["calls"] == 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(WorkerFailure) as exc:
            schedule_trajectories(_broken, 4, 1, batch_size=2)
    assert exc.value.indices == [0, 1]
    with pytest.raises(ValueError):
        schedule_trajectories(_broken, 0, 1)
