import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atom_mirror.analytic import (MarkovianQubit, TransmonParams, antinode_frequencies,
                                  delayed_reflection, evolve_two_level, markovian_rates,
                                  markovian_reflection, mollow_spectrum_oracle,
                                  node_frequencies, phase_at_frequency, slowest_dipole_rate,
                                  steady_state,
                                  transmon_frequency, two_level_liouvillian)

rates = st.floats(0.01, 5)


def test_markov_rates():
    assert markovian_rates(1.0, 0.0) == pytest.approx(2.0)
    assert markovian_rates(1.0, np.pi) == pytest.approx(0.0)


def test_lorentzian_resonance_and_far_field():
    m = MarkovianQubit(1.0, 0.5)
    assert markovian_reflection(0.0, m) == pytest.approx(-1.0)
    assert markovian_reflection(1e6, m) == pytest.approx(1.0, abs=1e-5)
    with pytest.raises(ValueError):
        MarkovianQubit(1.0, 0.2)


@settings(max_examples=50, deadline=None)
@given(rates, st.floats(0, 3), st.floats(-5, 5), st.floats(-20, 20))
def test_lorentzian_on_circle(G, extra, w0, w):
    m = MarkovianQubit(G, G / 2 + extra, w0)
    rad = G / (2 * m.gamma_d)
    assert abs(abs(markovian_reflection(w, m) - (1 - rad)) - rad) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(-np.pi, np.pi), rates, st.floats(0, 2), st.floats(0, 2), st.floats(-6, 6))
def test_zero_delay_is_markovian(phi, G, gp, gl, w):
    r = delayed_reflection(w, 0.3, G, 1e-12, phi, gp, gl)
    Gt = markovian_rates(G, phi)
    gd = gp + gl / 2 + Gt / 2
    if Gt < 1e-9:
        assert abs(r - 1) < 1e-8
        return
    m = MarkovianQubit(Gt, gd, 0.3 + 0.5 * G * np.sin(phi))
    assert abs(r - markovian_reflection(w, m)) < 1e-8


@settings(max_examples=100, deadline=None)
@given(st.floats(-np.pi, np.pi), rates, st.floats(0.01, 3), st.floats(0, 1), st.floats(0, 1),
       st.floats(-10, 10))
def test_delayed_reflection_passive(phi, G, tau, gp, gl, w):
    assert abs(delayed_reflection(w, 0.0, G, tau, phi, gp, gl)) <= 1 + 1e-12


def test_node_transparency_exact():
    w = np.linspace(-5, 5, 41)
    # at phi = pi the delayed response is transparent only at the qubit frequency
    assert abs(delayed_reflection(0.0, 0.0, 1.0, 0.5, np.pi) - 1) < 1e-12
    assert np.allclose(delayed_reflection(w, 0.0, 1.0, 1e-9, np.pi), 1)


@given(st.floats(-np.pi, np.pi), st.floats(-5, 5), st.floats(0.1, 3))
def test_nodes_and_antinodes_interleave(phi_p, wp, tau):
    ks = np.arange(-3, 4)
    nodes = node_frequencies(phi_p, wp, tau, ks)
    anti = antinode_frequencies(phi_p, wp, tau, ks)
    assert np.allclose(np.diff(nodes), 2 * np.pi / tau)
    assert np.allclose(anti - nodes, np.pi / tau)
    # nodes: round-trip phase pi (mod 2pi); antinodes: 0
    ph_n = phi_p + (nodes - wp) * tau
    ph_a = phi_p + (anti - wp) * tau
    assert np.allclose(np.cos(ph_n), -1)
    assert np.allclose(np.cos(ph_a), 1)


def test_node_symmetry_at_zero_phase():
    n = node_frequencies(0.0, 2.0, 1.5, [-1, 0, 1, 2])
    assert np.allclose(np.sort(n - 2.0), -np.sort(n - 2.0)[::-1])


def test_transmon():
    t = TransmonParams(E_J0=20.0, E_C=0.2)
    assert transmon_frequency(0.0, t) == pytest.approx(np.sqrt(8 * 20 * 0.2) - 0.2)
    assert transmon_frequency(0.1, t) == pytest.approx(transmon_frequency(-0.1, t))
    assert transmon_frequency(0.3, t) < transmon_frequency(0.1, t)
    with pytest.raises(ValueError):
        transmon_frequency(0.5, t)
    with pytest.raises(ValueError):
        TransmonParams(0.1, 0.2)


def test_phase_at_frequency():
    assert phase_at_frequency(2.0, 1.0, 0.5, 0.1) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        phase_at_frequency(2.0, 1.0, 0.0, 0.1)


@settings(max_examples=30, deadline=None)
@given(rates, st.floats(0, 2), st.floats(0, 5), st.floats(-3, 3))
def test_liouvillian_trace_preserving(G1, gp, Om, d):
    L = two_level_liouvillian(G1, gp, Om, d)
    vec_id = np.eye(2).reshape(-1, order="F")
    assert np.allclose(vec_id @ L, 0, atol=1e-12)


def test_steady_state_resonant():
    G1, Om = 1.3, 2.1
    rho = steady_state(two_level_liouvillian(G1, 0.0, Om))
    assert rho[1, 1].real == pytest.approx(Om ** 2 / (G1 ** 2 + 2 * Om ** 2))


def test_free_decay_and_dephasing():
    L = two_level_liouvillian(0.8, 0.5)
    rho0 = 0.5 * np.ones((2, 2))
    t = np.array([0.0, 1.0, 2.0])
    out = evolve_two_level(L, rho0, t)
    assert np.allclose(out[:, 1, 1].real, 0.5 * np.exp(-0.8 * t))
    assert np.allclose(np.abs(out[:, 0, 1]), 0.5 * np.exp(-(0.4 + 0.5) * t))


def test_mollow_oracle_triplet():
    m = MarkovianQubit(1.0, 0.5)
    w = np.arange(-15, 15.0001, 0.05)
    s = mollow_spectrum_oracle(m, 0.0, 8.0, 0.0, w)
    v = s.values
    centre = v[np.argmin(np.abs(w))]
    side = v[np.argmin(np.abs(w - 8.0))]
    # strong-drive limit: heights 1:3:1, side peaks at +-Omega
    assert centre / side == pytest.approx(3.0, rel=0.05)
    peaks = [w[i] for i in range(1, len(w) - 1) if v[i] > v[i - 1] and v[i] > v[i + 1]]
    assert min(abs(p - 8.0) for p in peaks) <= 0.1
    assert np.allclose(v, v[::-1], atol=1e-10)
    flux = s.metadata["incoherent_flux"]
    assert s.integral() == pytest.approx(np.pi * flux, rel=0.01)


def test_mollow_oracle_weak_drive_is_small():
    m = MarkovianQubit(1.0, 0.5)
    w = np.linspace(-5, 5, 101)
    weak = mollow_spectrum_oracle(m, 0.0, 0.05, 0.0, w).values.max()
    strong = mollow_spectrum_oracle(m, 0.0, 1.0, 0.0, w).values.max()
    assert weak < 1e-3 * strong


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), rates, st.floats(0, 1), st.floats(0, 1))
def test_slowest_pole_markov_limit(phi, G, gp, gl):
    rate = slowest_dipole_rate(G, 1e-6, phi, gp, gl)
    assert rate == pytest.approx(gp + gl / 2 + markovian_rates(G, phi) / 2, abs=1e-4)


def test_slowest_pole_is_a_pole_and_slowest():
    G, tau, phi = 1.0, 1.097, -0.632 * np.pi
    rate = slowest_dipole_rate(G, tau, phi, 0.0, 0.075)
    # delayed response diverges where s + a + b e^{-s tau} = 0; probe the time-domain decay
    a, b = 0.5375, 0.5 * np.exp(1j * phi)
    dt = 1e-3
    hist = int(tau / dt)
    s = np.ones(hist + 200_000, dtype=complex)
    for n in range(hist, len(s) - 1):
        s[n + 1] = s[n] - dt * (a * s[n] + b * s[n - hist])
    tail = np.abs(s[-100_000:])
    fitted = -np.polyfit(dt * np.arange(len(tail)), np.log(tail), 1)[0]
    assert fitted == pytest.approx(rate, rel=0.02)
    assert rate < 0.5 * markovian_rates(G, phi)
