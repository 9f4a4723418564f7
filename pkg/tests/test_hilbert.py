import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atom_mirror.hilbert import (LOWER, QUBIT, RAISE, SizingError, StateVector,
                                 apply_ladder, build_basis, expectation)


def random_state(basis, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=basis.dimension) + 1j * rng.normal(size=basis.dimension)
    return StateVector(basis, a / np.linalg.norm(a))


def test_dimension_counts():
    # N bins, at most M photons, one per bin: 2 * sum_j C(N, j)
    assert build_basis(3, 2, 1).dimension == 2 * (1 + 3 + 3)
    assert build_basis(4, 1, 1).dimension == 2 * 5
    assert build_basis(2, 2, 2).dimension == 2 * 6


def test_index_round_trip():
    b = build_basis(5, 2, 1)
    for i in range(b.dimension):
        q, occ = b.occupation(i)
        assert b.state_index(q, occ) == i


def test_ordering_by_total_then_lexicographic():
    b = build_basis(3, 2, 1)
    occ = [tuple(r) for r in b.occupations]
    assert occ == sorted(occ, key=lambda t: (sum(t), t))


def test_sizing_error():
    with pytest.raises(SizingError):
        build_basis(200, 2, 1, max_dimension=1000)


def test_bad_sizes():
    with pytest.raises(ValueError):
        build_basis(0, 2)
    with pytest.raises(IndexError):
        apply_ladder(StateVector(build_basis(3)), 7, LOWER)
    with pytest.raises(ValueError):
        apply_ladder(StateVector(build_basis(3)), "photon", LOWER)


def test_lowering_vacuum_is_zero():
    b = build_basis(4, 2, 1)
    vac = StateVector(b)
    for k in range(4):
        assert apply_ladder(vac, k, LOWER).norm == 0
    assert apply_ladder(vac, QUBIT, LOWER).norm == 0


def test_cap_dropped():
    b = build_basis(3, 1, 1)
    one = StateVector.basis_state(b, 0, (1, 0, 0))
    assert apply_ladder(one, 1, RAISE).norm == 0


def test_expectation_strings():
    b = build_basis(3, 2, 1)
    s = StateVector.basis_state(b, 1, (0, 1, 0))
    assert expectation(s, "sp sm") == pytest.approx(1)
    assert expectation(s, "bd1 b1") == pytest.approx(1)
    assert expectation(s, "bd0 b0") == 0
    with pytest.raises(ValueError):
        expectation(s, "x2")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 2**32), st.integers(0, 3))
def test_ladder_adjointness(s1, s2, k):
    b = build_basis(4, 2, 1)
    phi, psi = random_state(b, s1), random_state(b, s2)
    for tgt in (QUBIT, k):
        lhs = phi.inner(apply_ladder(psi, tgt, LOWER))
        rhs = np.conj(psi.inner(apply_ladder(phi, tgt, RAISE)))
        assert abs(lhs - rhs) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 3))
def test_commutator_below_cap(seed, k):
    # [b, b^dag] = 1 on states that stay inside the truncation (cap 2, M 3, n_k <= 1)
    b = build_basis(4, 3, 2)
    psi = random_state(b, seed)
    keep = (b.occupations[:, k] <= 1) & (b.totals <= 2)
    psi = StateVector(b, psi.amplitudes * np.repeat(keep, 2))
    bbd = apply_ladder(apply_ladder(psi, k, RAISE), k, LOWER)
    bdb = apply_ladder(apply_ladder(psi, k, LOWER), k, RAISE)
    assert np.allclose(bbd.amplitudes - bdb.amplitudes, psi.amplitudes, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32), st.complex_numbers(max_magnitude=5, allow_nan=False),
       st.integers(0, 3))
def test_ladder_linearity(seed, c, k):
    b = build_basis(4, 2, 1)
    x, y = random_state(b, seed), random_state(b, seed + 1)
    lhs = apply_ladder(c * x + y, k, LOWER).amplitudes
    rhs = c * apply_ladder(x, k, LOWER).amplitudes + apply_ladder(y, k, LOWER).amplitudes
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_number_operator_counts_photons():
    b = build_basis(4, 2, 2)
    for i in range(b.dimension):
        q, occ = b.occupation(i)
        s = StateVector(b, np.eye(b.dimension)[i])
        for k in range(4):
            assert expectation(s, [(k, RAISE), (k, LOWER)]).real == pytest.approx(occ[k])
