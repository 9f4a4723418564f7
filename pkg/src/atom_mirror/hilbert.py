"""Excitation-truncated Hilbert space for a qubit plus a register of time bins.

Basis states are ``(qubit_level, occupations)`` with ``occupations`` a tuple of
photon numbers, one per bin.  The state with occupation ordinal ``j`` and
qubit level ``q`` lives at index ``2 * j + q``; occupations are ordered by
total photon number, then lexicographically.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from typing import Iterator, Sequence, Union

import numpy as np

QUBIT = "qubit"
LOWER = "lower"
RAISE = "raise"

DEFAULT_MAX_DIMENSION = 4_000_000

Target = Union[str, int]


class SizingError(ValueError):
    """Requested basis would exceed the configured memory budget."""


def _compositions(n_bins: int, total: int, cap: int) -> Iterator[tuple]:
    # lexicographic order of tuples with entries <= cap summing to total
    if n_bins == 0:
        if total == 0:
            yield ()
        return
    for first in range(min(cap, total) + 1):
        rest_max = cap * (n_bins - 1)
        if total - first > rest_max:
            continue
        for tail in _compositions(n_bins - 1, total - first, cap):
            yield (first,) + tail


def _count_occupations(n_bins: int, max_total: int, cap: int) -> int:
    if cap == 1:
        return sum(comb(n_bins, j) for j in range(max_total + 1))
    # bounded compositions via a small dynamic program
    ways = np.zeros(max_total + 1, dtype=object)
    ways[0] = 1
    for _ in range(n_bins):
        new = np.zeros_like(ways)
        for t in range(max_total + 1):
            for n in range(min(cap, t) + 1):
                new[t] += ways[t - n]
        ways = new
    return int(sum(ways))


def _row_keys(occ: np.ndarray) -> np.ndarray:
    occ = np.ascontiguousarray(occ, dtype=np.int8)
    return occ.view(np.dtype((np.void, occ.shape[1]))).ravel()


@dataclass(frozen=True, eq=False)
class FockBasis:
    """Ordered basis of qubit level times bin occupations with a photon cap."""

    n_bins: int
    max_total: int
    per_bin_cap: int
    occupations: np.ndarray = field(repr=False)

    @property
    def n_occupations(self) -> int:
        return self.occupations.shape[0]

    @property
    def dimension(self) -> int:
        return 2 * self.n_occupations

    @cached_property
    def index_map(self) -> dict:
        return {tuple(int(x) for x in row): j for j, row in enumerate(self.occupations)}

    @cached_property
    def totals(self) -> np.ndarray:
        return self.occupations.sum(axis=1).astype(np.int64)

    @cached_property
    def _sorted_keys(self):
        keys = _row_keys(self.occupations)
        order = np.argsort(keys, kind="stable")
        return keys[order], order

    @property
    def states(self) -> list:
        return [(q, tuple(int(x) for x in row)) for row in self.occupations for q in (0, 1)]

    def occupation_index(self, occupation: Sequence[int]) -> int:
        try:
            return self.index_map[tuple(int(x) for x in occupation)]
        except KeyError:
            raise KeyError(f"occupation {tuple(occupation)} not in basis") from None

    def state_index(self, qubit: int, occupation: Sequence[int]) -> int:
        if qubit not in (0, 1):
            raise ValueError(f"qubit level must be 0 or 1, got {qubit}")
        return 2 * self.occupation_index(occupation) + qubit

    def occupation(self, index: int) -> tuple:
        """Inverse of :meth:`state_index`: ``(qubit, occupations)``."""
        if not 0 <= index < self.dimension:
            raise IndexError(index)
        return index % 2, tuple(int(x) for x in self.occupations[index // 2])

    def lookup(self, occ: np.ndarray) -> np.ndarray:
        """Vectorised occupation -> ordinal lookup; rows not in the basis give -1."""
        occ = np.asarray(occ)
        out = np.full(occ.shape[0], -1, dtype=np.int64)
        valid = (occ.min(axis=1) >= 0) & (occ.max(axis=1) <= self.per_bin_cap)
        valid &= occ.sum(axis=1) <= self.max_total
        if not valid.any():
            return out
        keys, order = self._sorted_keys
        probe = _row_keys(occ[valid])
        pos = np.searchsorted(keys, probe)
        pos = np.minimum(pos, len(keys) - 1)
        hit = keys[pos] == probe
        found = np.where(hit, order[pos], -1)
        out[valid] = found
        return out

    def shifted(self, bin_index: int, delta: int) -> np.ndarray:
        """Ordinal of each occupation with bin ``bin_index`` changed by ``delta`` (-1 if outside)."""
        self._check_bin(bin_index)
        occ = self.occupations.astype(np.int16)
        occ[:, bin_index] += delta
        return self.lookup(occ)

    def emptied(self, bins: Sequence[int]) -> np.ndarray:
        """Ordinal of each occupation with the listed bins set to zero."""
        occ = self.occupations.copy()
        occ[:, list(bins)] = 0
        return self.lookup(occ)

    def rotation(self, shift: int = 1) -> np.ndarray:
        """Ordinal map for relabelling bin ``k`` as bin ``(k + shift) % n_bins``."""
        occ = np.roll(self.occupations, shift, axis=1)
        return self.lookup(occ)

    def _check_bin(self, k: int) -> None:
        if not isinstance(k, (int, np.integer)) or not 0 <= k < self.n_bins:
            raise IndexError(f"bin index {k} out of range for {self.n_bins} bins")


def build_basis(n_bins: int, max_total: int = 2, per_bin_cap: int = 1,
                max_dimension: int = DEFAULT_MAX_DIMENSION) -> FockBasis:
    """Enumerate the truncated basis.

    Raises ``ValueError`` for non-positive counts and :class:`SizingError` when
    the dimension would exceed ``max_dimension``.
    """
    for name, value in (("n_bins", n_bins), ("max_total", max_total),
                        ("per_bin_cap", per_bin_cap)):
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
    n_bins, max_total, per_bin_cap = int(n_bins), int(max_total), int(per_bin_cap)
    n_occ = _count_occupations(n_bins, max_total, per_bin_cap)
    if 2 * n_occ > max_dimension:
        raise SizingError(
            f"basis dimension {2 * n_occ} for N={n_bins}, M={max_total}, "
            f"cap={per_bin_cap} exceeds budget {max_dimension}")

    occ = np.zeros((n_occ, n_bins), dtype=np.int8)
    row = 0
    for total in range(max_total + 1):
        if per_bin_cap == 1:
            # reversed combinations give lexicographic order of 0/1 tuples
            block = _binary_occupations(n_bins, total)
            occ[row:row + len(block)] = block
            row += len(block)
        else:
            for tup in _compositions(n_bins, total, per_bin_cap):
                occ[row] = tup
                row += 1
    assert row == n_occ
    occ.setflags(write=False)
    return FockBasis(n_bins, max_total, per_bin_cap, occ)


def _binary_occupations(n_bins: int, total: int) -> np.ndarray:
    if total == 0:
        return np.zeros((1, n_bins), dtype=np.int8)
    from itertools import combinations
    rows = []
    for pos in combinations(range(n_bins), total):
        r = np.zeros(n_bins, dtype=np.int8)
        r[list(pos)] = 1
        rows.append(r)
    block = np.array(rows, dtype=np.int8)
    order = np.lexsort(block.T[::-1])
    return block[order]


class StateVector:
    """Complex amplitudes over a :class:`FockBasis`."""

    __slots__ = ("basis", "amplitudes", "_norm")

    def __init__(self, basis: FockBasis, amplitudes=None):
        self.basis = basis
        if amplitudes is None:
            amplitudes = np.zeros(basis.dimension, dtype=complex)
            amplitudes[0] = 1.0
        amplitudes = np.asarray(amplitudes, dtype=complex)
        if amplitudes.shape != (basis.dimension,):
            raise ValueError(
                f"amplitude shape {amplitudes.shape} does not match dimension {basis.dimension}")
        self.amplitudes = amplitudes
        self._norm = float(np.linalg.norm(amplitudes))

    @classmethod
    def basis_state(cls, basis: FockBasis, qubit: int, occupation=None) -> "StateVector":
        if occupation is None:
            occupation = (0,) * basis.n_bins
        amps = np.zeros(basis.dimension, dtype=complex)
        amps[basis.state_index(qubit, occupation)] = 1.0
        return cls(basis, amps)

    @property
    def norm(self) -> float:
        return self._norm

    @property
    def dimension(self) -> int:
        return self.basis.dimension

    def normalized(self) -> "StateVector":
        if self._norm == 0.0:
            raise ZeroDivisionError("cannot normalise the zero vector")
        return StateVector(self.basis, self.amplitudes / self._norm)

    def inner(self, other: "StateVector") -> complex:
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def __add__(self, other: "StateVector") -> "StateVector":
        return StateVector(self.basis, self.amplitudes + other.amplitudes)

    def __rmul__(self, scalar) -> "StateVector":
        return StateVector(self.basis, scalar * self.amplitudes)

    def __repr__(self) -> str:
        return f"StateVector(dim={self.dimension}, norm={self._norm:.6g})"


def _ladder_tables(basis: FockBasis, target: Target, direction: str):
    """Return (source index, destination index, matrix element) arrays."""
    dim = basis.dimension
    idx = np.arange(dim)
    q, j = idx % 2, idx // 2
    if target == QUBIT:
        if direction == LOWER:
            src = idx[q == 1]
            return src, src - 1, np.ones(len(src))
        src = idx[q == 0]
        return src, src + 1, np.ones(len(src))
    k = target
    basis._check_bin(k)
    n = basis.occupations[:, k].astype(np.int64)
    delta = -1 if direction == LOWER else 1
    new_j = basis.shifted(k, delta)
    ok = new_j[j] >= 0
    src = idx[ok]
    dst = 2 * new_j[j[ok]] + q[ok]
    nk = n[j[ok]]
    elem = np.sqrt(nk) if direction == LOWER else np.sqrt(nk + 1)
    return src, dst, elem


def apply_ladder(state: StateVector, target: Target, direction: str) -> StateVector:
    """Apply sigma-/sigma+ (``target="qubit"``) or b_k/b_k^dag (``target=k``).

    Components that would leave the truncated basis are dropped.
    """
    if direction not in (LOWER, RAISE):
        raise ValueError(f"direction must be {LOWER!r} or {RAISE!r}")
    if target != QUBIT and not isinstance(target, (int, np.integer)):
        raise ValueError(f"target must be 'qubit' or a bin index, got {target!r}")
    src, dst, elem = _ladder_tables(state.basis, target, direction)
    out = np.zeros_like(state.amplitudes)
    out[dst] = elem * state.amplitudes[src]
    return StateVector(state.basis, out)


def _parse_monomial(observable) -> list:
    """Normalise a monomial descriptor into a list of (target, direction) factors.

    Accepted forms: a list of ``(target, "raise"|"lower")`` pairs read left to
    right as operator products, or a string such as ``"sp sm"``, ``"bd3 b3"``
    or ``"b0"`` (``sp``/``sm`` for the qubit, ``b<k>``/``bd<k>`` for bins).
    """
    if isinstance(observable, str):
        factors = []
        for tok in observable.split():
            if tok == "sp":
                factors.append((QUBIT, RAISE))
            elif tok == "sm":
                factors.append((QUBIT, LOWER))
            elif tok.startswith("bd") and tok[2:].isdigit():
                factors.append((int(tok[2:]), RAISE))
            elif tok.startswith("b") and tok[1:].isdigit():
                factors.append((int(tok[1:]), LOWER))
            else:
                raise ValueError(f"malformed observable token {tok!r}")
        if not factors:
            raise ValueError("empty observable descriptor")
        return factors
    try:
        factors = [(t, d) for t, d in observable]
    except (TypeError, ValueError):
        raise ValueError(f"malformed observable descriptor {observable!r}") from None
    for t, d in factors:
        if d not in (LOWER, RAISE) or not (t == QUBIT or isinstance(t, (int, np.integer))):
            raise ValueError(f"malformed factor {(t, d)!r}")
    if not factors:
        raise ValueError("empty observable descriptor")
    return factors


def expectation(state: StateVector, observable, normalize: bool = True) -> complex:
    """<psi|O|psi> for a ladder monomial O (see :func:`_parse_monomial`)."""
    factors = _parse_monomial(observable)
    phi = state
    for target, direction in reversed(factors):
        phi = apply_ladder(phi, target, direction)
    value = state.inner(phi)
    if normalize:
        value /= state.norm ** 2
    return value
