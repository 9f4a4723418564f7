"""Numba kernels for the batched state arrays ``psi[row, 2*j + q]``."""
import numpy as np
from numba import njit


@njit(cache=True)
def apply_blocks(psi, rows, idx, U):
    G, L = idx.shape
    buf = np.empty(L, dtype=np.complex128)
    for r in rows:
        for g in range(G):
            for b in range(L):
                buf[b] = psi[r, idx[g, b]]
            for a in range(L):
                s = 0j
                for b in range(L):
                    s += U[a, b] * buf[b]
                psi[r, idx[g, a]] = s


@njit(cache=True)
def exit_stats(psi, rows, n_exit, lower, cap):
    """Per row: P(n) for the exit bin, <b_exit>, excited population."""
    R = rows.shape[0]
    n_occ = n_exit.shape[0]
    probs = np.zeros((R, cap + 1))
    bexp = np.zeros(R, dtype=np.complex128)
    pe = np.zeros(R)
    for i in range(R):
        r = rows[i]
        for j in range(n_occ):
            n = n_exit[j]
            a0 = psi[r, 2 * j]
            a1 = psi[r, 2 * j + 1]
            w1 = a1.real * a1.real + a1.imag * a1.imag
            probs[i, n] += a0.real * a0.real + a0.imag * a0.imag + w1
            pe[i] += w1
            if n > 0:
                k = lower[j]
                sq = np.sqrt(n)
                bexp[i] += sq * (np.conj(psi[r, 2 * k]) * a0 + np.conj(psi[r, 2 * k + 1]) * a1)
    return probs, bexp, pe


@njit(cache=True)
def collapse_reset(psi, rows, outcomes, scale, n_exit, vac, buf):
    """Project the exit bin onto its outcome, rescale, and return it to vacuum."""
    n_occ = n_exit.shape[0]
    for i in range(rows.shape[0]):
        r = rows[i]
        n = outcomes[i]
        s = scale[i]
        if n == 0:
            for j in range(n_occ):
                if n_exit[j] != 0:
                    psi[r, 2 * j] = 0j
                    psi[r, 2 * j + 1] = 0j
                else:
                    psi[r, 2 * j] *= s
                    psi[r, 2 * j + 1] *= s
            continue
        for k in range(2 * n_occ):
            buf[k] = 0j
        for j in range(n_occ):
            if n_exit[j] == n:
                v = vac[j]
                buf[2 * v] = psi[r, 2 * j] * s
                buf[2 * v + 1] = psi[r, 2 * j + 1] * s
        for k in range(2 * n_occ):
            psi[r, k] = buf[k]


@njit(cache=True)
def inject(psi, rows, n_in, up, a, b):
    """Fresh-bin isometry on the (empty) input slot; capped components stay vacuum."""
    n_occ = n_in.shape[0]
    for r in rows:
        for j in range(n_occ):
            if n_in[j] != 0:
                continue
            u = up[j]
            if u < 0:
                continue
            for q in range(2):
                x = psi[r, 2 * j + q]
                psi[r, 2 * u + q] = b * x
                psi[r, 2 * j + q] = a * x


@njit(cache=True)
def row_norms(psi, rows):
    out = np.zeros(rows.shape[0])
    D = psi.shape[1]
    for i in range(rows.shape[0]):
        r = rows[i]
        s = 0.0
        for k in range(D):
            x = psi[r, k]
            s += x.real * x.real + x.imag * x.imag
        out[i] = s
    return out


@njit(cache=True)
def excited_population(psi, rows):
    out = np.zeros(rows.shape[0])
    D = psi.shape[1]
    for i in range(rows.shape[0]):
        r = rows[i]
        s = 0.0
        for k in range(1, D, 2):
            x = psi[r, k]
            s += x.real * x.real + x.imag * x.imag
        out[i] = s
    return out


@njit(cache=True)
def ancillary(psi, rows, u_deph, u_loss, p_deph, loss_decay, flags):
    """Exact per-step unravelling of dephasing (random sigma_z) and amplitude damping.

    ``flags[i]`` gets bit 1 for a dephasing jump and bit 2 for a loss jump.
    """
    D = psi.shape[1]
    keep = np.sqrt(loss_decay)
    for i in range(rows.shape[0]):
        r = rows[i]
        f = 0
        if u_deph[i] < p_deph:
            f |= 1
            for k in range(0, D, 2):
                psi[r, k] = -psi[r, k]
        if loss_decay < 1.0:
            pe = 0.0
            for k in range(1, D, 2):
                x = psi[r, k]
                pe += x.real * x.real + x.imag * x.imag
            p_jump = (1.0 - loss_decay) * pe
            if u_loss[i] < p_jump:
                f |= 2
                s = 1.0 / np.sqrt(pe)
                for k in range(0, D, 2):
                    psi[r, k] = psi[r, k + 1] * s
                    psi[r, k + 1] = 0j
            else:
                s = 1.0 / np.sqrt(1.0 - p_jump)
                for k in range(0, D, 2):
                    psi[r, k] *= s
                    psi[r, k + 1] *= keep * s
        flags[i] = f
