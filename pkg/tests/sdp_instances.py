"""Random SDP feasibility instances with known answers."""

import numpy as np
import scipy.sparse as sps

from acbc.soscompile import SdpProblem


def _sym_rows(rng, m, n):
    rows = []
    for _ in range(m):
        S = rng.standard_normal((n, n))
        rows.append((S + S.T) / 2)
    return rows


def _problem(mats_per_block, sizes, b, F=None):
    m = len(b)
    A = [sps.csr_matrix(np.stack([M.ravel() for M in mats])) for mats in mats_per_block]
    F = sps.csr_matrix((m, 0)) if F is None else sps.csr_matrix(F)
    return SdpProblem(list(sizes), [f"blk{k}" for k in range(len(sizes))], A, F, np.asarray(b, float))


def constructed_feasible(rng, sizes=(3, 4), m=6, n_free=1):
    """b = A(X0) + F w0 for a strictly positive definite X0."""
    mats = [_sym_rows(rng, m, n) for n in sizes]
    b = np.zeros(m)
    for mm, n in zip(mats, sizes):
        G = rng.standard_normal((n, n))
        X0 = G @ G.T + 0.1 * np.eye(n)
        b += np.array([np.sum(M * X0) for M in mm])
    F = rng.standard_normal((m, n_free))
    b += F @ rng.standard_normal(n_free)
    return _problem(mats, sizes, b, F)


def constructed_infeasible(rng, sizes=(3, 4), m=6):
    """A Farkas ray y exists: sum y_i A_i negative definite with b^T y = 1."""
    y = rng.standard_normal(m)
    y[-1] = 1.0 + abs(y[-1])
    mats = []
    for n in sizes:
        mm = _sym_rows(rng, m - 1, n)
        G = rng.standard_normal((n, n))
        S = G @ G.T + 0.1 * np.eye(n)
        acc = sum(yi * M for yi, M in zip(y[:-1], mm))
        mm.append((-S - acc) / y[-1])
        mats.append(mm)
    b = rng.standard_normal(m)
    b += (1.0 - b @ y) / (y @ y) * y
    return _problem(mats, sizes, b)
