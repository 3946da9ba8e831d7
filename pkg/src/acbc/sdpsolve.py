"""Dense feasibility solver for block semidefinite problems.

Finds X_k >= 0 (symmetric blocks) and free w with ``A(X) + F w = b``.
The problem is embedded in the homogeneous self-dual model

    A(X) + F w - b tau            = 0
    -A*(y) - Z                    = 0
    -F^T y                        = 0
    b^T y - kappa                 = 0,     X, Z >= 0, tau, kappa >= 0

and followed with a primal-dual path-following method (HKM search
direction, Mehrotra predictor-corrector, equal primal/dual steps).  A limit
point with tau > 0 gives a feasible point X / tau; one with kappa > 0 gives a
Farkas ray y with b^T y > 0, A*(y) <= 0, F^T y = 0.

A feasible status is only reported after an exact re-check: the equality
residual is projected away and every block's smallest eigenvalue is
re-computed with a dense symmetric eigen-solve.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps

from .soscompile import SdpProblem

log = logging.getLogger(__name__)

FEASIBLE = "feasible"
INFEASIBLE = "infeasible"
UNKNOWN = "unknown"


class BudgetExceededError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    tol: float = 1e-7
    max_iter: int = 200
    infeas_tol: float = 1e-7
    step_fraction: float = 0.98
    psd_margin: float = 1e-8
    max_residual: float = 1e-9
    budget: int = 1200

    def __post_init__(self):
        if not (self.tol > 0 and self.infeas_tol > 0 and self.psd_margin >= 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")


@dataclass
class SdpSolution:
    status: str
    blocks: list[np.ndarray]
    w: np.ndarray
    residual: float
    min_eigs: list[float]
    iterations: int
    y: np.ndarray | None = None      # Farkas ray when infeasible
    message: str = ""
    seconds: float = 0.0
    history: list[dict] = field(default_factory=list)

    @property
    def min_eig(self) -> float:
        return min(self.min_eigs, default=math.inf)

    def stats(self) -> dict:
        return {"status": self.status, "iterations": self.iterations, "residual": self.residual,
                "min_eig": self.min_eig if self.min_eigs else None, "message": self.message,
                "seconds": round(self.seconds, 3)}


def min_eigenvalue_check(matrix, margin: float = 1e-8) -> tuple[bool, float]:
    """Smallest eigenvalue of a symmetric matrix and whether it is >= -margin."""
    M = np.asarray(matrix, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("square matrix required")
    if M.size == 0:
        return True, math.inf
    if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, np.max(np.abs(M))):
        raise ValueError("matrix is not symmetric")
    lam = float(sla.eigvalsh(M, subset_by_index=[0, 0])[0]) if M.shape[0] > 1 else float(M[0, 0])
    return lam >= -margin, lam


# ---------------------------------------------------------------------------
# block helpers


def _sym(M):
    return 0.5 * (M + M.T)


def _block_entries(Ak: sps.csr_matrix, n: int):
    """Non-zero entries of one block operator as (row, p, q, value) arrays."""
    coo = Ak.tocoo()
    p, q = np.divmod(coo.col, n)
    return coo.row.astype(np.int64), p.astype(np.int64), q.astype(np.int64), coo.data.astype(float)


class _Operator:
    """A, A* and the Schur matrix for the reduced problem."""

    def __init__(self, A: Sequence[sps.csr_matrix], sizes: Sequence[int], m: int):
        self.A = [sps.csr_matrix(a) for a in A]
        self.sizes = list(sizes)
        self.m = m
        self.AT = [a.T.tocsr() for a in self.A]
        self.entries = []
        for a, n in zip(self.A, self.sizes):
            r, p, q, v = _block_entries(a, n)
            rows = np.unique(r)
            self.entries.append((r, p, q, v, rows))

    def apply(self, X: Sequence[np.ndarray]) -> np.ndarray:
        out = np.zeros(self.m)
        for a, x in zip(self.A, X):
            out += a @ x.ravel()
        return out

    def adjoint(self, y: np.ndarray) -> list[np.ndarray]:
        return [(at @ y).reshape(n, n) for at, n in zip(self.AT, self.sizes)]

    def schur(self, X: Sequence[np.ndarray], Zinv: Sequence[np.ndarray]) -> np.ndarray:
        """M_ij = sum_k tr(A_ik X_k A_jk Z_k^-1)."""
        M = np.zeros((self.m, self.m))
        for k, (a, n) in enumerate(zip(self.A, self.sizes)):
            r, p, q, v, rows = self.entries[k]
            if len(v) == 0:
                continue
            Xk, Wk = X[k], Zinv[k]
            if len(v) <= 3000:
                # entry-pair form: K[e, f] = X[q_e, p_f] * W[q_f, p_e]
                K = Xk[np.ix_(q, p)] * Wk[np.ix_(q, p)].T
                S = sps.csr_matrix((v, (r, np.arange(len(v)))), shape=(self.m, len(v)))
                M += (S @ (S @ K).T).T
            else:
                sub = a[rows]
                order = np.argsort(r, kind="stable")
                rs, ps, qs, vs = r[order], p[order], q[order], v[order]
                bounds = np.searchsorted(rs, rows, side="left")
                ends = np.searchsorted(rs, rows, side="right")
                Y = np.empty((len(rows), n * n))
                for t, (s0, s1) in enumerate(zip(bounds, ends)):
                    # X A_i W for A_i = sum v e_p e_q^T
                    Y[t] = (Xk[:, ps[s0:s1]] @ (vs[s0:s1, None] * Wk[qs[s0:s1], :])).ravel()
                M[np.ix_(rows, rows)] += (sub @ Y.T)
        return _sym(M)


@dataclass
class _Reduced:
    """Problem after removing PSD-free rows and orthonormalising F."""

    op: _Operator
    F: np.ndarray          # m x r, orthonormal columns
    b: np.ndarray
    w0: np.ndarray         # particular solution for the free part
    T: np.ndarray          # w = w0 + T t
    rows: np.ndarray       # indices of kept rows in the original problem


def _reduce(problem: SdpProblem, tol: float):
    m = problem.n_rows
    F = problem.F.toarray() if problem.n_free else np.zeros((m, 0))
    b = problem.b.astype(float)
    has_psd = np.zeros(m, dtype=bool)
    for a in problem.A:
        has_psd |= np.diff(a.tocsr().indptr) > 0
    lin = ~has_psd
    k = F.shape[1]
    w0 = np.zeros(k)
    N = np.eye(k)
    if lin.any():
        FE, bE = F[lin], b[lin]
        if k:
            w0, *_ = np.linalg.lstsq(FE, bE, rcond=None)
        res = bE - FE @ w0
        scale = 1.0 + np.linalg.norm(bE, np.inf)
        if np.linalg.norm(res, np.inf) > tol * scale:
            y = np.zeros(m)
            y[lin] = res
            return None, y
        if k:
            U, s, Vt = np.linalg.svd(FE, full_matrices=True)
            rank = int(np.sum(s > 1e-12 * max(1.0, s[0] if len(s) else 1.0)))
            N = Vt[rank:].T
    keep = np.nonzero(has_psd)[0]
    Fk = F[keep] @ N
    bk = b[keep] - F[keep] @ w0
    T = N
    if Fk.shape[1]:
        U, s, Vt = np.linalg.svd(Fk, full_matrices=False)
        rank = int(np.sum(s > 1e-10 * max(1.0, s[0])))
        Fo = U[:, :rank]
        # Fk z = Fo t  with z = V_r diag(1/s_r) t
        T = N @ (Vt[:rank].T / s[:rank])
    else:
        Fo = np.zeros((len(keep), 0))
    op = _Operator([a[keep] for a in problem.A], problem.block_sizes, len(keep))
    return _Reduced(op, Fo, bk, w0, T, keep), None


def _max_step(X: np.ndarray, dX: np.ndarray) -> float:
    """Largest alpha with X + alpha dX >= 0 (X positive definite)."""
    if X.shape[0] == 0:
        return math.inf
    L = np.linalg.cholesky(X)
    Li = sla.solve_triangular(L, np.eye(X.shape[0]), lower=True)
    lam = np.linalg.eigvalsh(_sym(Li @ dX @ Li.T))[0]
    return math.inf if lam >= 0 else -1.0 / lam


def _safe_inv(Z: np.ndarray) -> np.ndarray:
    c, low = sla.cho_factor(Z, lower=True)
    return sla.cho_solve((c, low), np.eye(Z.shape[0]))


class _Saddle:
    """Solves [[M, F], [F^T, 0]] [u; v] = [r1; r2]."""

    def __init__(self, M: np.ndarray, F: np.ndarray):
        m = M.shape[0]
        reg = 0.0
        scale = max(1.0, float(np.max(np.abs(np.diag(M))))) if m else 1.0
        while True:
            try:
                self.cho = sla.cho_factor(M + reg * np.eye(m), lower=True)
                break
            except np.linalg.LinAlgError:
                reg = scale * 1e-14 if reg == 0.0 else reg * 100
                if reg > scale * 1e-4:
                    raise
        self.F = F
        if F.shape[1]:
            G = sla.cho_solve(self.cho, F)
            self.G = G
            S = F.T @ G
            self.S = sla.cho_factor(_sym(S) + 1e-14 * np.trace(S) / max(1, S.shape[0]) * np.eye(S.shape[0]),
                                    lower=True)

    def solve(self, r1: np.ndarray, r2: np.ndarray):
        Mr = sla.cho_solve(self.cho, r1)
        if not self.F.shape[1]:
            return Mr, np.zeros(0)
        v = sla.cho_solve(self.S, self.F.T @ Mr - r2)
        u = Mr - self.G @ v
        return u, v


def _inner(Xs, Zs) -> float:
    return float(sum(np.vdot(x, z) for x, z in zip(Xs, Zs)))


def solve_feasibility(problem: SdpProblem, config: SolverConfig | None = None) -> SdpSolution:
    """Decide feasibility of ``A(X) + F w = b, X >= 0``."""
    cfg = config or SolverConfig()
    start = time.perf_counter()
    total = sum(problem.block_sizes)
    if total > cfg.budget:
        raise BudgetExceededError(f"total PSD dimension {total} exceeds budget {cfg.budget}")
    red, ray = _reduce(problem, cfg.infeas_tol)
    sizes = problem.block_sizes
    if red is None:
        return _finish(SdpSolution(INFEASIBLE, [np.zeros((n, n)) for n in sizes], np.zeros(problem.n_free),
                                   math.inf, [], 0, ray, "inconsistent linear rows"), start)
    op, F, b = red.op, red.F, red.b
    nb = len(sizes)
    nu = total + 1
    X = [np.eye(n) for n in sizes]
    Z = [np.eye(n) for n in sizes]
    y = np.zeros(op.m)
    t = np.zeros(F.shape[1])
    tau, kappa = 1.0, 1.0
    bnorm = 1.0 + np.linalg.norm(b, np.inf)
    history = []
    last = None
    status, message = UNKNOWN, "iteration limit"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        rp = op.apply(X) + F @ t - b * tau
        ATy = op.adjoint(y)
        rd = [-a - z for a, z in zip(ATy, Z)]
        rf = -F.T @ y
        rg = float(b @ y) - kappa
        mu = (_inner(X, Z) + tau * kappa) / nu
        pres = np.linalg.norm(rp, np.inf) / tau
        by = float(b @ y)
        history.append({"it": it, "mu": mu, "tau": tau, "kappa": kappa, "pres": pres, "by": by})
        # feasible candidate
        if pres <= cfg.tol * bnorm:
            cand = _validate_primal(problem, red, [x / tau for x in X], t / tau, cfg)
            if cand is not None:
                status, message, last = FEASIBLE, "converged", cand
                break
        # infeasibility ray
        if by > 0:
            dres = max((np.abs(d).max() for d in rd if d.size), default=0.0)
            if dres / by <= cfg.infeas_tol and (np.abs(rf).max() if rf.size else 0.0) / by <= cfg.infeas_tol:
                ray_ok, yfull = _validate_ray(problem, red, y / by, cfg)
                if ray_ok:
                    status, message, ray = INFEASIBLE, "dual improving ray", yfull
                    break
        if mu < 1e-16 and tau < 1e-12 * kappa:
            message = "embedding collapsed without certificate"
            break
        try:
            Zinv = [_safe_inv(z) for z in Z]
            M = op.schur(X, Zinv)
            K = _Saddle(M, F)
        except (np.linalg.LinAlgError, ValueError) as exc:
            message = f"numerical breakdown: {exc}"
            break
        u2, v2 = K.solve(b, np.zeros(F.shape[1]))
        denom_base = float(b @ u2)

        def direction(sigma, eta, corr):
            # complementarity targets for X and tau
            Rc = []
            for k in range(nb):
                r = sigma * mu * Zinv[k] - X[k]
                if corr is not None:
                    r = r - _sym(corr[0][k] @ corr[1][k] @ Zinv[k])
                Rc.append(r)
            tk = sigma * mu - tau * kappa - (corr[2] * corr[3] if corr is not None else 0.0)
            D0 = [Rc[k] - eta * _sym(X[k] @ rd[k] @ Zinv[k]) for k in range(nb)]
            u1, v1 = K.solve(-eta * rp - op.apply(D0), eta * rf)
            dtau = (-eta * rg - float(b @ u1) + tk / tau) / (denom_base + kappa / tau)
            dy = u1 + dtau * u2
            dt = v1 + dtau * v2
            ATdy = op.adjoint(dy)
            dX = [D0[k] + _sym(X[k] @ ATdy[k] @ Zinv[k]) for k in range(nb)]
            dZ = [-ATdy[k] + eta * rd[k] for k in range(nb)]
            dkappa = (tk - kappa * dtau) / tau
            return dX, dZ, dy, dt, dtau, dkappa

        def step_length(dX, dZ, dtau, dkappa):
            a = math.inf
            for k in range(nb):
                a = min(a, _max_step(X[k], dX[k]), _max_step(Z[k], dZ[k]))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        try:
            dXa, dZa, _, _, dtaua, dkappaa = direction(0.0, 1.0, None)
            aa = min(1.0, step_length(dXa, dZa, dtaua, dkappaa))
            mu_aff = (_inner([X[k] + aa * dXa[k] for k in range(nb)], [Z[k] + aa * dZa[k] for k in range(nb)])
                      + (tau + aa * dtaua) * (kappa + aa * dkappaa)) / nu
            sigma = min(1.0, max(0.0, mu_aff / mu)) ** 3
            dX, dZ, dy, dt, dtau, dkappa = direction(sigma, 1.0 - sigma, (dXa, dZa, dtaua, dkappaa))
            alpha = min(1.0, cfg.step_fraction * step_length(dX, dZ, dtau, dkappa))
        except np.linalg.LinAlgError as exc:
            message = f"numerical breakdown: {exc}"
            break
        if alpha < 1e-10:
            message = "step length collapsed"
            break
        X = [_sym(X[k] + alpha * dX[k]) for k in range(nb)]
        Z = [_sym(Z[k] + alpha * dZ[k]) for k in range(nb)]
        y = y + alpha * dy
        t = t + alpha * dt
        tau += alpha * dtau
        kappa += alpha * dkappa
    if status == FEASIBLE:
        blocks, w, res, eigs = last
        sol = SdpSolution(FEASIBLE, blocks, w, res, eigs, it, None, message, history=history)
    elif status == INFEASIBLE:
        sol = SdpSolution(INFEASIBLE, [x / max(tau, 1e-300) for x in X], red.w0 + red.T @ (t / max(tau, 1e-300)),
                          math.inf, [], it, ray, message, history=history)
    else:
        blocks = [x / max(tau, 1e-300) for x in X]
        w = red.w0 + red.T @ (t / max(tau, 1e-300))
        res = float(np.linalg.norm(problem.residual(blocks, w), np.inf))
        sol = SdpSolution(UNKNOWN, blocks, w, res, [float(np.linalg.eigvalsh(x)[0]) if x.size else math.inf
                                                   for x in blocks], it, None, message, history=history)
    return _finish(sol, start)


def _finish(sol: SdpSolution, start: float) -> SdpSolution:
    sol.seconds = time.perf_counter() - start
    log.info("sdp %s after %d iterations (%s)", sol.status, sol.iterations, sol.message)
    return sol


def project_onto_equalities(problem: SdpProblem, blocks: Sequence[np.ndarray], w: np.ndarray):
    """Minimum-norm correction making A(X) + F w = b hold to rounding error."""
    r = -problem.residual(blocks, w)
    Fs = problem.F
    G = (Fs @ Fs.T).toarray() if problem.n_free else np.zeros((problem.n_rows, problem.n_rows))
    for a in problem.A:
        G += (a @ a.T).toarray()
    blocks = [np.array(x, dtype=float) for x in blocks]
    w = np.array(w, dtype=float)
    for _ in range(3):
        lam, *_ = np.linalg.lstsq(G, r, rcond=None)
        for k, (a, n) in enumerate(zip(problem.A, problem.block_sizes)):
            blocks[k] = _sym(blocks[k] + (a.T @ lam).reshape(n, n))
        if problem.n_free:
            w = w + Fs.T @ lam
        r = -problem.residual(blocks, w)
        if np.linalg.norm(r, np.inf) < 1e-13 * (1 + np.linalg.norm(problem.b, np.inf)):
            break
    return blocks, w


def _validate_primal(problem: SdpProblem, red: _Reduced, Xr, tr, cfg: SolverConfig):
    """Re-verify a candidate on the original equalities; None if it fails."""
    w = red.w0 + red.T @ tr
    blocks, w = project_onto_equalities(problem, Xr, w)
    res = float(np.linalg.norm(problem.residual(blocks, w), np.inf))
    if res > cfg.max_residual:
        return None
    eigs = []
    for x in blocks:
        if x.size == 0:
            continue
        ok, lam = min_eigenvalue_check(x, cfg.psd_margin)
        if not ok:
            return None
        eigs.append(lam)
    return blocks, w, res, eigs


def _validate_ray(problem: SdpProblem, red: _Reduced, yr: np.ndarray, cfg: SolverConfig):
    """Farkas ray check: b^T y = 1, F^T y ~ 0, A*(y) <= 0 up to tolerance."""
    y = np.zeros(problem.n_rows)
    y[red.rows] = yr
    if abs(float(problem.b @ y) - 1.0) > 1e-6:
        return False, y
    if problem.n_free and np.linalg.norm(problem.F.T @ y, np.inf) > cfg.infeas_tol * 10:
        return False, y
    for a, n in zip(problem.A, problem.block_sizes):
        S = -(a.T @ y).reshape(n, n)
        if n and np.linalg.eigvalsh(_sym(S))[0] < -cfg.infeas_tol * 10:
            return False, y
    return True, y
