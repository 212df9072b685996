"""Small dense simplex solver (Bland's rule) and a brute-force vertex enumerator.

Problems are posed in inequality form::

    maximize    c @ v
    subject to  G.T @ v <= h,   lb <= v <= ub

The core works on the standard form ``min cost @ x, A x = b, x >= 0`` with a
dense tableau and is compiled with numba so the recourse evaluations inside the
assembly game's subgradient loop stay cheap.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numba
import numpy as np

from .errors import DimensionMismatch, DimensionTooLarge, LPInfeasible, LPUnbounded, NumericalBreakdown

TOL = {
    "feasibility": 1e-9,
    "optimality": 1e-9,
    "pivot": 1e-11,
    "dedupe": 1e-9,
}

OPTIMAL, UNBOUNDED, INFEASIBLE, BREAKDOWN = 0, 1, 2, 3
_STATUS = {OPTIMAL: "optimal", UNBOUNDED: "unbounded", INFEASIBLE: "infeasible", BREAKDOWN: "breakdown"}


@numba.njit(cache=True)
def _pivot(T, r, s):
    piv = T[r, s]
    ncol = T.shape[1]
    for j in range(ncol):
        T[r, j] /= piv
    for i in range(T.shape[0]):
        if i != r:
            f = T[i, s]
            if f != 0.0:
                for j in range(ncol):
                    T[i, j] -= f * T[r, j]


@numba.njit(cache=True)
def _bland_loop(T, basis, n_enter, opt_tol, piv_tol, max_iter):
    """Run Bland-rule pivots on tableau ``T`` (last row = reduced costs)."""
    m = T.shape[0] - 1
    rhs = T.shape[1] - 1
    it = 0
    while it < max_iter:
        s = -1
        for j in range(n_enter):
            if T[m, j] < -opt_tol:
                s = j
                break
        if s == -1:
            return OPTIMAL, it
        r = -1
        best = 0.0
        for i in range(m):
            a = T[i, s]
            if a > piv_tol:
                ratio = T[i, rhs] / a
                if r == -1 or ratio < best - 1e-12 or (abs(ratio - best) <= 1e-12 and basis[i] < basis[r]):
                    r = i
                    best = ratio
        if r == -1:
            return UNBOUNDED, it
        _pivot(T, r, s)
        basis[r] = s
        it += 1
    return BREAKDOWN, it


@numba.njit(cache=True)
def _phase2_costs(T, basis, cost):
    m = T.shape[0] - 1
    ncol = T.shape[1]
    for j in range(ncol):
        T[m, j] = 0.0
    for j in range(cost.size):
        T[m, j] = cost[j]
    for i in range(m):
        cb = cost[basis[i]] if basis[i] < cost.size else 0.0
        if cb != 0.0:
            for j in range(ncol):
                T[m, j] -= cb * T[i, j]


@numba.njit(cache=True)
def standard_form_warm(A, b, cost, basis0, opt_tol, piv_tol, max_iter):
    """Phase-2 simplex from a basis whose columns of ``A`` form an identity.

    Returns ``(status, x, duals, iterations)``; ``duals`` solves
    ``A_B.T @ y = cost_B`` at the final basis, i.e. an optimal vertex of the
    dual polyhedron ``{y : A.T y <= cost}``.
    """
    m, n = A.shape
    T = np.zeros((m + 1, n + 1))
    T[:m, :n] = A
    T[:m, n] = b
    basis = basis0.copy()
    _phase2_costs(T, basis, cost)
    status, it = _bland_loop(T, basis, n, opt_tol, piv_tol, max_iter)
    x = np.zeros(n)
    y = np.zeros(m)
    if status != OPTIMAL:
        return status, x, y, it
    for i in range(m):
        x[basis[i]] = T[i, n]
    AB = np.empty((m, m))
    cB = np.empty(m)
    for i in range(m):
        for r in range(m):
            AB[r, i] = A[r, basis[i]]
        cB[i] = cost[basis[i]]
    y = np.linalg.solve(AB.T, cB)
    return status, x, y, it


@numba.njit(cache=True)
def _two_phase(A, b, cost, opt_tol, piv_tol, feas_tol, max_iter):
    m, n = A.shape
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    for i in range(m):
        T[i, n + i] = 1.0
        T[i, n + m] = b[i]
    basis = np.arange(n, n + m)
    # phase 1: minimise the sum of artificials
    for j in range(n + m + 1):
        T[m, j] = 0.0
    for i in range(m):
        for j in range(n):
            T[m, j] -= T[i, j]
        T[m, n + m] -= T[i, n + m]
    status, it1 = _bland_loop(T, basis, n, opt_tol, piv_tol, max_iter)
    x = np.zeros(n)
    keep = np.ones(m, dtype=np.bool_)
    if status == BREAKDOWN:
        return BREAKDOWN, x, basis, keep, it1
    if -T[m, n + m] > feas_tol * max(1.0, np.abs(b).max()):
        return INFEASIBLE, x, basis, keep, it1
    # drive artificials out of the basis; drop rows that are redundant
    for i in range(m):
        if basis[i] >= n:
            s = -1
            for j in range(n):
                if abs(T[i, j]) > 1e-9:
                    s = j
                    break
            if s == -1:
                keep[i] = False
            else:
                _pivot(T, i, s)
                basis[i] = s
    # phase 2 on the kept rows, artificial columns frozen out
    rows = np.where(keep)[0]
    T2 = np.zeros((rows.size + 1, n + 1))
    basis2 = np.empty(rows.size, dtype=np.int64)
    for k in range(rows.size):
        T2[k, :n] = T[rows[k], :n]
        T2[k, n] = T[rows[k], n + m]
        basis2[k] = basis[rows[k]]
    _phase2_costs(T2, basis2, cost)
    status, it2 = _bland_loop(T2, basis2, n, opt_tol, piv_tol, max_iter)
    if status == OPTIMAL:
        for k in range(rows.size):
            x[basis2[k]] = T2[k, n]
    for k in range(rows.size):
        basis[rows[k]] = basis2[k]
    return status, x, basis, keep, it1 + it2


@dataclass
class LpProblem:
    """``maximize c @ v  s.t.  G.T @ v <= h, lb <= v <= ub``."""

    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        d = self.c.size
        self.G = np.asarray(self.G, dtype=float).reshape(d, -1)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if self.G.shape[1] != self.h.size:
            raise DimensionMismatch("G must have one column per entry of h")
        self.lb = np.full(d, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float)
        self.ub = np.full(d, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float)
        if self.lb.shape != (d,) or self.ub.shape != (d,):
            raise DimensionMismatch("bounds must match the number of variables")
        if self.h.size == 0 and not (np.isfinite(self.lb).any() or np.isfinite(self.ub).any()):
            raise DimensionMismatch("problem needs at least one constraint")

    @property
    def dim(self) -> int:
        return self.c.size

    def constraint_rows(self):
        """All constraints as rows ``a @ v <= beta`` (bounds included)."""
        rows = [self.G.T]
        rhs = [self.h]
        eye = np.eye(self.dim)
        fin_u = np.isfinite(self.ub)
        fin_l = np.isfinite(self.lb)
        rows += [eye[fin_u], -eye[fin_l]]
        rhs += [self.ub[fin_u], -self.lb[fin_l]]
        return np.vstack(rows), np.concatenate(rhs)


@dataclass
class LpResult:
    status: str
    v: np.ndarray | None = None
    value: float | None = None
    is_vertex: bool = False
    iterations: int = 0


def _to_standard(p: LpProblem):
    """Map the inequality problem to ``min cost @ w, A w = b, w >= 0``.

    Returns the standard data plus an affine map ``v = offset + V @ w``.
    """
    d = p.dim
    cols = []
    offset = np.zeros(d)
    extra_rows = []  # (var index, upper bound on its shifted variable)
    for k in range(d):
        lo, hi = p.lb[k], p.ub[k]
        e = np.zeros(d)
        e[k] = 1.0
        if np.isfinite(lo):
            offset[k] = lo
            cols.append(e)
            if np.isfinite(hi):
                extra_rows.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            offset[k] = hi
            cols.append(-e)
        else:
            cols.append(e)
            cols.append(-e)
    V = np.array(cols).T  # d x nw
    nw = V.shape[1]
    Gt = p.G.T @ V
    rhs = p.h - p.G.T @ offset
    rows = [Gt]
    rvals = [rhs]
    for col, cap in extra_rows:
        r = np.zeros(nw)
        r[col] = 1.0
        rows.append(r[None, :])
        rvals.append(np.array([cap]))
    Ain = np.vstack(rows)
    bin_ = np.concatenate(rvals)
    mrow = Ain.shape[0]
    A = np.hstack([Ain, np.eye(mrow)])
    b = bin_.copy()
    neg = b < 0
    A[neg] *= -1.0
    b[neg] *= -1.0
    cost = np.concatenate([-(p.c @ V), np.zeros(mrow)])
    return A, b, cost, V, offset, nw


def _is_vertex(p: LpProblem, v, tol=1e-7):
    R, beta = p.constraint_rows()
    act = np.abs(R @ v - beta) <= tol * (1.0 + np.abs(beta))
    if not act.any():
        return p.dim == 0
    return np.linalg.matrix_rank(R[act], tol=1e-9) == p.dim


def simplex_solve(p: LpProblem, max_iter: int = 10_000) -> LpResult:
    """Solve ``p`` with a two-phase dense simplex using Bland's rule.

    Returns an :class:`LpResult` whose ``status`` is ``"optimal"``,
    ``"unbounded"`` or ``"infeasible"``.  Raises :class:`NumericalBreakdown`
    if the pivot cap is hit.
    """
    A, b, cost, V, offset, nw = _to_standard(p)
    status, w, basis, keep, it = _two_phase(
        A, b, cost, TOL["optimality"], TOL["pivot"], TOL["feasibility"], max_iter
    )
    if status == BREAKDOWN:
        raise NumericalBreakdown(f"simplex did not terminate within {max_iter} pivots")
    if status != OPTIMAL:
        return LpResult(_STATUS[status], iterations=int(it))
    v = offset + V @ w[:nw]
    return LpResult("optimal", v, float(p.c @ v), bool(_is_vertex(p, v)), int(it))


def enumerate_vertices(p: LpProblem, max_dim: int = 8) -> list[np.ndarray]:
    """Brute-force all basic feasible points of ``p`` (small problems only)."""
    d = p.dim
    if d > max_dim:
        raise DimensionTooLarge(f"vertex enumeration limited to dimension {max_dim}, got {d}")
    R, beta = p.constraint_rows()
    out: list[np.ndarray] = []
    for idx in itertools.combinations(range(R.shape[0]), d):
        M = R[list(idx)]
        if abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, beta[list(idx)])
        if np.all(R @ v <= beta + TOL["feasibility"] * (1.0 + np.abs(beta))):
            if not any(np.max(np.abs(v - u)) <= TOL["dedupe"] * (1.0 + np.max(np.abs(u))) for u in out):
                out.append(v)
    return out


def solve_standard_warm(A, b, cost, basis, max_iter: int = 10_000):
    """Thin wrapper over the compiled warm-start phase 2; raises on failure."""
    status, x, y, it = standard_form_warm(
        np.ascontiguousarray(A, dtype=float),
        np.ascontiguousarray(b, dtype=float),
        np.ascontiguousarray(cost, dtype=float),
        np.asarray(basis, dtype=np.int64),
        TOL["optimality"],
        TOL["pivot"],
        max_iter,
    )
    if status == UNBOUNDED:
        raise LPUnbounded("standard-form LP is unbounded")
    if status == BREAKDOWN:
        raise NumericalBreakdown("pivot cap reached")
    return x, y
