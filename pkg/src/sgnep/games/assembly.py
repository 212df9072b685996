"""Two-stage multi-product assembly game.

Player ``i`` pre-orders ``x_i`` units of its ``n_i`` subassembly types (each
mapped to one of ``m`` global types by the binary ``A_i``).  After demand
``d`` for its ``l_i`` products is revealed it plans production ``z`` and
salvages leftovers, which gives the recourse value

    Q_i(x_i; d) = min { -p'z - s'A_i h : h = x_i - H'z, 0 <= z <= d, h >= 0 }.

The first-stage scenario cost is

    0.5 x_i'Q_i x_i + (C + Sigma A x)'A_i x_i + Q_i(x_i; d)

with random base costs ``C`` and finite-support demand.  Recourse values and
subgradients come from the dual vertex the simplex solver lands on.
"""

from __future__ import annotations

import numba
import numpy as np

from ..errors import LPInfeasible, LPUnbounded, NoDeterministicOracle, NumericalBreakdown
from ..game import Game, LocalSet, PlayerSpec
from ..lp import OPTIMAL, TOL, UNBOUNDED, LpProblem, standard_form_warm
from ..topology import circle_plus_chords

_MAX_PIVOTS = 500


def recourse_lp(H, A_i, p, s):
    """Standard-form data ``(Bmat, cost, basis0)`` of player recourse ``min cost@u, Bmat u = [x; d], u >= 0``.

    ``u = [z; h; r]`` with ``r = d - z`` the unmet demand; the slack basis
    ``(h, r)`` is feasible for every ``x, d >= 0``.
    """
    ell, n = H.shape
    Bmat = np.zeros((n + ell, 2 * ell + n))
    Bmat[:n, :ell] = H.T
    Bmat[:n, ell : ell + n] = np.eye(n)
    Bmat[n:, :ell] = np.eye(ell)
    Bmat[n:, ell + n :] = np.eye(ell)
    cost = np.concatenate([-p, -(A_i.T @ s), np.zeros(ell)])
    basis0 = np.arange(ell, 2 * ell + n, dtype=np.int64)
    return Bmat, cost, basis0


def recourse_dual_problem(H, A_i, p, s, x_i, d) -> LpProblem:
    """The dual ``max [x; d]'v s.t. Bmat'v <= cost`` as an :class:`LpProblem`."""
    Bmat, cost, _ = recourse_lp(H, A_i, p, s)
    return LpProblem(np.concatenate([x_i, d]), Bmat, cost)


@numba.njit(cache=True)
def _recourse(Bmat, cost, basis0, rhs, n):
    status, u, v, it = standard_form_warm(Bmat, rhs, cost, basis0, 1e-9, 1e-11, _MAX_PIVOTS)
    val = 0.0
    for k in range(rhs.size):
        val += rhs[k] * v[k]
    return status, val, v[:n].copy()


@numba.njit(cache=True)
def _assembly_inner(
    v0, q_diag, AtS, base_smooth, At, c_spread, cum_p, demands,
    Bmat, cost, basis0, phi, center, tau, lo, hi, draws,
):
    # smooth part: base (mean costs, others' usage) + A' C_noise + Q v + 2 A' Sigma A v
    d = v0.size
    m = At.shape[1]
    ell = demands.shape[1]
    v = v0.copy()
    rhs = np.empty(d + ell)
    g = np.empty(d)
    for t in range(draws.shape[0]):
        kap = 2.0 * tau / (t + 2.0)
        u0 = draws[t, 0]
        l = 0
        while l < cum_p.size - 1 and u0 >= cum_p[l]:
            l += 1
        for k in range(d):
            rhs[k] = v[k]
        for k in range(ell):
            rhs[d + k] = demands[l, k]
        status, val, grec = _recourse(Bmat, cost, basis0, rhs, d)
        if status != 0:
            return v, status
        for k in range(d):
            s = base_smooth[k] + q_diag[k] * v[k] + grec[k]
            for a in range(m):
                s += At[k, a] * c_spread * (2.0 * draws[t, 1 + a] - 1.0)
            for b in range(d):
                s += AtS[k, b] * v[b]
            g[k] = s
        for k in range(d):
            gk = g[k] + phi[k] + (v[k] - center[k]) / tau
            x = v[k] - kap * gk
            v[k] = min(max(x, lo[k]), hi[k])
    return v, 0


class AssemblyGame(Game):
    name = "assembly"
    smooth = False

    def __init__(self, H, A_blocks, prices, salvage, q_diags, sigma_diag, Cbar, c_spread, demands, probs, boxes, c):
        self.H = [np.asarray(h, dtype=float) for h in H]
        self.prices = [np.asarray(p, dtype=float) for p in prices]
        self.salvage = np.asarray(salvage, dtype=float)
        self.q_diags = [np.asarray(q, dtype=float) for q in q_diags]
        self.sigma_diag = np.asarray(sigma_diag, dtype=float)
        self.Sigma = np.diag(self.sigma_diag)
        self.Cbar = np.asarray(Cbar, dtype=float)
        self.c_spread = float(c_spread)
        self.demands = [np.asarray(dm, dtype=float) for dm in demands]
        self.probs = [np.asarray(pr, dtype=float) for pr in probs]
        for dm, pr in zip(self.demands, self.probs):
            if np.any(dm <= 0) or not np.all(np.isfinite(dm)):
                raise ValueError("demand support must be strictly positive and bounded")
            if pr.shape != (dm.shape[0],) or np.any(pr < 0) or abs(pr.sum() - 1) > 1e-12:
                raise ValueError("scenario probabilities must be nonnegative and sum to one")
        c = np.asarray(c, dtype=float)
        players = []
        for i, A_i in enumerate(A_blocks):
            A_i = np.asarray(A_i, dtype=float)
            lo, hi = (np.asarray(b, dtype=float) for b in boxes[i])
            if np.any(lo < 0):
                raise ValueError("orders must be nonnegative")
            # the recourse is only defined for x >= 0, so estimates stay in X itself
            players.append(PlayerSpec(A_i.shape[1], A_i, c / len(A_blocks), LocalSet(lo, hi), lo.copy(), hi.copy()))
        super().__init__(players, c)
        self._lp = [recourse_lp(self.H[i], p.A, self.prices[i], self.salvage) for i, p in enumerate(self.players)]
        self._cum_p = [np.cumsum(pr) for pr in self.probs]

    @property
    def L(self):
        return [dm.shape[0] for dm in self.demands]

    def recourse(self, i, x_i, d):
        """``(value, subgradient)`` of player ``i``'s recourse at ``x_i`` for demand ``d``."""
        return recourse_value_and_subgradient(self, i, x_i, d)

    def _smooth_grad(self, i, y, C):
        s = self.sl(i)
        A_i = self.players[i].A
        x_i = y[s]
        return self.q_diags[i] * x_i + A_i.T @ (C + self.sigma_diag * (self.A_full @ y)) + A_i.T @ (self.sigma_diag * (A_i @ x_i))

    def scenario_gradient(self, i, y, d, C):
        _, g = self.recourse(i, y[self.sl(i)], d)
        return self._smooth_grad(i, y, C) + g

    def draw(self, i, u):
        """Map one uniform block ``u`` (length ``1 + m``) to a ``(d, C)`` scenario."""
        l = min(int(np.searchsorted(self._cum_p[i], u[0], side="right")), self.L[i] - 1)
        return self.demands[i][l], self.Cbar + self.c_spread * (2.0 * u[1:] - 1.0)

    def sample_gradient(self, i, y, rng):
        d, C = self.draw(i, rng.random(1 + self.m))
        return self.scenario_gradient(i, y, d, C)

    def expected_gradient(self, i, y):
        g = self._smooth_grad(i, y, self.Cbar)
        x_i = y[self.sl(i)]
        for pl, d in zip(self.probs[i], self.demands[i]):
            g = g + pl * self.recourse(i, x_i, d)[1]
        return g

    def expected_cost(self, i, y):
        """Explicit finite-support objective of player ``i``."""
        s = self.sl(i)
        x_i = y[s]
        own = self.players[i].A @ x_i
        val = 0.5 * x_i @ (self.q_diags[i] * x_i) + (self.Cbar + self.sigma_diag * (self.A_full @ y)) @ own
        return float(val + sum(pl * self.recourse(i, x_i, d)[0] for pl, d in zip(self.probs[i], self.demands[i])))

    def inner_lipschitz(self, i):
        raise NoDeterministicOracle("the recourse term is nonsmooth")

    def subdifferential_residual(self, x, lam, face_tol=1e-7) -> float:
        """KKT residual minimised over the whole recourse subdifferential.

        For each player and scenario the dual vector ranges over the optimal
        face of its recourse dual; the residual is the smallest norm of the
        box-projected stationarity violation, stacked with complementarity.
        """
        import cvxpy as cp

        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        parts, cons = [], []
        for i, p in enumerate(self.players):
            s = self.sl(i)
            x_i = x[s]
            Bmat, cost, _ = self._lp[i]
            g = self._smooth_grad(i, x, self.Cbar) + p.A.T @ lam
            for pl, d in zip(self.probs[i], self.demands[i]):
                rhs = np.concatenate([x_i, d])
                val, _ = self.recourse(i, x_i, d)
                v = cp.Variable(rhs.size)
                cons += [Bmat.T @ v <= cost, rhs @ v >= val - face_tol * (1.0 + abs(val))]
                g = g + pl * v[: x_i.size]
            lo, hi = p.local_set.lo, p.local_set.hi
            at_lo = x_i <= lo + face_tol
            at_hi = x_i >= hi - face_tol
            free = ~(at_lo | at_hi)
            if free.any():
                parts.append(g[np.flatnonzero(free)])
            for mask, sign in ((at_lo, -1.0), (at_hi, 1.0)):
                if mask.any():
                    viol = cp.Variable(int(mask.sum()), nonneg=True)
                    cons.append(viol >= sign * g[np.flatnonzero(mask)])
                    parts.append(viol)
        prob = cp.Problem(cp.Minimize(cp.sum_squares(cp.hstack(parts))), cons)
        prob.solve(solver=cp.CLARABEL)
        u = self.c - self.A_full @ x
        r = np.where(lam > face_tol, np.abs(u), np.maximum(-u, 0.0))
        return float(np.sqrt(max(prob.value, 0.0) + r @ r + np.sum(np.minimum(lam, 0.0) ** 2)))

    def projected_subgradient(self, sub, T, rng):
        i = sub.player
        s = self.sl(i)
        A_i = self.players[i].A
        y = sub.y.copy()
        y[s] = 0.0
        base = A_i.T @ (self.Cbar + self.sigma_diag * (self.A_full @ y))
        AtS = 2.0 * A_i.T @ (self.sigma_diag[:, None] * A_i)
        draws = rng.random((T, 1 + self.m))
        Bmat, cost, basis0 = self._lp[i]
        v, status = _assembly_inner(
            sub.center, self.q_diags[i], AtS, base, np.ascontiguousarray(A_i.T), self.c_spread, self._cum_p[i], self.demands[i], Bmat, cost, basis0,
            sub.phi, sub.center, sub.tau, sub.lo, sub.hi, draws,
        )
        _raise_status(status)
        return v

    def potential_problem(self, x):
        """Convex potential with per-scenario second-stage variables (``Sigma`` is diagonal)."""
        import cvxpy as cp

        Ax = self.A_full @ x
        terms = [self.Cbar @ Ax, 0.5 * cp.sum(cp.multiply(self.sigma_diag, cp.square(Ax)))]
        cons = []
        for i, p in enumerate(self.players):
            xi = x[self.sl(i)]
            own = p.A @ xi
            terms += [
                0.5 * cp.sum(cp.multiply(self.q_diags[i], cp.square(xi))),
                0.5 * cp.sum(cp.multiply(self.sigma_diag, cp.square(own))),
            ]
            H = self.H[i]
            for pl, d in zip(self.probs[i], self.demands[i]):
                z = cp.Variable(H.shape[0])
                cons += [z >= 0, z <= d, H.T @ z <= xi]
                terms.append(pl * (-self.prices[i] @ z - self.salvage @ (p.A @ (xi - H.T @ z))))
        return sum(terms), cons

    def params(self):
        return {
            "A": self.A_full, "c": self.c, "H": np.concatenate([h.ravel() for h in self.H]),
            "p": np.concatenate(self.prices), "s": self.salvage, "Q": np.concatenate(self.q_diags),
            "Sigma": self.sigma_diag, "Cbar": self.Cbar, "spread": np.array([self.c_spread]),
            "d": np.concatenate([dm.ravel() for dm in self.demands]), "P": np.concatenate(self.probs),
        }

    def metadata(self):
        return {"game": self.name, "players": self.N, "types": self.m, "dims": self.dims.tolist(), "scenarios": self.L}


def _raise_status(status):
    if status == OPTIMAL:
        return
    if status == UNBOUNDED:
        raise LPUnbounded("recourse LP is unbounded; the structural assumptions on H are violated")
    raise NumericalBreakdown("recourse LP hit the pivot cap")


def recourse_value_and_subgradient(game: AssemblyGame, i: int, x_i, d):
    """Recourse value and the subgradient read off the optimal dual vertex."""
    x_i = np.asarray(x_i, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(x_i < -TOL["feasibility"]) or np.any(d < 0):
        raise LPInfeasible("recourse needs nonnegative orders and demand")
    Bmat, cost, basis0 = game._lp[i]
    status, val, g = _recourse(Bmat, cost, basis0, np.concatenate([np.maximum(x_i, 0.0), d]), x_i.size)
    _raise_status(status)
    return float(val), g


def random_requirements(rng, ell, n, max_units=3):
    """Nonnegative integer ``ell x n`` requirement matrix with full row rank and no zero column."""
    while True:
        H = rng.integers(0, max_units + 1, (ell, n)).astype(float)
        H[:, H.sum(0) == 0] = 0.0
        for v in np.flatnonzero(H.sum(0) == 0):
            H[rng.integers(ell), v] = rng.integers(1, max_units + 1)
        if np.linalg.matrix_rank(H) == ell:
            return H


def build_paper_assembly(
    seed: int = 0, n_players: int = 5, m: int = 10, dims=(7, 8, 9, 10), products=(2, 3, 4), L: int = 5,
    c_spread: float = 1.0, cap_fraction: float = 0.2,
):
    """Random assembly instance; the communication graph (ring plus two chords) is ``game.comm_edges``.

    Prices are set so that each product sells above its expected component
    cost, and the resource caps ``c`` are ``cap_fraction`` of the total box
    capacity per type, which makes some of them bind.  A tiny seeded jitter on
    prices keeps the recourse LP free of dual ties.
    """
    rng = np.random.default_rng(seed)
    salvage = rng.uniform(0.2, 0.6, m)
    Cbar = rng.uniform(2.0, 4.0, m)
    sigma = rng.uniform(0.05, 0.15, m)
    H, A_blocks, prices, q_diags, demands, probs, boxes = [], [], [], [], [], [], []
    for _ in range(n_players):
        n = int(rng.choice(dims))
        ell = int(rng.choice([e for e in products if e <= n]))
        types = rng.choice(m, n, replace=n > m)
        A_i = np.zeros((m, n))
        A_i[types, np.arange(n)] = 1.0
        Hi = random_requirements(rng, ell, n)
        unit_cost = Hi @ (A_i.T @ Cbar)
        p = unit_cost * rng.uniform(1.6, 2.4, ell)
        p = p * (1.0 + 1e-6 * rng.standard_normal(ell))
        H.append(Hi)
        A_blocks.append(A_i)
        prices.append(p)
        q_diags.append(rng.uniform(0.2, 0.4, n))
        demands.append(rng.uniform(1.0, 5.0, (L, ell)))
        probs.append(rng.dirichlet(np.ones(L)))
        boxes.append((np.zeros(n), np.full(n, 15.0)))
    hi_total = sum(A @ b[1] for A, b in zip(A_blocks, boxes))
    c = cap_fraction * hi_total
    c = np.where(c > 0, c, 1.0)
    game = AssemblyGame(H, A_blocks, prices, salvage, q_diags, sigma, Cbar, c_spread, demands, probs, boxes, c)
    game.comm_edges = circle_plus_chords(n_players, 2, rng)
    return game
