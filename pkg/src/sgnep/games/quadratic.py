"""Quadratic test game with an exactly computable variational equilibrium.

Player ``i`` minimises ``0.5 x_i' P_i x_i + x_i' sum_j G_ij x_j - r_i' x_i``
over a box, subject to the shared constraint ``sum_i A_i x_i <= c``.  The
pseudogradient is affine, ``F(x) = M x - r``, with ``M`` holding ``P_i`` on
the diagonal blocks and ``G_ij`` off the diagonal.  Sampled gradients add
zero-mean Gaussian noise of scale ``noise``.
"""

from __future__ import annotations

import itertools

import numba
import numpy as np

from ..errors import Degenerate, NotPositiveDefinite
from ..game import Game, LocalSet, PlayerSpec


@numba.njit(cache=True)
def _quad_inner(v0, P, h, phi, center, tau, lo, hi, noise):
    # gradient of the augmented objective: P v + h + phi + (v - center)/tau + noise_t
    v = v0.copy()
    d = v.size
    g = np.empty(d)
    for t in range(noise.shape[0]):
        kappa = 2.0 * tau / (t + 2.0)
        for a in range(d):
            s = h[a] + phi[a] + (v[a] - center[a]) / tau + noise[t, a]
            for b in range(d):
                s += P[a, b] * v[b]
            g[a] = s
        for a in range(d):
            x = v[a] - kappa * g[a]
            v[a] = min(max(x, lo[a]), hi[a])
    return v


class QuadraticGame(Game):
    name = "quadratic"
    smooth = True

    def __init__(self, M, r, players: list[PlayerSpec], c, noise=0.0):
        super().__init__(players, c)
        self.M = np.asarray(M, dtype=float)
        self.r = np.asarray(r, dtype=float)
        self.noise = float(noise)
        if self.M.shape != (self.n, self.n) or self.r.shape != (self.n,):
            raise ValueError("game matrix or linear term has the wrong size")
        sym = 0.5 * (self.M + self.M.T)
        self.eta = float(np.linalg.eigvalsh(sym)[0])
        if self.eta <= 0:
            raise NotPositiveDefinite("symmetric part of the game matrix is not positive definite")

    def P(self, i):
        s = self.sl(i)
        return self.M[s, s]

    def expected_gradient(self, i, y):
        s = self.sl(i)
        return self.M[s] @ y - self.r[s]

    def sample_gradient(self, i, y, rng):
        g = self.expected_gradient(i, y)
        return g + self.noise * rng.standard_normal(g.size)

    def pseudogradient(self, x):
        return self.M @ x - self.r

    def inner_lipschitz(self, i):
        return float(np.linalg.norm(self.P(i), 2))

    def projected_subgradient(self, sub, T, rng):
        i = sub.player
        s = self.sl(i)
        y = sub.y.copy()
        y[s] = 0.0
        h = self.M[s] @ y - self.r[s]
        noise = self.noise * rng.standard_normal((T, self.dims[i]))
        return _quad_inner(sub.center, np.ascontiguousarray(self.P(i)), h, sub.phi, sub.center, sub.tau, sub.lo, sub.hi, noise)

    def params(self):
        return {"M": self.M, "r": self.r, "A": self.A_full, "c": self.c, "noise": np.array([self.noise])}

    def metadata(self):
        return {"game": self.name, "eta": self.eta, "noise": self.noise}


def random_quadratic_game(
    N=4, dim=2, m=2, seed=0, noise=0.0, coupling=0.3, box=(-2.0, 2.0), tightness=0.5, spread=1.0
) -> QuadraticGame:
    """Random strongly monotone quadratic game.

    Own blocks are ``I + spread * Q Q' / dim``; cross blocks have entries of
    size ``coupling / sqrt(n)``.  ``tightness`` in (0, 1) scales ``c`` below
    the coupling usage of the unconstrained equilibrium so that some shared
    constraints bind.
    """
    rng = np.random.default_rng(seed)
    n = N * dim
    players = []
    blocks = np.zeros((n, n))
    for i in range(N):
        Q = rng.standard_normal((dim, dim))
        blocks[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = spread * Q @ Q.T / dim + np.eye(dim)
    G = coupling * rng.standard_normal((n, n)) / np.sqrt(n)
    for i in range(N):
        G[i * dim : (i + 1) * dim, i * dim : (i + 1) * dim] = 0.0
    M = blocks + G
    # shift until strongly monotone with margin
    lam_min = np.linalg.eigvalsh(0.5 * (M + M.T))[0]
    if lam_min < 0.3:
        M += (0.3 - lam_min) * np.eye(n)
    r = rng.uniform(0.5, 1.5, n) * np.sign(rng.standard_normal(n))
    A = np.abs(rng.uniform(0.2, 1.0, (m, n)))
    lo, hi = box
    x_free = np.clip(np.linalg.solve(M, r), lo, hi)
    use = A @ x_free
    c = tightness * use - (1 - tightness) * 0.1 * np.abs(use).max() if np.any(use > 0) else np.ones(m)
    c = np.where(np.abs(c) < 0.05, 0.05, c)
    shares = [c / N] * N
    for i in range(N):
        s = slice(i * dim, (i + 1) * dim)
        players.append(PlayerSpec(dim, A[:, s], shares[i], LocalSet(np.full(dim, lo), np.full(dim, hi))))
    return QuadraticGame(M, r, players, c, noise)


def _solve_active(game: QuadraticGame, status, active_rows):
    """Solve the KKT equalities for a guessed active set; ``status`` in {-1, 0, 1} per coordinate."""
    n = game.n
    lo = np.concatenate([p.local_set.lo for p in game.players])
    hi = np.concatenate([p.local_set.hi for p in game.players])
    free = status == 0
    x = np.where(status < 0, lo, np.where(status > 0, hi, 0.0))
    Aa = game.A_full[active_rows]
    nf, na = int(free.sum()), len(active_rows)
    K = np.zeros((nf + na, nf + na))
    rhs = np.zeros(nf + na)
    K[:nf, :nf] = game.M[np.ix_(free, free)]
    K[:nf, nf:] = Aa[:, free].T
    K[nf:, :nf] = Aa[:, free]
    rhs[:nf] = game.r[free] - game.M[np.ix_(free, ~free)] @ x[~free]
    rhs[nf:] = game.c[active_rows] - Aa[:, ~free] @ x[~free]
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    x[free] = sol[:nf]
    lam = np.zeros(game.m)
    lam[active_rows] = sol[nf:]
    return x, lam


def _kkt_ok(game: QuadraticGame, x, lam, tol):
    lo = np.concatenate([p.local_set.lo for p in game.players])
    hi = np.concatenate([p.local_set.hi for p in game.players])
    if np.any(x < lo - tol) or np.any(x > hi + tol) or np.any(lam < -tol):
        return False
    slack = game.c - game.A_full @ x
    if np.any(slack < -tol) or np.any(np.abs(lam * slack) > tol):
        return False
    g = game.M @ x - game.r + game.A_full.T @ lam
    at_lo, at_hi = x <= lo + tol, x >= hi - tol
    bad = np.where(at_lo & ~at_hi, np.minimum(g, 0.0), np.where(at_hi & ~at_lo, np.maximum(g, 0.0), g))
    bad[at_lo & at_hi] = 0.0
    return bool(np.all(np.abs(bad) <= tol))


def _active_sets(n, m):
    """Active sets ordered by size: ``(coordinate statuses, active coupling rows)``."""
    for size in range(n + m + 1):
        for j in range(max(0, size - n), min(m, size) + 1):
            for rows in itertools.combinations(range(m), j):
                for coords in itertools.combinations(range(n), size - j):
                    for signs in itertools.product((-1, 1), repeat=len(coords)):
                        status = np.zeros(n, dtype=np.int64)
                        status[list(coords)] = signs
                        yield status, list(rows)


def quadratic_nash_oracle(game: QuadraticGame, tol=1e-9, max_sets=2_000_000):
    """Exact variational equilibrium ``(x*, lam*)`` by active-set search.

    Candidate active sets (coordinates at a bound, binding shared
    constraints) are tried from smallest to largest; the KKT equalities are
    solved and the first point passing the full KKT check is returned.  The
    game is strongly monotone, so that ``x*`` is the unique equilibrium.

    Raises
    ------
    Degenerate
        No active set within ``max_sets`` satisfies the KKT conditions.
    """
    for tried, (status, rows) in enumerate(_active_sets(game.n, game.m)):
        if tried >= max_sets:
            break
        res = _solve_active(game, status, rows)
        if res is not None and _kkt_ok(game, *res, tol * 10):
            return res
    raise Degenerate("no active set satisfies the KKT conditions")
