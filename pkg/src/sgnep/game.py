"""Game abstraction: local sets, projections, per-player RNG streams and the
augmented best-response subproblem solved inside each major iteration."""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import nnls

from .errors import (
    DimensionMismatch,
    EmptyPolytope,
    InvertedBounds,
    MaxIterations,
    NoDeterministicOracle,
    OracleFailure,
)

EPS_PROJ = 1e-8
MAX_SWEEPS = 10_000
BOX_INFLATE = 0.05


def project_box(v, lo, hi):
    """Componentwise clamp of ``v`` onto ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvertedBounds("lower bound exceeds upper bound")
    return np.minimum(np.maximum(v, lo), hi)


@numba.njit(cache=True)
def _dykstra(v, lo, hi, G, h, eps, max_sweeps):
    d = v.size
    r = G.shape[0]
    x = v.copy()
    p = np.zeros(d)
    q = np.zeros(r)
    nrm2 = np.zeros(r)
    for j in range(r):
        s = 0.0
        for k in range(d):
            s += G[j, k] * G[j, k]
        nrm2[j] = s
    x_prev = np.empty(d)
    for sweep in range(max_sweeps):
        x_prev[:] = x
        change = 0.0
        for k in range(d):
            y = x[k] + p[k]
            xk = min(max(y, lo[k]), hi[k])
            change = max(change, abs(y - xk - p[k]))
            p[k] = y - xk
            x[k] = xk
        for j in range(r):
            if nrm2[j] == 0.0:
                continue
            dot = 0.0
            for k in range(d):
                dot += G[j, k] * x[k]
            viol = dot + q[j] * nrm2[j] - h[j]
            newq = viol / nrm2[j] if viol > 0.0 else 0.0
            delta = q[j] - newq
            if delta != 0.0:
                for k in range(d):
                    x[k] += delta * G[j, k]
            change = max(change, abs(delta) * np.sqrt(nrm2[j]))
            q[j] = newq
        # x can sit still for a sweep while the corrections keep moving
        for k in range(d):
            change = max(change, abs(x[k] - x_prev[k]))
        if change < eps:
            worst = 0.0
            for k in range(d):
                worst = max(worst, lo[k] - x[k], x[k] - hi[k])
            for j in range(r):
                dot = 0.0
                for k in range(d):
                    dot += G[j, k] * x[k]
                worst = max(worst, dot - h[j])
            if worst <= 10.0 * eps:
                return x, sweep + 1, True
    return x, max_sweeps, False


def _polytope_feasible(lo, hi, G, h):
    from .lp import LpProblem, simplex_solve

    p = LpProblem(np.zeros(lo.size), G.T, h, lb=lo, ub=hi)
    return simplex_solve(p).status == "optimal"


def project_polytope(v, lo, hi, G=None, h=None, eps=EPS_PROJ, max_sweeps=MAX_SWEEPS):
    """Euclidean projection onto ``{lo <= x <= hi, G @ x <= h}`` by Dykstra's method.

    Raises
    ------
    EmptyPolytope
        The set is empty (certified by a phase-1 LP after non-convergence).
    MaxIterations
        Dykstra did not converge within ``max_sweeps`` although the set is nonempty.
    """
    v = np.asarray(v, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise InvertedBounds("lower bound exceeds upper bound")
    if G is None or len(G) == 0:
        return np.minimum(np.maximum(v, lo), hi)
    G = np.ascontiguousarray(G, dtype=float)
    h = np.asarray(h, dtype=float)
    if G.shape != (h.size, v.size):
        raise DimensionMismatch(f"halfspace matrix has shape {G.shape}, expected {(h.size, v.size)}")
    x, sweeps, ok = _dykstra(v, lo, hi, G, h, eps, max_sweeps)
    if not ok:
        if not _polytope_feasible(lo, hi, G, h):
            raise EmptyPolytope("box and halfspaces have empty intersection")
        raise MaxIterations(f"Dykstra projection did not converge in {sweeps} sweeps", best=x)
    return x


@dataclass
class LocalSet:
    """Box, optionally intersected with halfspaces ``G @ x <= h``."""

    lo: np.ndarray
    hi: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape:
            raise DimensionMismatch("box bounds differ in shape")
        if np.any(self.lo > self.hi):
            raise InvertedBounds("lower bound exceeds upper bound")
        if not (np.all(np.isfinite(self.lo)) and np.all(np.isfinite(self.hi))):
            raise ValueError("local sets must be bounded")
        if self.G is not None:
            self.G = np.ascontiguousarray(self.G, dtype=float)
            self.h = np.asarray(self.h, dtype=float)
            if self.G.shape[0] == 0:
                self.G = self.h = None

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def is_box(self) -> bool:
        return self.G is None

    def project(self, v):
        return project_polytope(v, self.lo, self.hi, self.G, self.h)

    def contains(self, x, tol=1e-7) -> bool:
        ok = np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol)
        if self.G is not None:
            ok = ok and np.all(self.G @ x <= self.h + tol)
        return bool(ok)

    def bounding_box(self, inflate=BOX_INFLATE):
        width = self.hi - self.lo
        pad = inflate * np.where(width > 0, width, 1.0)
        return self.lo - pad, self.hi + pad

    def normal_cone_distance(self, w, x, tol=1e-7) -> float:
        """Distance from ``w`` to the normal cone of this set at ``x``.

        Infeasibility of ``x`` is added as its distance to the set.
        """
        w = np.asarray(w, dtype=float)
        infeas = 0.0
        if not self.contains(x, tol):
            infeas = float(np.linalg.norm(x - self.project(x)))
        at_lo = x <= self.lo + tol
        at_hi = x >= self.hi - tol
        if self.G is None:
            r = w.copy()
            r[at_lo] = np.maximum(w[at_lo], 0.0)  # cone at lower bound is (-inf, 0]
            r[at_hi] = np.minimum(w[at_hi], 0.0)
            r[at_lo & at_hi] = 0.0
            return float(np.hypot(np.linalg.norm(r), infeas))
        eye = np.eye(self.dim)
        gens = [-eye[at_lo], eye[at_hi]]
        act = np.abs(self.G @ x - self.h) <= tol * (1.0 + np.abs(self.h))
        gens.append(self.G[act])
        Gen = np.vstack(gens)
        if Gen.shape[0] == 0:
            dist = float(np.linalg.norm(w))
        else:
            _, dist = nnls(Gen.T, w, maxiter=50 * Gen.shape[0])
        return float(np.hypot(dist, infeas))


@dataclass
class PlayerSpec:
    """Decision space and coupling data of one player."""

    dim: int
    A: np.ndarray
    c_share: np.ndarray
    local_set: LocalSet
    bbox_lo: np.ndarray | None = None
    bbox_hi: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.c_share = np.asarray(self.c_share, dtype=float).reshape(-1)
        if self.A.shape[1] != self.dim or self.local_set.dim != self.dim:
            raise DimensionMismatch("player dimension disagrees with A or the local set")
        if self.bbox_lo is None:
            self.bbox_lo, self.bbox_hi = self.local_set.bounding_box()
        self.bbox_lo = np.asarray(self.bbox_lo, dtype=float)
        self.bbox_hi = np.asarray(self.bbox_hi, dtype=float)
        if np.any(self.bbox_lo > self.local_set.lo + 1e-12) or np.any(self.bbox_hi < self.local_set.hi - 1e-12):
            raise ValueError("bounding box must contain the local set")


def player_streams(master_seed: int, n_players: int) -> list[np.random.Generator]:
    """One counter-based (Philox) generator per player, keyed by (seed, player)."""
    return [
        np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), i])))
        for i in range(n_players)
    ]


@dataclass
class AugmentedSubproblem:
    """Data of one player's augmented best-response problem.

    Minimises ``E J_i(v; estimates) + phi @ v + |v - center|^2 / (2 tau)`` over
    the player's bounding box.  ``y`` is the player's full estimate vector
    (length ``n``); its own block is overwritten by the candidate ``v``.
    """

    player: int
    y: np.ndarray
    phi: np.ndarray
    center: np.ndarray
    tau: float
    lo: np.ndarray
    hi: np.ndarray


class Game:
    """Base class of an N-player game with shared affine coupling ``A x <= c``.

    Subclasses implement :meth:`sample_gradient` and, when available,
    :meth:`expected_gradient`.  Gradients take a player index ``i`` and that
    player's view ``y`` of the full decision vector (own block included).
    """

    name = "game"
    smooth = True

    def __init__(self, players: list[PlayerSpec], c):
        self.players = list(players)
        self.c = np.asarray(c, dtype=float).reshape(-1)
        self.N = len(self.players)
        self.dims = np.array([p.dim for p in self.players], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(np.int64)
        self.n = int(self.offsets[-1])
        self.m = self.c.size
        for p in self.players:
            if p.A.shape[0] != self.m:
                raise DimensionMismatch("coupling matrices must all have m rows")
        total = sum(p.c_share for p in self.players)
        if not np.allclose(total, self.c, rtol=0, atol=1e-12 * (1 + np.abs(self.c).max())):
            raise ValueError("resource shares must sum to c")
        self.A_full = np.hstack([p.A for p in self.players])

    # -- layout helpers ---------------------------------------------------
    def sl(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def split(self, x):
        return [x[self.sl(i)] for i in range(self.N)]

    # -- oracles ------------------------------------------------------------
    def expected_gradient(self, i: int, y: np.ndarray) -> np.ndarray:
        raise NoDeterministicOracle(f"{self.name} has no deterministic gradient")

    def sample_gradient(self, i: int, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @property
    def has_expected_gradient(self) -> bool:
        return type(self).expected_gradient is not Game.expected_gradient

    def pseudogradient(self, x):
        return np.concatenate([self.expected_gradient(i, x) for i in range(self.N)])

    def inner_lipschitz(self, i: int) -> float:
        """Lipschitz constant of ``v -> grad_i J_i(v; y^-i)`` (exact best responses)."""
        raise NoDeterministicOracle(f"{self.name} provides no Lipschitz bound")

    def project_local(self, i: int, v):
        return self.players[i].local_set.project(v)

    def projected_subgradient(self, sub: AugmentedSubproblem, T: int, rng) -> np.ndarray:
        """``T`` projected stochastic subgradient steps from ``sub.center``.

        Subclasses may override with a compiled kernel that consumes the
        player's stream identically.
        """
        v = sub.center.copy()
        for t in range(T):
            g = sample_subgradient(self, sub, v, rng)
            v = np.minimum(np.maximum(v - (2.0 * sub.tau / (t + 2)) * g, sub.lo), sub.hi)
        return v

    def params(self) -> dict:
        """Arrays/scalars identifying the instance (used for cache keys)."""
        return {"A": self.A_full, "c": self.c}

    def metadata(self) -> dict:
        return {"game": self.name}


def sample_subgradient(game: Game, sub: AugmentedSubproblem, v, rng) -> np.ndarray:
    """One scenario subgradient of the augmented objective at ``v``.

    Consumes exactly one scenario draw from ``rng``.
    """
    i = sub.player
    y = sub.y.copy()
    y[game.sl(i)] = v
    try:
        g = game.sample_gradient(i, y, rng)
    except (FloatingPointError, ValueError) as exc:
        raise OracleFailure(f"oracle of player {i} failed: {exc}") from exc
    return g + sub.phi + (v - sub.center) / sub.tau


def expected_subgradient(game: Game, sub: AugmentedSubproblem, v) -> np.ndarray:
    i = sub.player
    y = sub.y.copy()
    y[game.sl(i)] = v
    return game.expected_gradient(i, y) + sub.phi + (v - sub.center) / sub.tau


def exact_best_response(game: Game, sub: AugmentedSubproblem, tol=1e-12, max_iter=200_000):
    """Solve the augmented subproblem to ``tol`` with projected gradient steps.

    Only valid for smooth games exposing :meth:`Game.inner_lipschitz`.
    """
    if not game.smooth:
        raise NoDeterministicOracle("exact best responses need a smooth game")
    step = 1.0 / (game.inner_lipschitz(sub.player) + 1.0 / sub.tau)
    v = sub.center.copy()
    for _ in range(max_iter):
        v_new = np.minimum(np.maximum(v - step * expected_subgradient(game, sub, v), sub.lo), sub.hi)
        if np.max(np.abs(v_new - v)) <= tol:
            return v_new
        v = v_new
    raise MaxIterations("exact best response did not converge", best=v)


@dataclass
class OracleReport:
    """Statistical check of the scenario oracle.

    ``p_value`` is the Bonferroni-adjusted probability of the largest
    standardized deviation between the sample mean and the expected gradient;
    ``alpha`` and ``beta`` are the smallest constants (in the least-total
    sense) with ``E|g|^2 <= alpha^2 |x|^2 + beta^2`` at every probed point.
    """

    max_z: float
    p_value: float
    unbiased: bool
    alpha: float
    beta: float
    points: int
    draws: int

    def as_dict(self):
        return dict(self.__dict__)


def oracle_report(game: Game, sampler, points=10, draws=2000, seed=0, level=0.01) -> OracleReport:
    """Sample the oracle of every player at ``points`` consensus inputs."""
    from scipy.optimize import linprog
    from scipy.stats import norm

    if not game.has_expected_gradient:
        raise NoDeterministicOracle(f"{game.name} has no deterministic gradient to compare with")
    rng = np.random.default_rng(seed)
    streams = player_streams(seed, game.N)
    max_z, n_tests = 0.0, 0
    radii, moments = [], []
    for _ in range(points):
        x = sampler(rng)
        second = 0.0
        for i in range(game.N):
            G = np.stack([game.sample_gradient(i, x, streams[i]) for _ in range(draws)])
            mean = G.mean(axis=0)
            se = G.std(axis=0, ddof=1) / np.sqrt(draws)
            dev = np.abs(mean - game.expected_gradient(i, x))
            noisy = se > 0
            if np.any(dev[~noisy] > 1e-9 * (1 + np.abs(mean[~noisy]))):
                max_z = np.inf
            if noisy.any():
                max_z = max(max_z, float(np.max(dev[noisy] / se[noisy])))
            n_tests += int(noisy.sum())
            second += float(np.mean(np.sum(G**2, axis=1)))
        radii.append(float(x @ x))
        moments.append(second)
    p = min(1.0, 2.0 * norm.sf(max_z) * max(n_tests, 1)) if np.isfinite(max_z) else 0.0
    # minimise alpha^2 * mean(r^2) + beta^2 subject to the bound at every point
    r2 = np.array(radii)
    fit = linprog([r2.mean(), 1.0], A_ub=-np.column_stack([r2, np.ones_like(r2)]), b_ub=-np.array(moments), bounds=[(0, None)] * 2)
    a2, b2 = fit.x if fit.success else (0.0, max(moments))
    return OracleReport(float(max_z), float(p), bool(p > level), float(np.sqrt(a2)), float(np.sqrt(b2)), points, draws)
