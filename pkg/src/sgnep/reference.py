"""Centralised ground truth for the variational equilibrium.

Three routes:

* the exact active-set oracle for the quadratic test game;
* primal-dual extragradient on the KKT operator ``[F(x) + A'lam; c - Ax]``
  (generic, needs only a deterministic pseudogradient);
* for potential games, the convex potential minimised with an interior-point
  solver through cvxpy, certified afterwards by the same KKT residual.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MaxIterations
from .game import Game, project_polytope


@dataclass
class ReferenceSolution:
    x: np.ndarray
    lam: np.ndarray
    residual: float
    iterations: int
    method: str
    meta: dict = field(default_factory=dict)


def _project_all(game: Game, x, eps):
    out = np.empty_like(x)
    for i, p in enumerate(game.players):
        s = game.sl(i)
        ls = p.local_set
        out[s] = project_polytope(x[s], ls.lo, ls.hi, ls.G, ls.h, eps=eps, max_sweeps=200_000)
    return out


def kkt_residual(game: Game, x, lam, tol=1e-7) -> float:
    """Centralised KKT residual: normal-cone distances per player plus the multiplier row."""
    F = game.pseudogradient(x)
    g = F + game.A_full.T @ lam
    sq = 0.0
    for i, p in enumerate(game.players):
        s = game.sl(i)
        sq += p.local_set.normal_cone_distance(-g[s], x[s], tol) ** 2
    u = game.c - game.A_full @ x
    r = np.where(lam > tol, np.abs(u), np.maximum(-u, 0.0))
    sq += float(r @ r) + float(np.sum(np.minimum(lam, 0.0) ** 2))
    return float(np.sqrt(sq))


def natural_residual(game: Game, x, lam, eps=1e-12) -> float:
    """Norm of ``(x, lam) - P[(x, lam) - G(x, lam)]`` (zero exactly at KKT points)."""
    g = game.pseudogradient(x) + game.A_full.T @ lam
    rx = x - _project_all(game, x - g, eps)
    rl = lam - np.maximum(lam - (game.c - game.A_full @ x), 0.0)
    return float(np.sqrt(rx @ rx + rl @ rl))


def lipschitz_estimate(game: Game, trials=50, seed=0) -> float:
    """Sampled Lipschitz constant of the KKT operator."""
    from .operators import box_sampler, monotonicity_probe

    rep = monotonicity_probe(game, box_sampler(game), trials=trials, seed=seed)
    return rep.theta1 + float(np.linalg.norm(game.A_full, 2))


def solve_vi_extragradient(
    game: Game, step=None, tol=1e-8, max_iter=200_000, x0=None, lam0=None, eps_proj=1e-12, check_every=10
) -> ReferenceSolution:
    """Korpelevich extragradient on the KKT operator over ``X x R_+^m``.

    The default step is ``0.9 / L`` with ``L`` a sampled Lipschitz estimate;
    it is halved (up to 20 times) whenever the natural residual doubles.

    Raises
    ------
    MaxIterations
        ``best`` holds the best :class:`ReferenceSolution` found.
    """
    if step is None:
        step = 0.9 / lipschitz_estimate(game)
    x = _project_all(game, np.zeros(game.n) if x0 is None else np.asarray(x0, float), eps_proj)
    lam = np.zeros(game.m) if lam0 is None else np.maximum(np.asarray(lam0, float), 0.0)
    A, c = game.A_full, game.c
    res = natural_residual(game, x, lam, eps_proj)
    best = (res, x.copy(), lam.copy())
    last_check = res
    halvings = 0
    for it in range(1, max_iter + 1):
        gx = game.pseudogradient(x) + A.T @ lam
        xh = _project_all(game, x - step * gx, eps_proj)
        lh = np.maximum(lam - step * (c - A @ x), 0.0)
        gxh = game.pseudogradient(xh) + A.T @ lh
        x = _project_all(game, x - step * gxh, eps_proj)
        lam = np.maximum(lam - step * (c - A @ xh), 0.0)
        if it % check_every:
            continue
        res = natural_residual(game, x, lam, eps_proj)
        if res < best[0]:
            best = (res, x.copy(), lam.copy())
        if res <= tol:
            return ReferenceSolution(x, lam, kkt_residual(game, x, lam), it, "extragradient", {"natural_residual": res, "step": step})
        if res > 2 * last_check:
            if halvings == 20:
                break
            halvings += 1
            step *= 0.5
            x, lam = best[1].copy(), best[2].copy()
            res = best[0]
        last_check = res
    r, xb, lb = best
    sol = ReferenceSolution(xb, lb, kkt_residual(game, xb, lb), max_iter, "extragradient", {"natural_residual": r, "step": step})
    raise MaxIterations(f"extragradient stalled at natural residual {r:.3e}", best=sol)


def solve_potential(game: Game, tol=1e-9) -> ReferenceSolution:
    """Minimise the game's convex potential over ``X`` and ``A x <= c`` (potential games only)."""
    import cvxpy as cp

    if not hasattr(game, "potential_problem"):
        raise TypeError(f"{game.name} does not expose a potential")
    x = cp.Variable(game.n)
    objective, extra = game.potential_problem(x)
    cons = [game.A_full @ x <= game.c]
    for i, p in enumerate(game.players):
        s = game.sl(i)
        ls = p.local_set
        cons += [x[s] >= ls.lo, x[s] <= ls.hi]
        if ls.G is not None:
            cons.append(ls.G @ x[s] <= ls.h)
    prob = cp.Problem(cp.Minimize(objective), cons + extra)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, max_iter=500)
    if prob.status not in ("optimal", "optimal_inaccurate"):
        raise MaxIterations(f"potential minimisation ended with status {prob.status}")
    xv = np.asarray(x.value, float)
    lam = np.maximum(np.asarray(cons[0].dual_value, float), 0.0)
    if hasattr(game, "subdifferential_residual"):
        # a single subgradient selection cannot certify a point on a kink
        res = game.subdifferential_residual(xv, lam)
        meta = {"status": prob.status, "residual_kind": "subdifferential"}
    else:
        res = kkt_residual(game, xv, lam, tol=1e-6)
        meta = {"status": prob.status, "residual_kind": "gradient"}
    return ReferenceSolution(xv, lam, res, 0, "potential", meta)


def game_hash(game: Game, tol: float) -> str:
    h = hashlib.sha256()
    h.update(game.name.encode())
    for k, v in sorted(game.params().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(np.asarray(v, dtype=float)).tobytes())
    h.update(repr(float(tol)).encode())
    return h.hexdigest()[:24]


def reference_solution(game: Game, tol=1e-8, cache_dir=None, method="auto") -> ReferenceSolution:
    """Ground truth for ``game``, cached under ``cache_dir`` keyed by (game hash, tol).

    ``method``: ``"auto"`` picks the exact oracle for quadratic games, the
    potential route (polished by extragradient when its residual exceeds
    ``tol``) when available, and extragradient otherwise.
    """
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"ref-{game_hash(game, tol)}-{method}.npz"
        if path.exists():
            d = np.load(path, allow_pickle=False)
            meta = json.loads(str(d["meta"]))
            return ReferenceSolution(d["x"], d["lam"], float(d["residual"]), int(d["iterations"]), str(d["method"]), meta)
    if method == "auto":
        if game.name == "quadratic":
            method = "oracle"
        elif hasattr(game, "potential_problem"):
            method = "potential"
        else:
            method = "extragradient"
    if method == "oracle":
        from .games.quadratic import quadratic_nash_oracle

        x, lam = quadratic_nash_oracle(game)
        sol = ReferenceSolution(x, lam, kkt_residual(game, x, lam), 0, "oracle")
    elif method == "potential":
        sol = solve_potential(game)
        if game.has_expected_gradient and game.smooth and sol.residual > tol:
            try:
                polished = solve_vi_extragradient(game, tol=tol, x0=sol.x, lam0=sol.lam)
            except MaxIterations as exc:
                polished = exc.best
            if polished.residual < sol.residual:
                polished.method = "potential+extragradient"
                sol = polished
    elif method == "extragradient":
        sol = solve_vi_extragradient(game, tol=tol)
    else:
        raise ValueError(f"unknown reference method {method!r}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path, x=sol.x, lam=sol.lam, residual=sol.residual, iterations=sol.iterations,
            method=sol.method, meta=json.dumps(sol.meta, default=float),
        )
    return sol
