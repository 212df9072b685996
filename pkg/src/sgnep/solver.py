"""Distributed Douglas-Rachford iteration with inexact stochastic best responses.

One major iteration consists of four communication phases followed by a
Krasnoselskii-Mann averaging step:

1. players: update estimates, solve the augmented best response inexactly,
   update multipliers, reflect;
2. edges: update consensus duals from the reflected neighbour differences;
3. players: projected backward step on decisions and multipliers;
4. edges: backward step on consensus duals.

Every phase reads only the outputs of the previous phase, so the result does
not depend on the order in which players or edges are processed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import MaxIterations, RunFailed, SgnepError
from .game import AugmentedSubproblem, Game, exact_best_response, player_streams
from .graph import CommGraph
from .operators import PhiOperator, SplittingConfig, StackState, build_phi


@dataclass(frozen=True)
class Schedules:
    """Relaxation ``gamma(k)`` and inner step count ``T(k)`` for ``k = 1, 2, ...``.

    ``gamma(k) = gamma`` (constant) or ``1 / k**a`` (power);
    ``T(k) = T`` (constant) or ``ceil(scale * k**b) + floor`` (power).
    """

    gamma_kind: str = "constant"
    gamma: float = 0.5
    a: float = 0.0
    T_kind: str = "power"
    T: int = 20
    b: float = 2.1
    scale: float = 1e-4
    floor: int = 20

    def __post_init__(self):
        if self.gamma_kind not in ("constant", "power"):
            raise ValueError(f"unknown gamma schedule {self.gamma_kind!r}")
        if self.T_kind not in ("constant", "power"):
            raise ValueError(f"unknown inner-step schedule {self.T_kind!r}")
        if self.gamma_kind == "constant" and not 0 < self.gamma < 1:
            raise ValueError("constant gamma must lie in (0, 1)")
        if self.gamma_kind == "power" and not 0 < self.a <= 1:
            raise ValueError("power gamma needs 0 < a <= 1")
        if self.T_kind == "constant" and self.T < 1:
            raise ValueError("T must be at least 1")
        if self.T_kind == "power" and (self.scale <= 0 or self.b < 0 or self.floor < 0):
            raise ValueError("power inner-step schedule needs scale > 0, b >= 0, floor >= 0")

    def gamma_at(self, k: int) -> float:
        return self.gamma if self.gamma_kind == "constant" else 1.0 / k**self.a

    def T_at(self, k: int) -> int:
        if self.T_kind == "constant":
            return int(self.T)
        return max(1, int(math.ceil(self.scale * k**self.b)) + int(self.floor))

    @property
    def exponents(self) -> tuple[float, float]:
        a = 0.0 if self.gamma_kind == "constant" else self.a
        b = 0.0 if self.T_kind == "constant" else self.b
        return a, b

    @property
    def summable(self) -> bool:
        """Whether ``gamma(k) / sqrt(T(k))`` is summable (power families: ``a + b/2 > 1``)."""
        a, b = self.exponents
        return a + b / 2 > 1

    def describe(self) -> str:
        g = f"gamma={self.gamma}" if self.gamma_kind == "constant" else f"gamma=1/k^{self.a}"
        t = f"T={self.T}" if self.T_kind == "constant" else f"T=ceil({self.scale}*k^{self.b})+{self.floor}"
        return f"{g}, {t}"


def kappa(tau: float, t: int) -> float:
    """Inner step size ``2 tau / (t + 2)`` at inner step ``t = 0, 1, ...``."""
    return 2.0 * tau / (t + 2)


def inner_solve(game: Game, sub: AugmentedSubproblem, T_steps: int, rng) -> np.ndarray:
    """``T_steps`` projected stochastic subgradient steps started at the proximal center."""
    if T_steps < 1:
        raise ValueError("inner solver needs at least one step")
    return game.projected_subgradient(sub, int(T_steps), rng)


@dataclass
class Context:
    """Per-run constants shared by the phase functions."""

    game: Game
    graph: CommGraph
    cfg: SplittingConfig
    B: np.ndarray = field(init=False)
    L: np.ndarray = field(init=False)

    def __post_init__(self):
        self.B = self.graph.B.astype(float)
        self.L = self.graph.L.astype(float)
        self.tau1 = np.asarray(self.cfg.tau1, float)[:, None]
        self.tau2 = np.asarray(self.cfg.tau2, float)[:, None]
        self.tau3 = np.asarray(self.cfg.tau3, float)[:, None]
        self.tau4 = np.asarray(self.cfg.tau4, float)[:, None]
        self.C = np.stack([p.c_share for p in self.game.players])

    def own_usage(self, Y):
        """Rows ``A_i y_i^i``."""
        g = self.game
        return np.stack([p.A @ Y[i, g.sl(i)] for i, p in enumerate(g.players)])

    def dual_embed(self, Lam):
        """Rows with ``A_i^T lam_i`` in player ``i``'s own block, zeros elsewhere."""
        g = self.game
        out = np.zeros((g.N, g.n))
        for i, p in enumerate(g.players):
            out[i, g.sl(i)] = p.A.T @ Lam[i]
        return out


def forward_player_phase(ctx: Context, st: StackState, T_list, rngs, exact=False):
    """Resolvent of the first operator on the player blocks.

    Returns ``(Y, Lam, Y_hat, Lam_hat)``.  ``T_list[i]`` inner steps are spent
    on player ``i``; with ``exact=True`` the best response is solved to 1e-12.
    """
    g, cfg = ctx.game, ctx.cfg
    LY = ctx.L @ st.Y
    BM = ctx.B @ st.M
    Y = st.Y - 0.5 * ctx.tau1 * (cfg.rho_mu * LY + BM)
    for i, p in enumerate(g.players):
        s = g.sl(i)
        phi = 0.5 * (p.A.T @ st.Lam[i] + BM[i, s] + cfg.rho_mu * LY[i, s])
        sub = AugmentedSubproblem(i, Y[i], phi, st.Y[i, s].copy(), float(cfg.tau1[i]), p.bbox_lo, p.bbox_hi)
        if exact:
            Y[i, s] = exact_best_response(g, sub)
        else:
            Y[i, s] = inner_solve(g, sub, T_list[i], rngs[i])
    half_own = ctx.own_usage(Y) - 0.5 * ctx.own_usage(st.Y)
    Lam = st.Lam + ctx.tau2 * (half_own - 0.5 * cfg.rho_z * (ctx.L @ st.Lam) - 0.5 * (ctx.B @ st.Z) - ctx.C)
    return Y, Lam, 2 * Y - st.Y, 2 * Lam - st.Lam


def edge_forward(M_t, Z_t, dY_hat, dLam_hat, tau3, tau4):
    """Edge duals from reflected differences ``dY_hat = B^T Y_hat`` (one row per edge).

    Returns ``(M, M_hat, Z, Z_hat)``.
    """
    tau3 = np.asarray(tau3, float).reshape(-1, 1)
    tau4 = np.asarray(tau4, float).reshape(-1, 1)
    M = M_t + 0.5 * tau3 * dY_hat
    Z = Z_t + 0.5 * tau4 * dLam_hat
    return M, 2 * M - M_t, Z, 2 * Z - Z_t


def backward_player_phase(ctx: Context, Y_hat, Lam_hat, M_hat, Z_hat):
    """Resolvent of the second operator on the player blocks: returns ``(Y_bar, Lam_bar)``."""
    g, cfg = ctx.game, ctx.cfg
    Y_bar = Y_hat - 0.5 * ctx.tau1 * (ctx.dual_embed(Lam_hat) + cfg.rho_mu * (ctx.L @ Y_hat) + ctx.B @ M_hat)
    for i in range(g.N):
        s = g.sl(i)
        Y_bar[i, s] = g.project_local(i, Y_bar[i, s])
    arg = (
        Lam_hat
        + ctx.tau2
        * (ctx.own_usage(Y_bar) - 0.5 * ctx.own_usage(Y_hat) - 0.5 * cfg.rho_z * (ctx.L @ Lam_hat) - 0.5 * (ctx.B @ Z_hat))
    )
    return Y_bar, np.maximum(arg, 0.0)


def edge_backward(M_hat, Z_hat, dY_bar, dY_hat, dLam_bar, dLam_hat, tau3, tau4):
    """Returns ``(M_bar, Z_bar)``."""
    tau3 = np.asarray(tau3, float).reshape(-1, 1)
    tau4 = np.asarray(tau4, float).reshape(-1, 1)
    return M_hat + tau3 * (dY_bar - 0.5 * dY_hat), Z_hat + tau4 * (dLam_bar - 0.5 * dLam_hat)


def km_update(psi_tilde: StackState, psi_bar: StackState, psi: StackState, gamma: float) -> StackState:
    """``psi_tilde + 2 gamma (psi_bar - psi)``."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    return psi_tilde + (2.0 * gamma) * (psi_bar - psi)


@dataclass
class IterationSnapshot:
    k: int
    psi_tilde: StackState
    psi: StackState
    psi_hat: StackState
    psi_bar: StackState
    psi_tilde_next: StackState
    inner_steps: np.ndarray


def iterate(ctx: Context, st: StackState, k: int, schedules: Schedules, rngs, exact=False, T_override=None):
    """One major iteration from ``st``; returns an :class:`IterationSnapshot`."""
    N = ctx.game.N
    T = np.full(N, schedules.T_at(k) if T_override is None else T_override, dtype=np.int64)
    Y, Lam, Y_hat, Lam_hat = forward_player_phase(ctx, st, T, rngs, exact)
    Bt = ctx.B.T
    dY_hat, dLam_hat = Bt @ Y_hat, Bt @ Lam_hat
    M, M_hat, Z, Z_hat = edge_forward(st.M, st.Z, dY_hat, dLam_hat, ctx.cfg.tau3, ctx.cfg.tau4)
    Y_bar, Lam_bar = backward_player_phase(ctx, Y_hat, Lam_hat, M_hat, Z_hat)
    M_bar, Z_bar = edge_backward(M_hat, Z_hat, Bt @ Y_bar, dY_hat, Bt @ Lam_bar, dLam_hat, ctx.cfg.tau3, ctx.cfg.tau4)
    psi = StackState(Y, Lam, M, Z)
    psi_hat = StackState(Y_hat, Lam_hat, M_hat, Z_hat)
    psi_bar = StackState(Y_bar, Lam_bar, M_bar, Z_bar)
    nxt = km_update(st, psi_bar, psi, schedules.gamma_at(k))
    return IterationSnapshot(k, st, psi, psi_hat, psi_bar, nxt, np.zeros(N, np.int64) if exact else T)


METRIC_COLUMNS = (
    "k",
    "dist_rel_ref",
    "dist_rel_init",
    "step",
    "step_phi",
    "step_rel",
    "consensus_y",
    "consensus_lam",
    "violation",
    "inner_steps",
)


def consensus_metric(X) -> float:
    """Sum over coordinates of the population standard deviation across rows."""
    return float(np.sqrt(np.mean((X - X.mean(axis=0)) ** 2, axis=0)).sum())


def compute_metrics(ctx: Context, snap: IterationSnapshot, x_ref, d0, phi: PhiOperator | None) -> dict:
    Y_bar = snap.psi_bar.Y
    rec = {"k": snap.k}
    if x_ref is not None:
        d = float(np.mean(np.linalg.norm(Y_bar - x_ref, axis=1)))
        nref = float(np.linalg.norm(x_ref))
        rec["dist_rel_ref"] = d / nref if nref > 0 else d
        rec["dist_rel_init"] = d / d0 if d0 > 0 else d
    else:
        rec["dist_rel_ref"] = rec["dist_rel_init"] = float("nan")
    diff = snap.psi_tilde_next - snap.psi_tilde
    f = diff.flat()
    rec["step"] = float(np.linalg.norm(f))
    rec["step_phi"] = phi.norm(f) if phi is not None else float("nan")
    base = float(np.linalg.norm(snap.psi_tilde.flat()))
    rec["step_rel"] = rec["step"] / base if base > 0 else rec["step"]
    rec["consensus_y"] = consensus_metric(Y_bar)
    rec["consensus_lam"] = consensus_metric(snap.psi_bar.Lam)
    x = np.concatenate([Y_bar[i, ctx.game.sl(i)] for i in range(ctx.game.N)])
    rec["violation"] = float(np.linalg.norm(np.maximum(ctx.game.A_full @ x - ctx.game.c, 0.0)))
    rec["inner_steps"] = int(snap.inner_steps.sum())
    return rec


@dataclass
class RunResult:
    records: list[dict]
    psi_tilde: StackState
    last: IterationSnapshot | None
    stopped_early: bool
    wall_time: float
    game: Game | None = None

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def decisions(self) -> np.ndarray:
        """Own blocks of the last backward step (a feasible joint decision)."""
        g = self.game
        Y = self.last.psi_bar.Y
        return np.concatenate([Y[i, g.sl(i)] for i in range(g.N)])


def initial_state(game: Game, graph: CommGraph, x0=None) -> StackState:
    st = StackState.zeros(graph.N, game.n, game.m, graph.E)
    if x0 is not None:
        st.Y[:] = np.asarray(x0, float)
    return st


def run(
    game: Game,
    graph: CommGraph,
    cfg: SplittingConfig,
    schedules: Schedules,
    K: int,
    seed: int,
    x_ref=None,
    psi0: StackState | None = None,
    exact: bool = False,
    phi: PhiOperator | None = None,
    early_stop_tol: float | None = None,
    patience: int = 50,
    callback=None,
) -> RunResult:
    """Run ``K`` major iterations; deterministic given ``seed``.

    Metrics are evaluated on the output of the backward step, whose decision
    blocks are feasible for the local sets.

    Raises
    ------
    RunFailed
        Any solver error; ``partial`` holds the :class:`RunResult` so far.
    """
    if graph.N != game.N:
        raise ValueError("graph and game disagree on the number of players")
    if phi is None:
        phi = build_phi(graph, game, cfg)
    ctx = Context(game, graph, cfg)
    rngs = player_streams(seed, game.N)
    st = psi0.copy() if psi0 is not None else initial_state(game, graph)
    x_ref = None if x_ref is None else np.asarray(x_ref, float)
    d0 = float(np.mean(np.linalg.norm(st.Y - x_ref, axis=1))) if x_ref is not None else float("nan")
    records: list[dict] = []
    snap = None
    calm = 0
    t0 = time.perf_counter()
    result = RunResult(records, st, None, False, 0.0, game)
    for k in range(1, K + 1):
        try:
            snap = iterate(ctx, st, k, schedules, rngs, exact)
        except (SgnepError, FloatingPointError, np.linalg.LinAlgError) as exc:
            result.psi_tilde, result.wall_time = st, time.perf_counter() - t0
            raise RunFailed(f"iteration {k} failed: {exc}", partial=result) from exc
        rec = compute_metrics(ctx, snap, x_ref, d0, phi)
        records.append(rec)
        st = snap.psi_tilde_next
        result.psi_tilde, result.last = st, snap
        if callback is not None:
            callback(rec, snap)
        if early_stop_tol is not None:
            calm = calm + 1 if rec["step"] < early_stop_tol else 0
            if calm >= patience:
                result.stopped_early = True
                break
    result.wall_time = time.perf_counter() - t0
    return result
