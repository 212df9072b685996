"""Stacked primal-dual state, the design matrix and the KKT operator residual.

The stacked iterate is ``psi = [y; lam; mu; z]`` where player ``i`` holds an
estimate ``y_i`` of the full decision vector and a multiplier copy ``lam_i``,
and every communication edge carries consensus duals ``mu_e`` and ``z_e``.
Blocks are stored as matrices (one row per player or per edge).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, LinAlgError
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, spsolve

from .errors import DimensionMismatch, NotPositiveDefinite
from .game import Game, player_streams
from .graph import CommGraph

DENSE_LIMIT = 5000


@dataclass
class StackState:
    Y: np.ndarray  # (N, n)
    Lam: np.ndarray  # (N, m)
    M: np.ndarray  # (E, n)
    Z: np.ndarray  # (E, m)

    @classmethod
    def zeros(cls, N, n, m, E):
        return cls(np.zeros((N, n)), np.zeros((N, m)), np.zeros((E, n)), np.zeros((E, m)))

    @classmethod
    def from_flat(cls, v, N, n, m, E):
        v = np.asarray(v, dtype=float)
        sizes = [N * n, N * m, E * n, E * m]
        if v.size != sum(sizes):
            raise DimensionMismatch(f"flat state has length {v.size}, expected {sum(sizes)}")
        parts = np.split(v, np.cumsum(sizes)[:-1])
        return cls(parts[0].reshape(N, n), parts[1].reshape(N, m), parts[2].reshape(E, n), parts[3].reshape(E, m))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.Y.ravel(), self.Lam.ravel(), self.M.ravel(), self.Z.ravel()])

    def copy(self) -> "StackState":
        return StackState(self.Y.copy(), self.Lam.copy(), self.M.copy(), self.Z.copy())

    def _zip(self, other, f):
        return StackState(f(self.Y, other.Y), f(self.Lam, other.Lam), f(self.M, other.M), f(self.Z, other.Z))

    def __add__(self, other):
        return self._zip(other, np.add)

    def __sub__(self, other):
        return self._zip(other, np.subtract)

    def __rmul__(self, s):
        return StackState(s * self.Y, s * self.Lam, s * self.M, s * self.Z)

    @property
    def size(self) -> int:
        return self.Y.size + self.Lam.size + self.M.size + self.Z.size


class SelectionMap:
    """Extraction ``R_i`` of player ``i``'s own block from a full decision vector."""

    def __init__(self, dims):
        self.dims = np.asarray(dims, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.dims)]).astype(np.int64)
        self.n = int(self.offsets[-1])

    def sl(self, i) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def extract(self, i, y):
        return y[self.sl(i)]

    def embed(self, i, v):
        out = np.zeros(self.n)
        out[self.sl(i)] = v
        return out

    def local_blocks(self, Y):
        """``R @ y`` for the stacked estimates ``Y`` (one row per player)."""
        return np.concatenate([Y[i, self.sl(i)] for i in range(len(self.dims))])

    def matrix(self, i):
        return np.eye(self.n)[self.sl(i)]


@dataclass
class SplittingConfig:
    rho_mu: float
    rho_z: float
    tau1: np.ndarray  # per player
    tau2: np.ndarray  # per player
    tau3: np.ndarray  # per edge
    tau4: np.ndarray  # per edge
    sigma1: float = float("nan")

    @classmethod
    def uniform(cls, graph: CommGraph, rho_mu, rho_z, tau1, tau2, tau3, tau4):
        N, E = graph.N, graph.E
        return cls(
            float(rho_mu),
            float(rho_z),
            np.full(N, float(tau1)),
            np.full(N, float(tau2)),
            np.full(E, float(tau3)),
            np.full(E, float(tau4)),
            graph.sigma1(),
        )


def assumption6_step_sizes(graph: CommGraph, game: Game, rho_mu, rho_z, safety=0.99) -> SplittingConfig:
    """Step sizes from the diagonal-dominance (Gershgorin) bounds, scaled by ``safety``."""
    if not 0 < safety < 1:
        raise ValueError("safety must lie in (0, 1)")
    d = graph.degree.astype(float)
    a1 = np.array([np.abs(p.A).sum(axis=0).max() for p in game.players])  # max column sum
    ainf = np.array([np.abs(p.A).sum(axis=1).max() for p in game.players])  # max row sum
    return SplittingConfig(
        float(rho_mu),
        float(rho_z),
        safety / (0.5 * a1 + (0.5 + rho_mu) * d),
        safety / (0.5 * ainf + (0.5 + rho_z) * d),
        np.full(graph.E, safety),
        np.full(graph.E, safety),
        graph.sigma1(),
    )


def _local_embedding(game: Game) -> sp.csr_matrix:
    """Sparse ``Lambda R``: maps stacked ``y`` (Nn) to ``[A_i y_i^i]_i`` (Nm)."""
    N, n, m = game.N, game.n, game.m
    blocks = []
    for i, p in enumerate(game.players):
        row = sp.lil_matrix((m, N * n))
        start = i * n + int(game.offsets[i])
        row[:, start : start + p.dim] = p.A
        blocks.append(row.tocsr())
    return sp.vstack(blocks).tocsr()


class PhiOperator:
    """Design matrix of the preconditioned splitting, plus its norm and PD certificate."""

    def __init__(self, matrix: sp.csr_matrix, shape_info, min_eig: float, method: str):
        self.matrix = matrix
        self.shape_info = shape_info  # (N, n, m, E)
        self.min_eig = min_eig
        self.method = method

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, v):
        if isinstance(v, StackState):
            return StackState.from_flat(self.matrix @ v.flat(), *self.shape_info)
        return self.matrix @ v

    def norm(self, v) -> float:
        f = v.flat() if isinstance(v, StackState) else np.asarray(v)
        return float(np.sqrt(max(f @ (self.matrix @ f), 0.0)))


def phi_matrix(graph: CommGraph, game: Game, cfg: SplittingConfig) -> sp.csr_matrix:
    N, E, n, m = graph.N, graph.E, game.n, game.m
    B = sp.csr_matrix(graph.B.astype(float))
    L = sp.csr_matrix(graph.L.astype(float))
    In, Im = sp.identity(n), sp.identity(m)
    LR = _local_embedding(game)
    Bn, Bm = sp.kron(B, In), sp.kron(B, Im)
    t1 = sp.diags(np.repeat(1.0 / np.asarray(cfg.tau1), n))
    t2 = sp.diags(np.repeat(1.0 / np.asarray(cfg.tau2), m))
    t3 = sp.diags(np.repeat(1.0 / np.asarray(cfg.tau3), n))
    t4 = sp.diags(np.repeat(1.0 / np.asarray(cfg.tau4), m))
    blocks = [
        [t1 - 0.5 * cfg.rho_mu * sp.kron(L, In), -0.5 * LR.T, -0.5 * Bn, None],
        [-0.5 * LR, t2 - 0.5 * cfg.rho_z * sp.kron(L, Im), None, -0.5 * Bm],
        [-0.5 * Bn.T, None, t3, None],
        [None, -0.5 * Bm.T, None, t4],
    ]
    if E == 0:
        blocks = [row[:2] for row in blocks[:2]]
    return sp.bmat(blocks, format="csr")


def build_phi(graph: CommGraph, game: Game, cfg: SplittingConfig) -> PhiOperator:
    """Assemble the design matrix and certify positive definiteness.

    Dense Cholesky below ``DENSE_LIMIT`` unknowns, otherwise a Lanczos estimate
    of the smallest eigenvalue.

    Raises
    ------
    NotPositiveDefinite
    """
    P = phi_matrix(graph, game, cfg)
    info = (graph.N, game.n, game.m, graph.E)
    if P.shape[0] < DENSE_LIMIT:
        D = P.toarray()
        try:
            cho_factor(D, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise NotPositiveDefinite("design matrix is not positive definite (Cholesky failed)") from exc
        min_eig = float(np.linalg.eigvalsh(D)[0]) if P.shape[0] <= 1500 else float("nan")
        return PhiOperator(P, info, min_eig, "cholesky")
    try:
        lam = eigsh(P, k=1, which="SA", return_eigenvectors=False, tol=1e-8, maxiter=20 * P.shape[0])[0]
    except ArpackNoConvergence as exc:
        raise NotPositiveDefinite("could not certify the design matrix (Lanczos did not converge)") from exc
    if lam <= 0:
        raise NotPositiveDefinite(f"design matrix has eigenvalue {lam:.3e} <= 0")
    return PhiOperator(P, info, float(lam), "lanczos")


def extended_pseudogradient(game: Game, Y, mode="deterministic", rngs=None) -> np.ndarray:
    """Stack of each player's own-block gradient evaluated at its own estimate ``Y[i]``."""
    out = []
    for i in range(game.N):
        if mode == "deterministic":
            out.append(game.expected_gradient(i, Y[i]))
        elif mode == "sampled":
            if rngs is None:
                raise ValueError("sampled mode needs per-player generators")
            out.append(game.sample_gradient(i, Y[i], rngs[i]))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return np.concatenate(out)


def _orthant_residual(u, lam, tol):
    """Distance of ``-u`` to the normal cone of the nonnegative orthant at ``lam``."""
    r = np.where(lam > tol, np.abs(u), np.maximum(-u, 0.0))
    return float(np.hypot(np.linalg.norm(r), np.linalg.norm(np.minimum(lam, 0.0))))


def operator_T_residual(psi: StackState, game: Game, graph: CommGraph, cfg: SplittingConfig, tol=1e-7) -> float:
    """Norm of the minimal-norm element of ``T(psi)``, row by row.

    Row one uses the local set's normal cone on each player's own block (the
    estimate blocks are unconstrained); row two uses the orthant normal cone.
    """
    Y, Lam, M, Z = psi.Y, psi.Lam, psi.M, psi.Z
    B = graph.B.astype(float)
    L = graph.L.astype(float)
    F = extended_pseudogradient(game, Y)
    V = cfg.rho_mu * (L @ Y) + B @ M
    r1sq = 0.0
    for i, p in enumerate(game.players):
        s = game.sl(i)
        v = V[i].copy()
        v[s] += F[s] + p.A.T @ Lam[i]
        own = p.local_set.normal_cone_distance(-v[s], Y[i, s], tol)
        v[s] = 0.0
        r1sq += own**2 + v @ v
    U = cfg.rho_z * (L @ Lam) + B @ Z
    r2sq = 0.0
    for i, p in enumerate(game.players):
        u = U[i] - p.A @ Y[i, game.sl(i)] + p.c_share
        r2sq += _orthant_residual(u, Lam[i], tol) ** 2
    r3 = np.linalg.norm(B.T @ Y)
    r4 = np.linalg.norm(B.T @ Lam)
    return float(np.sqrt(r1sq + r2sq + r3**2 + r4**2))


def kkt_fixed_point(game: Game, graph: CommGraph, cfg: SplittingConfig, phi: PhiOperator, x_star, lam_star):
    """Zero ``psi*`` of the operator and the matching fixed point of the reflected composition.

    Requires ``x_star`` strictly inside every player's bounding box so the box
    normal cone contributes nothing.
    """
    N, E, n, m = graph.N, graph.E, game.n, game.m
    x_star = np.asarray(x_star, float)
    lam_star = np.asarray(lam_star, float)
    Bf = graph.B.astype(float)
    viol = (game.A_full @ x_star - game.c) / N
    rhs = np.stack([p.A @ x_star[game.sl(i)] - p.c_share - viol for i, p in enumerate(game.players)])
    Z = np.linalg.lstsq(Bf, rhs, rcond=None)[0] if E else np.zeros((0, m))
    psi = StackState(np.tile(x_star, (N, 1)), np.tile(lam_star, (N, 1)), np.zeros((E, n)), Z)
    # a = D psi + [R^T F(y); c_i; 0; 0] is the selection of A(psi) with zero box normal
    D = _d_apply(psi, game, graph, cfg)
    F = extended_pseudogradient(game, psi.Y)
    for i in range(N):
        D.Y[i, game.sl(i)] += F[game.sl(i)]
        D.Lam[i] += game.players[i].c_share
    a = D.flat()
    shift = spsolve(phi.matrix.tocsc(), a)
    psi_tilde = StackState.from_flat(psi.flat() + shift, N, n, m, E)
    return psi, psi_tilde


def _d_apply(psi: StackState, game: Game, graph: CommGraph, cfg: SplittingConfig) -> StackState:
    B = graph.B.astype(float)
    L = graph.L.astype(float)
    RY = np.zeros_like(psi.Y)
    for i, p in enumerate(game.players):
        RY[i, game.sl(i)] = p.A.T @ psi.Lam[i]
    LRy = np.stack([p.A @ psi.Y[i, game.sl(i)] for i, p in enumerate(game.players)])
    return StackState(
        0.5 * cfg.rho_mu * (L @ psi.Y) + 0.5 * RY + 0.5 * (B @ psi.M),
        -0.5 * LRy + 0.5 * cfg.rho_z * (L @ psi.Lam) + 0.5 * (B @ psi.Z),
        -0.5 * (B.T @ psi.Y),
        -0.5 * (B.T @ psi.Lam),
    )


@dataclass
class ProbeReport:
    eta: float  # strong monotonicity estimate (min ratio)
    theta1: float  # Lipschitz estimate of the pseudogradient
    theta2: float  # Lipschitz estimate of the extended pseudogradient
    min_monotonicity_gap: float
    rho_mu_bound: float
    rho_mu_ok: bool | None
    trials: int

    def as_dict(self):
        return dict(self.__dict__)


def box_sampler(game: Game, use_bbox=False):
    """Sampler of decision vectors uniform on the product of local (or bounding) boxes."""
    lo = np.concatenate([p.bbox_lo if use_bbox else p.local_set.lo for p in game.players])
    hi = np.concatenate([p.bbox_hi if use_bbox else p.local_set.hi for p in game.players])

    def sample(rng):
        return lo + (hi - lo) * rng.random(lo.size)

    return sample


def local_set_sampler(game: Game):
    """Sampler of points of the product of local sets (box samples projected)."""
    base = box_sampler(game)

    def sample(rng):
        x = base(rng)
        return np.concatenate([game.project_local(i, x[game.sl(i)]) for i in range(game.N)])

    return sample


def monotonicity_probe(game: Game, sampler, trials=200, seed=0, graph: CommGraph | None = None, rho_mu=None):
    """Sampled strong-monotonicity and Lipschitz estimates of the pseudogradient.

    ``theta2`` is estimated on random estimate stacks ``Y`` built from
    independent samples per player.  The condition on ``rho_mu`` is evaluated
    with the estimates when a graph and ``rho_mu`` are supplied.
    """
    rng = np.random.default_rng(seed)
    eta, th1, th2, gap = np.inf, 0.0, 0.0, np.inf
    for _ in range(trials):
        x, xp = sampler(rng), sampler(rng)
        d = x - xp
        nd2 = d @ d
        if nd2 == 0:
            continue
        dF = game.pseudogradient(x) - game.pseudogradient(xp)
        ip = d @ dF
        eta = min(eta, ip / nd2)
        gap = min(gap, ip)
        th1 = max(th1, np.linalg.norm(dF) / np.sqrt(nd2))
        Y = np.stack([sampler(rng) for _ in range(game.N)])
        Yp = np.stack([sampler(rng) for _ in range(game.N)])
        dY = np.linalg.norm(Y - Yp)
        if dY > 0:
            th2 = max(th2, np.linalg.norm(extended_pseudogradient(game, Y) - extended_pseudogradient(game, Yp)) / dY)
    bound, ok = float("nan"), None
    if graph is not None and eta > 0:
        s1 = graph.sigma1()
        bound = (2.0 / s1) * ((th1 + th2) ** 2 / (4 * eta) + th2)
        if rho_mu is not None:
            ok = bool(rho_mu >= bound)
    return ProbeReport(float(eta), float(th1), float(th2), float(gap), float(bound), ok, trials)


__all__ = [
    "StackState",
    "SelectionMap",
    "SplittingConfig",
    "PhiOperator",
    "assumption6_step_sizes",
    "build_phi",
    "phi_matrix",
    "extended_pseudogradient",
    "operator_T_residual",
    "kkt_fixed_point",
    "monotonicity_probe",
    "box_sampler",
    "local_set_sampler",
    "player_streams",
]
