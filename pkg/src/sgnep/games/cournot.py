"""Stochastic Nash-Cournot distribution game over a road network.

Firm ``i`` chooses road shipments ``u_i`` (one per directed road) and
production ``v_i`` at its factories; ``A_i x_i = B_T u_i + E_i v_i`` is the
commodity it places on each market.  Its scenario cost is

    x_i' Q_i x_i + C_t(u_i) + C_p(v_i) - (w - Sigma A x + xi)' A_i x_i

with ``C(s) = coef * (s - 1 + 1/(1+s))`` per road or factory and
``xi ~ U[-noise, noise]`` per market.  Markets share the caps ``A x <= c``.
"""

from __future__ import annotations

from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp

from ..game import Game, LocalSet, PlayerSpec
from ..graph import TransportNetwork
from ..topology import circle_plus_chords, read_network_file, synthetic_road_network

FACTORY_NODES = (8, 14, 21, 10, 29)  # 1-based market labels, one factory per firm


@numba.njit(cache=True)
def _apply_A(tails, heads, fac, x, out):
    """``out = B_T u + E v`` with flow convention (-1 at tail, +1 at head)."""
    out[:] = 0.0
    n_roads = tails.size
    for k in range(n_roads):
        out[tails[k]] -= x[k]
        out[heads[k]] += x[k]
    for f in range(fac.size):
        out[fac[f]] += x[n_roads + f]


@numba.njit(cache=True)
def _cournot_inner(v0, q_diag, coef, tails, heads, fac, base, S_ptr, S_idx, S_val, phi, center, tau, lo, hi, xi):
    # base = w - Sigma @ (others' total); (Sigma + Sigma^T) in CSR form
    n_roads = tails.size
    n_nodes = base.size
    d = v0.size
    v = v0.copy()
    g = np.empty(d)
    q = np.empty(n_nodes)
    own = np.empty(n_nodes)
    for t in range(xi.shape[0]):
        kap = 2.0 * tau / (t + 2.0)
        _apply_A(tails, heads, fac, v, own)
        for r in range(n_nodes):
            s = 0.0
            for p in range(S_ptr[r], S_ptr[r + 1]):
                s += S_val[p] * own[S_idx[p]]
            q[r] = base[r] + xi[t, r] - s
        for k in range(n_roads):
            a = 1.0 + v[k]
            g[k] = coef[k] * (1.0 - 1.0 / (a * a)) - (q[heads[k]] - q[tails[k]])
        for f in range(fac.size):
            k = n_roads + f
            a = 1.0 + v[k]
            g[k] = coef[k] * (1.0 - 1.0 / (a * a)) - q[fac[f]]
        for k in range(d):
            gk = g[k] + 2.0 * q_diag[k] * v[k] + phi[k] + (v[k] - center[k]) / tau
            x = v[k] - kap * gk
            v[k] = min(max(x, lo[k]), hi[k])
    return v


class CournotGame(Game):
    name = "cournot"
    smooth = True

    def __init__(self, network: TransportNetwork, factories, capacities, q_diags, kappa, w, Sigma, c, noise=2.0):
        self.network = network
        self.factories = [np.asarray(f, dtype=np.int64) for f in factories]
        self.capacities = [np.asarray(b, dtype=float) for b in capacities]
        self.q_diags = [np.asarray(q, dtype=float) for q in q_diags]
        self.kappa = [np.asarray(k, dtype=float) for k in kappa]
        self.w = np.asarray(w, dtype=float)
        self.noise = float(noise)
        self.eta_roads = 8.0 * np.asarray(network.length_ratio, dtype=float)
        Sigma = np.asarray(Sigma, dtype=float)
        self.sigma_symmetric = bool(np.allclose(Sigma, Sigma.T))
        if not self.sigma_symmetric:
            Sigma = 0.5 * (Sigma + Sigma.T)
        self.Sigma = Sigma
        self.sigma_min_eig = float(np.linalg.eigvalsh(Sigma)[0])
        self.sigma_pd = self.sigma_min_eig > 0
        B_T = network.B
        E = network.n_edges
        c = np.asarray(c, dtype=float)
        players = []
        for i, fac in enumerate(self.factories):
            Ei = np.zeros((network.n_nodes, fac.size))
            Ei[fac, np.arange(fac.size)] = 1.0
            A_i = np.hstack([B_T, Ei])
            b = self.capacities[i]
            lo = np.zeros(E + fac.size)
            hi = np.concatenate([np.full(E, b.sum()), b])
            ls = LocalSet(lo, hi, -A_i, np.zeros(network.n_nodes))
            players.append(PlayerSpec(E + fac.size, A_i, c / len(self.factories), ls))
        super().__init__(players, c)
        S2 = sp.csr_matrix(self.Sigma + self.Sigma.T)
        self._S2 = (S2.indptr.astype(np.int64), S2.indices.astype(np.int64), S2.data.astype(float))
        self._tails = np.asarray(network.tails, dtype=np.int64)
        self._heads = np.asarray(network.heads, dtype=np.int64)

    def coef(self, i):
        return np.concatenate([self.eta_roads, self.kappa[i]])

    def _usage(self, y):
        return self.A_full @ y

    def expected_gradient(self, i, y):
        return cournot_subgradient(self, i, y, np.zeros(self.m))

    def sample_gradient(self, i, y, rng):
        xi = rng.uniform(-self.noise, self.noise, self.m)
        return cournot_subgradient(self, i, y, xi)

    def pseudogradient(self, x):
        return np.concatenate([self.expected_gradient(i, x) for i in range(self.N)])

    def inner_lipschitz(self, i):
        A_i = self.players[i].A
        lo = self.players[i].bbox_lo
        curv = 2.0 * self.coef(i) / (1.0 + lo) ** 3
        return float(2 * self.q_diags[i].max() + curv.max() + np.linalg.norm(A_i.T @ (self.Sigma + self.Sigma.T) @ A_i, 2))

    def projected_subgradient(self, sub, T, rng):
        i = sub.player
        s = self.sl(i)
        y = sub.y.copy()
        y[s] = 0.0
        base = self.w - self.Sigma @ (self.A_full @ y)
        xi = rng.uniform(-self.noise, self.noise, (T, self.m))
        ptr, idx, val = self._S2
        return _cournot_inner(
            sub.center, self.q_diags[i], self.coef(i), self._tails, self._heads, self.factories[i],
            base, ptr, idx, val, sub.phi, sub.center, sub.tau, sub.lo, sub.hi, xi,
        )

    def potential_problem(self, x):
        """Convex potential (``Sigma`` is symmetric, so the game is a potential game)."""
        import cvxpy as cp

        S = cp.psd_wrap(self.Sigma)
        terms = [-self.w @ (self.A_full @ x), 0.5 * cp.quad_form(self.A_full @ x, S)]
        for i, p in enumerate(self.players):
            xi = x[self.sl(i)]
            coef = self.coef(i)
            terms += [
                cp.sum(cp.multiply(self.q_diags[i], cp.square(xi))),
                coef @ xi - coef.sum() + coef @ cp.inv_pos(1 + xi),
                0.5 * cp.quad_form(p.A @ xi, S),
            ]
        return sum(terms), []

    def params(self):
        return {
            "A": self.A_full, "c": self.c, "w": self.w, "Sigma": self.Sigma,
            "Q": np.concatenate(self.q_diags), "b": np.concatenate(self.capacities),
            "eta": self.eta_roads, "kappa": np.concatenate(self.kappa),
        }

    def metadata(self):
        return {
            "game": self.name,
            "network": self.network.source,
            "markets": self.network.n_nodes,
            "roads": self.network.n_edges,
            "sigma_symmetric": self.sigma_symmetric,
            "sigma_symmetrized": not self.sigma_symmetric,
            "sigma_positive_definite": self.sigma_pd,
            "sigma_min_eig": self.sigma_min_eig,
            "noise": self.noise,
        }


def cournot_subgradient(game: CournotGame, i: int, y, xi):
    """Scenario gradient of firm ``i``'s cost at the full decision vector ``y``."""
    s = game.sl(i)
    x_i = y[s]
    A_i = game.players[i].A
    own = A_i @ x_i
    total = game.A_full @ y
    price = game.w - game.Sigma @ total + xi
    return (
        2.0 * game.q_diags[i] * x_i
        + game.coef(i) * (1.0 - (1.0 + x_i) ** -2)
        - A_i.T @ price
        + A_i.T @ (game.Sigma.T @ own)
    )


def cournot_cost(game: CournotGame, i: int, y, xi):
    """Scenario cost of firm ``i`` (used by finite-difference checks)."""
    s = game.sl(i)
    x_i = y[s]
    own = game.players[i].A @ x_i
    price = game.w - game.Sigma @ (game.A_full @ y) + xi
    coef = game.coef(i)
    return float(x_i @ (game.q_diags[i] * x_i) + coef @ (x_i - 1.0 + 1.0 / (1.0 + x_i)) - price @ own)


def sigma_from_network(net: TransportNetwork) -> np.ndarray:
    Sigma = np.eye(net.n_nodes)
    for t, h, r in zip(net.tails, net.heads, net.length_ratio):
        Sigma[t, h] = 0.3 * (1.0 - r)
    return Sigma


def build_paper_cournot(seed: int = 0, network_file=None, n_firms=5, noise=2.0, cap=4.0):
    """Five-firm instance on a 29-market road map.

    Falls back to a seeded synthetic map of the same size when
    ``network_file`` is absent; the game's metadata records which was used.
    The communication edges (ring plus two random chords) are stored as
    ``game.comm_edges``.
    """
    rng = np.random.default_rng(seed)
    substituted = False
    if network_file is not None and Path(network_file).exists():
        net = read_network_file(network_file)
    else:
        net = synthetic_road_network(29, 34, seed=seed)
        substituted = True
    if max(FACTORY_NODES[:n_firms]) > net.n_nodes:
        raise ValueError("network has fewer markets than the factory labels require")
    factories = [[FACTORY_NODES[i] - 1] for i in range(n_firms)]
    capacities = [rng.uniform(10, 14, 1) for _ in range(n_firms)]
    q_diags = [rng.uniform(2, 3, net.n_edges + 1) for _ in range(n_firms)]
    kappa = [np.full(1, 2.0) for _ in range(n_firms)]
    w = rng.uniform(26, 30, net.n_nodes)
    game = CournotGame(net, factories, capacities, q_diags, kappa, w, sigma_from_network(net), np.full(net.n_nodes, cap), noise)
    game.comm_edges = circle_plus_chords(n_firms, 2, rng)
    game.network_substituted = substituted
    return game
