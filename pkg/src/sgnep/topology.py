"""Seeded generators for communication graphs and synthetic road networks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import Delaunay

from .errors import InvalidNetworkFile
from .graph import TransportNetwork


def circle_plus_chords(N: int, n_chords: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Undirected ring ``0-1-...-(N-1)-0`` plus ``n_chords`` distinct random chords."""
    if N == 1:
        return []
    if N == 2:
        return [(0, 1)]
    edges = [(i, (i + 1) % N) for i in range(N)]
    present = {frozenset(e) for e in edges}
    candidates = [(j, i) for j in range(N) for i in range(j + 1, N) if frozenset((j, i)) not in present]
    k = min(n_chords, len(candidates))
    if k:
        pick = rng.choice(len(candidates), size=k, replace=False)
        edges += [candidates[p] for p in sorted(pick)]
    return edges


def complete_graph(N: int) -> list[tuple[int, int]]:
    return [(j, i) for j in range(N) for i in range(j + 1, N)]


def synthetic_road_network(n_nodes=29, n_roads=34, seed=0) -> TransportNetwork:
    """Random planar road map: Delaunay triangulation, its MST and the shortest extra edges.

    Each undirected road yields two directed edges of equal length, so the
    network has ``2 * n_roads`` directed edges.
    """
    rng = np.random.default_rng(seed)
    pts = rng.random((n_nodes, 2))
    tri = Delaunay(pts)
    cand = set()
    for s in tri.simplices:
        for a in range(3):
            for b in range(a + 1, 3):
                cand.add((min(s[a], s[b]), max(s[a], s[b])))
    cand = sorted(cand)
    if len(cand) < n_roads or n_roads < n_nodes - 1:
        raise ValueError("cannot build a connected planar network with that many roads")
    length = {e: float(np.linalg.norm(pts[e[0]] - pts[e[1]])) for e in cand}
    r, c = zip(*cand)
    W = coo_matrix(([length[e] for e in cand], (r, c)), shape=(n_nodes, n_nodes))
    mst = minimum_spanning_tree(W).tocoo()
    roads = {(min(a, b), max(a, b)) for a, b in zip(mst.row, mst.col)}
    for e in sorted(set(cand) - roads, key=lambda e: (length[e], e)):
        if len(roads) == n_roads:
            break
        roads.add(e)
    roads = sorted(roads)
    tails, heads, lens = [], [], []
    for a, b in roads:
        tails += [a, b]
        heads += [b, a]
        lens += [length[(a, b)]] * 2
    lens = np.array(lens)
    return TransportNetwork(
        n_nodes=n_nodes,
        tails=np.array(tails, dtype=np.int64),
        heads=np.array(heads, dtype=np.int64),
        length_ratio=lens / lens.max(),
        source=f"synthetic(seed={seed})",
    )


def read_network_file(path) -> TransportNetwork:
    """Parse ``"N_T E_T"`` then ``E_T`` lines ``"tail head length"`` (1-based nodes)."""
    path = Path(path)
    try:
        lines = [ln.split() for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise InvalidNetworkFile(f"cannot read {path}: {exc}") from exc
    try:
        n_nodes, n_edges = int(lines[0][0]), int(lines[0][1])
        rows = [(int(t), int(h), float(w)) for t, h, w in lines[1:]]
    except (IndexError, ValueError) as exc:
        raise InvalidNetworkFile(f"{path}: malformed line ({exc})") from exc
    if len(rows) != n_edges:
        raise InvalidNetworkFile(f"{path}: header announces {n_edges} edges, found {len(rows)}")
    t = np.array([r[0] for r in rows]) - 1
    h = np.array([r[1] for r in rows]) - 1
    w = np.array([r[2] for r in rows])
    if np.any(t < 0) or np.any(h < 0) or np.any(t >= n_nodes) or np.any(h >= n_nodes):
        raise InvalidNetworkFile(f"{path}: node label outside 1..{n_nodes}")
    if np.any(w <= 0):
        raise InvalidNetworkFile(f"{path}: road lengths must be positive")
    if np.any(t == h):
        raise InvalidNetworkFile(f"{path}: road connects a market to itself")
    return TransportNetwork(n_nodes, t.astype(np.int64), h.astype(np.int64), w / w.max(), source=str(path))


def write_network_file(net: TransportNetwork, path, scale=1.0) -> None:
    lines = [f"{net.n_nodes} {net.n_edges}"]
    lines += [f"{t + 1} {h + 1} {scale * r:.12g}" for t, h, r in zip(net.tails, net.heads, net.length_ratio)]
    Path(path).write_text("\n".join(lines) + "\n")
