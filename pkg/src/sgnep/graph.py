"""Communication and transport graphs.

Node indices are 0-based.  An edge ``(j, i)`` has tail ``j`` and head ``i``;
column ``e`` of the communication incidence matrix carries ``+1`` at the tail
and ``-1`` at the head, so ``L = B @ B.T`` regardless of orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, Disconnected, DuplicateEdge, SelfLoop, GraphError


@dataclass(frozen=True)
class CommGraph:
    """Undirected, connected communication graph among ``N`` players."""

    N: int
    edges: tuple[tuple[int, int], ...]
    B: np.ndarray = field(repr=False)
    L: np.ndarray = field(repr=False)
    in_neighbors: tuple[tuple[int, ...], ...] = field(repr=False)
    out_neighbors: tuple[tuple[int, ...], ...] = field(repr=False)
    degree: np.ndarray = field(repr=False)

    @property
    def E(self) -> int:
        return len(self.edges)

    @property
    def tails(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=np.int64)

    @property
    def heads(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=np.int64)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.in_neighbors[i]) | set(self.out_neighbors[i])))

    def sigma1(self) -> float:
        """Smallest positive eigenvalue of the Laplacian."""
        if self.N == 1:
            return 0.0
        ev = np.linalg.eigvalsh(self.L.astype(float))
        return float(ev[1])


def _connected(N, edges):
    adj = [[] for _ in range(N)]
    for j, i in edges:
        adj[j].append(i)
        adj[i].append(j)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == N


def build_comm_graph(edges, N: int) -> CommGraph:
    """Validate an edge list and assemble incidence/Laplacian tables.

    Parameters
    ----------
    edges : iterable of (int, int)
        Ordered pairs ``(tail, head)`` with 0-based node indices.  Edge ``e``
        becomes column ``e`` of ``B`` (insertion order is preserved).
    N : int
        Number of nodes.

    Raises
    ------
    SelfLoop, DuplicateEdge, Disconnected, GraphError
    """
    if N < 1:
        raise GraphError("graph needs at least one node")
    edges = tuple((int(j), int(i)) for j, i in edges)
    seen = set()
    for j, i in edges:
        if not (0 <= j < N and 0 <= i < N):
            raise GraphError(f"edge ({j}, {i}) has a node outside [0, {N})")
        if j == i:
            raise SelfLoop(f"self-loop at node {i}")
        key = frozenset((j, i))
        if key in seen:
            raise DuplicateEdge(f"edge ({j}, {i}) given twice (orientation ignored)")
        seen.add(key)
    if not _connected(N, edges):
        raise Disconnected("communication graph is not connected")

    E = len(edges)
    B = np.zeros((N, E), dtype=np.int64)
    ins = [[] for _ in range(N)]
    outs = [[] for _ in range(N)]
    for e, (j, i) in enumerate(edges):
        B[j, e] = 1
        B[i, e] = -1
        outs[j].append(i)
        ins[i].append(j)
    L = B @ B.T
    B.setflags(write=False)
    L.setflags(write=False)
    degree = np.diag(L).copy()
    degree.setflags(write=False)
    return CommGraph(
        N=N,
        edges=edges,
        B=B,
        L=L,
        in_neighbors=tuple(tuple(x) for x in ins),
        out_neighbors=tuple(tuple(x) for x in outs),
        degree=degree,
    )


def kron_apply(M, block_dim: int, v: np.ndarray) -> np.ndarray:
    """Return ``(M kron I_block_dim) @ v`` without forming the Kronecker product.

    ``v`` may be flat (length ``cols(M) * block_dim``) or already shaped
    ``(cols(M), block_dim)``; the result has the same layout as the input.
    """
    v = np.asarray(v)
    rows, cols = M.shape
    if v.ndim == 1:
        if v.size != cols * block_dim:
            raise DimensionMismatch(
                f"vector of length {v.size} does not match {cols} blocks of size {block_dim}"
            )
        return np.asarray(M @ v.reshape(cols, block_dim)).reshape(-1)
    if v.shape != (cols, block_dim):
        raise DimensionMismatch(f"expected shape {(cols, block_dim)}, got {v.shape}")
    return np.asarray(M @ v)


@dataclass(frozen=True)
class TransportNetwork:
    """Directed road network over markets.

    Flow convention: column ``k`` of ``B`` has ``-1`` at the tail market and
    ``+1`` at the head market, so ``B @ u`` is the net inflow at each market.
    """

    n_nodes: int
    tails: np.ndarray
    heads: np.ndarray
    length_ratio: np.ndarray  # road length / longest road, in (0, 1]
    source: str = "synthetic"

    def __post_init__(self):
        t, h = np.asarray(self.tails), np.asarray(self.heads)
        if np.any(t == h):
            raise GraphError("a road must connect two distinct markets")
        r = np.asarray(self.length_ratio)
        if np.any(r <= 0) or np.any(r > 1 + 1e-12):
            raise GraphError("road length ratios must lie in (0, 1]")

    @property
    def n_edges(self) -> int:
        return len(self.tails)

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((self.n_nodes, self.n_edges))
        cols = np.arange(self.n_edges)
        B[self.tails, cols] = -1.0
        B[self.heads, cols] = 1.0
        return B

    def B_sparse(self):
        return sp.csr_matrix(self.B)
