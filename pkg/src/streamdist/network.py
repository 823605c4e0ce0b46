"""Graph topologies, consensus matrices, and simulated aggregation.

The network is static and undirected.  Mixing weights follow the
Metropolis-Hastings rule, which yields a symmetric doubly stochastic matrix
with positive diagonal on any connected graph; a uniform rule (1/(k+1) on
every edge and the diagonal) is available for regular graphs as a
sensitivity alternative.

Two aggregation primitives are provided: ``all_reduce`` (exact averaging;
every node ends up with the bit-identical mean) and ``consensus`` (R
synchronous rounds of v <- A v, which contracts the deviation from the mean
by |lambda_2(A)| per round).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import networkx as nx
import numpy as np

TOPOLOGY_KINDS = ("star", "ring", "complete", "k_regular_random")
_RESAMPLE_BUDGET = 64


class GraphBuildError(RuntimeError):
    """Raised when a random topology cannot be realized within the retry budget."""


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Connected topology plus its doubly stochastic mixing matrix."""

    nodes: int
    edges: tuple[tuple[int, int], ...]
    weights: np.ndarray = field(repr=False)
    lambda2: float

    def degree(self, n: int) -> int:
        return sum(1 for e in self.edges if n in e)


def _edge_set(kind: str, nodes: int, k: int | None, seed: int | None) -> list[tuple[int, int]]:
    if kind == "star":
        return [(0, i) for i in range(1, nodes)]
    if kind == "ring":
        if nodes == 2:
            return [(0, 1)]
        return [(i, (i + 1) % nodes) for i in range(nodes)]
    if kind == "complete":
        return [(i, j) for i in range(nodes) for j in range(i + 1, nodes)]
    if kind == "k_regular_random":
        if k is None:
            raise ValueError("k_regular_random requires k")
        if k >= nodes or (k * nodes) % 2 != 0:
            raise ValueError(f"invalid regular graph parameters k={k}, N={nodes}")
        base = 0 if seed is None else int(seed)
        for attempt in range(_RESAMPLE_BUDGET):
            g = nx.random_regular_graph(k, nodes, seed=base + attempt)
            if nx.is_connected(g):
                return sorted(tuple(sorted(e)) for e in g.edges())
        raise GraphBuildError(f"no connected {k}-regular graph on {nodes} nodes "
                              f"within {_RESAMPLE_BUDGET} resamples")
    raise ValueError(f"unknown topology kind {kind!r}")


def _weight_matrix(nodes: int, edges: list[tuple[int, int]], rule: str) -> np.ndarray:
    deg = np.zeros(nodes, dtype=np.int64)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    w = np.zeros((nodes, nodes), dtype=np.float64)
    if rule == "metropolis":
        for a, b in edges:
            w[a, b] = w[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
    elif rule == "uniform":
        if np.any(deg != deg[0]):
            raise ValueError("uniform weights require a regular graph")
        for a, b in edges:
            w[a, b] = w[b, a] = 1.0 / (deg[0] + 1.0)
    else:
        raise ValueError(f"unknown weight rule {rule!r}")
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return w


def build_topology(kind: str, nodes: int, k: int | None = None,
                   seed: int | None = None, weight_rule: str = "metropolis") -> NetworkModel:
    """Construct a connected topology with doubly stochastic mixing weights.

    Random regular graphs are resampled (deterministically from the seed)
    until connected, up to a budget of 64 attempts.  lambda2 is the magnitude
    of the second-largest-by-magnitude eigenvalue, computed by a dense
    symmetric eigendecomposition; all experiment networks are small.
    """
    if nodes < 2:
        raise ValueError("need at least 2 nodes")
    edges = _edge_set(kind, nodes, k, seed)
    weights = _weight_matrix(nodes, edges, weight_rule)
    eigs = np.linalg.eigvalsh(weights)
    lambda2 = float(max(abs(eigs[0]), abs(eigs[-2])))
    if lambda2 >= 1.0:
        raise GraphBuildError("mixing matrix is not contracting; graph may be disconnected")
    return NetworkModel(nodes=nodes, edges=tuple(edges), weights=weights, lambda2=lambda2)


def consensus_round(net: NetworkModel, vecs: np.ndarray) -> np.ndarray:
    """One synchronous mixing round v_n <- sum_m a_nm v_m on (N, d) state."""
    return net.weights @ vecs


def consensus(net: NetworkModel, vecs: np.ndarray, rounds: int) -> np.ndarray:
    """R mixing rounds; R = 0 returns the input unchanged."""
    if rounds < 0:
        raise ValueError("rounds must be nonnegative")
    out = vecs
    for _ in range(rounds):
        out = net.weights @ out
    return out


def _pairwise_sum(rows: np.ndarray) -> np.ndarray:
    """Balanced pairwise summation over the leading axis, order-stable."""
    n = rows.shape[0]
    if n == 1:
        return rows[0]
    half = (n + 1) // 2
    return _pairwise_sum(rows[:half]) + _pairwise_sum(rows[half:])


def all_reduce(vecs: np.ndarray) -> np.ndarray:
    """Exact averaging: every node receives the same mean vector.

    The mean is computed once via pairwise summation and broadcast, so the
    result is bit-identical on every node.
    """
    vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
    mean = _pairwise_sum(vecs) / vecs.shape[0]
    return np.broadcast_to(mean, vecs.shape).copy()
