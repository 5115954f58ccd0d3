"""Communication graphs and symmetric doubly stochastic mixing matrices.

A mixing matrix Q couples the per-round model exchange: row i gives the
weights client i applies to its neighbors' models. All builders return
matrices that are exactly symmetric, (doubly) stochastic to 1e-12, and
supported only on graph edges plus the diagonal. The spectral quantity

    rho = (max(|eig_2|, |eig_N|))^2

(the squared second-largest eigenvalue magnitude) governs how fast
Q^k approaches the uniform averaging matrix: ||Q^k - 11^T/N||^2 <= rho^k.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Graph",
    "MixingMatrix",
    "TopologyError",
    "AssumptionViolationWarning",
    "build_ring",
    "build_erdos_renyi",
    "build_mixing",
    "spectral_rho",
    "consensus_gap",
    "save_mixing_csv",
    "load_mixing_csv",
]

STOCHASTIC_TOL = 1e-12
MAX_RESAMPLES = 10_000


class TopologyError(ValueError):
    """Invalid or unbuildable topology (disconnected, bad parameters)."""


class AssumptionViolationWarning(UserWarning):
    """The mixing matrix has rho >= 1, so consensus decay does not hold."""


@dataclass(frozen=True)
class Graph:
    """Undirected communication graph; self-communication is implicit."""

    n_nodes: int
    edges: frozenset[tuple[int, int]]  # each stored as (lo, hi), lo < hi

    def __post_init__(self):
        for a, b in self.edges:
            if not (0 <= a < b < self.n_nodes):
                raise TopologyError(f"edge ({a},{b}) out of range for n={self.n_nodes}")

    def neighbors(self, i: int) -> list[int]:
        out = set()
        for a, b in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return sorted(out)

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def is_connected(self) -> bool:
        if self.n_nodes <= 1:
            return True
        adj = {i: self.neighbors(i) for i in range(self.n_nodes)}
        seen = {0}
        stack = [0]
        while stack:
            for j in adj[stack.pop()]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.n_nodes


@dataclass(frozen=True)
class MixingMatrix:
    """Symmetric doubly stochastic weights plus the cached spectral rho."""

    weights: np.ndarray
    rho: float
    graph: Graph = field(compare=False)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


def spectral_rho(weights: np.ndarray, warn: bool = True) -> float:
    """Squared largest eigenvalue magnitude after removing one eigenvalue 1.

    The leading eigenvalue of a doubly stochastic matrix is 1; it is removed
    exactly once (multiplicity beyond one indicates a disconnected graph and
    yields rho >= 1, which is flagged).
    """
    w = np.asarray(weights, dtype=float)
    eigs = np.linalg.eigvalsh(w)
    drop = int(np.argmin(np.abs(eigs - 1.0)))
    rest = np.delete(eigs, drop)
    rho = float(np.max(np.abs(rest)) ** 2) if rest.size else 0.0
    if warn and rho >= 1.0 - 1e-12:
        warnings.warn(
            f"mixing matrix violates the spectral assumption: rho={rho:.6g} >= 1",
            AssumptionViolationWarning,
            stacklevel=2,
        )
    return rho


def consensus_gap(weights: np.ndarray, k: int) -> float:
    """Squared spectral norm of Q^k - (1/N) 11^T (the consensus residual)."""
    w = np.asarray(weights, dtype=float)
    n = w.shape[0]
    qk = np.linalg.matrix_power(w, k)
    return float(np.linalg.norm(qk - np.full((n, n), 1.0 / n), 2) ** 2)


def _validate(weights: np.ndarray, graph: Graph) -> None:
    n = graph.n_nodes
    if weights.shape != (n, n):
        raise TopologyError("weight shape does not match graph size")
    if not np.array_equal(weights, weights.T):
        raise TopologyError("mixing weights must be exactly symmetric")
    if np.any(weights < 0):
        raise TopologyError("mixing weights must be nonnegative")
    rows = np.abs(weights.sum(axis=1) - 1.0)
    cols = np.abs(weights.sum(axis=0) - 1.0)
    if rows.max(initial=0.0) > STOCHASTIC_TOL or cols.max(initial=0.0) > STOCHASTIC_TOL:
        raise TopologyError("row/column sums deviate from 1 beyond 1e-12")
    edge_set = graph.edges
    for i in range(n):
        for j in range(i + 1, n):
            if weights[i, j] != 0.0 and (i, j) not in edge_set:
                raise TopologyError(f"nonzero weight on non-edge ({i},{j})")


def _finish(weights: np.ndarray, graph: Graph) -> MixingMatrix:
    _validate(weights, graph)
    rho = spectral_rho(weights)
    if rho >= 1.0:
        raise TopologyError(f"built matrix has rho={rho} >= 1")
    weights.setflags(write=False)
    return MixingMatrix(weights=weights, rho=rho, graph=graph)


def build_ring(n: int) -> MixingMatrix:
    """Ring of n nodes with weight 1/3 on self and each neighbor (n >= 3).

    n=1 is the trivial single node, n=2 uses uniform 1/2 weights.
    """
    if n < 1:
        raise TopologyError(f"need n >= 1, got {n}")
    if n == 1:
        return _finish(np.array([[1.0]]), Graph(1, frozenset()))
    if n == 2:
        return _finish(np.full((2, 2), 0.5), Graph(2, frozenset({(0, 1)})))
    edges = frozenset((min(i, (i + 1) % n), max(i, (i + 1) % n)) for i in range(n))
    w = np.zeros((n, n))
    for i in range(n):
        w[i, i] = 1.0 / 3.0
        w[i, (i + 1) % n] = 1.0 / 3.0
        w[i, (i - 1) % n] = 1.0 / 3.0
    return _finish(w, Graph(n, edges))


def build_erdos_renyi(n: int, p: float, seed: int) -> MixingMatrix:
    """G(n, p) resampled until connected, with Metropolis-Hastings weights.

    Q_ij = 1 / (1 + max(deg_i, deg_j)) on edges and the diagonal takes the
    slack, which makes the matrix symmetric doubly stochastic for any degree
    sequence. Deterministic for fixed (n, p, seed).
    """
    if n < 1:
        raise TopologyError(f"need n >= 1, got {n}")
    if not (0.0 < p <= 1.0):
        raise TopologyError(f"need 0 < p <= 1, got {p}")
    if n == 1:
        return _finish(np.array([[1.0]]), Graph(1, frozenset()))

    rng = np.random.default_rng(seed)
    graph = None
    for _ in range(MAX_RESAMPLES):
        mask = rng.random((n, n)) < p
        edges = frozenset(
            (i, j) for i in range(n) for j in range(i + 1, n) if mask[i, j]
        )
        cand = Graph(n, edges)
        if cand.is_connected():
            graph = cand
            break
    if graph is None:
        raise TopologyError(
            f"no connected G({n},{p}) in {MAX_RESAMPLES} resamples (seed={seed})"
        )

    deg = [graph.degree(i) for i in range(n)]
    w = np.zeros((n, n))
    for i, j in graph.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(n):
        w[i, i] = 1.0 - w[i].sum()
    return _finish(w, graph)


def build_mixing(spec: dict) -> MixingMatrix:
    """Build from a config mapping: {kind: ring|erdos_renyi, n, p?, seed?}."""
    kind = spec.get("kind")
    if kind == "ring":
        return build_ring(int(spec["n"]))
    if kind == "erdos_renyi":
        return build_erdos_renyi(int(spec["n"]), float(spec["p"]), int(spec.get("seed", 0)))
    raise TopologyError(f"unknown topology kind: {kind!r}")


def save_mixing_csv(mix: MixingMatrix, path) -> None:
    """Row-major CSV at full round-trip precision."""
    with open(path, "w") as fh:
        for row in mix.weights:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_mixing_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    return np.array(rows)
