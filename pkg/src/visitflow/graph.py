"""Spatial graphs and graph-convolution propagation.

A :class:`SpatialGraph` stores undirected weighted edges in both
directions. :func:`normalize_symmetric` turns it into the dense propagation
matrix ``D^-1/2 (A + I) D^-1/2`` used by :func:`gcn_forward`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, matmul, relu, transpose

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class Node:
    id: str
    latitude: float
    longitude: float


@dataclass
class SpatialGraph:
    """Nodes with coordinates and symmetric, non-negative edge weights.

    ``edges`` maps ``(i, j)`` index pairs to weights; both directions are
    always present.
    """

    nodes: list[Node]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids must be unique")
        n = len(self.nodes)
        for (i, j), w in list(self.edges.items()):
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
            if self.edges.get((j, i), w) != w:
                raise ValueError(f"edge ({i}, {j}) is not symmetric")
            self.edges[(j, i)] = w

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def add_edge(self, i: int, j: int, weight: float = 1.0) -> None:
        if i == j:
            return
        self.edges[(i, j)] = float(weight)
        self.edges[(j, i)] = float(weight)

    def degree(self, i: int) -> int:
        return sum(1 for (a, _) in self.edges if a == i)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for (i, j), w in self.edges.items():
            a[i, j] = w
        return a

    def fingerprint(self) -> str:
        """Stable hash of the node list and its edges."""
        h = hashlib.sha256()
        for node in self.nodes:
            h.update(f"{node.id}|{node.latitude!r}|{node.longitude!r}\n".encode())
        for (i, j) in sorted(self.edges):
            h.update(f"{i},{j},{self.edges[(i, j)]!r}\n".encode())
        return h.hexdigest()

    def permuted(self, order: Sequence[int]) -> "SpatialGraph":
        """Graph whose node ``k`` is this graph's node ``order[k]``."""
        inverse = {old: new for new, old in enumerate(order)}
        g = SpatialGraph([self.nodes[o] for o in order])
        for (i, j), w in self.edges.items():
            g.edges[(inverse[i], inverse[j])] = w
        return g


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometres; accepts numpy broadcasting."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def build_knn_graph(nodes: Iterable[Node], k: int = 4) -> SpatialGraph:
    """Connect each node to its ``k`` nearest neighbours, symmetrized by union.

    Distance ties are broken by node position in ``nodes``. All weights are 1.
    """
    nodes = list(nodes)
    n = len(nodes)
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < N, got k={k} with N={n}")
    lat = np.array([nd.latitude for nd in nodes], dtype=float)
    lon = np.array([nd.longitude for nd in nodes], dtype=float)
    if not (np.isfinite(lat).all() and np.isfinite(lon).all()):
        raise ValueError("coordinates must be finite")
    dist = haversine_km(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    graph = SpatialGraph(nodes)
    for i in range(n):
        d = dist[i].copy()
        d[i] = np.inf
        for j in np.argsort(d, kind="stable")[:k]:
            graph.add_edge(i, int(j))
    return graph


def read_edge_file(path, nodes: Sequence[Node]) -> SpatialGraph:
    """Load ``from_id,to_id,weight`` lines (no header) into a graph over ``nodes``."""
    index = {nd.id: i for i, nd in enumerate(nodes)}
    graph = SpatialGraph(list(nodes))
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected from_id,to_id,weight")
        a, b, w = parts[0].strip(), parts[1].strip(), float(parts[2])
        if a not in index or b not in index:
            raise ValueError(f"{path}:{lineno}: unknown node id")
        if w < 0:
            raise ValueError(f"{path}:{lineno}: negative edge weight")
        graph.add_edge(index[a], index[b], w)
    return graph


def write_edge_file(graph: SpatialGraph, path) -> None:
    lines = [
        f"{graph.nodes[i].id},{graph.nodes[j].id},{w!r}"
        for (i, j), w in sorted(graph.edges.items())
        if i < j
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass(frozen=True)
class NormalizedAdjacency:
    matrix: np.ndarray
    fingerprint: str

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def normalize_symmetric(graph: SpatialGraph) -> NormalizedAdjacency:
    """Return ``D^-1/2 (A + I) D^-1/2`` with ``D_ii = sum_j (A + I)_ij``."""
    if graph.n == 0:
        raise ValueError("graph has no nodes")
    a = graph.adjacency()
    if (a < 0).any():
        raise ValueError("edge weights must be non-negative")
    a_hat = a + np.eye(graph.n)
    d = 1.0 / np.sqrt(a_hat.sum(axis=1))
    m = d[:, None] * a_hat * d[None, :]
    m = 0.5 * (m + m.T)
    return NormalizedAdjacency(m, graph.fingerprint())


class GcnLayer:
    """One propagation step ``act(norm @ H @ W)``."""

    def __init__(self, weight: Parameter, activation: str = "relu"):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        if weight.ndim != 2:
            raise ShapeError(f"GCN weight must be 2-D, got {weight.shape}")
        self.weight = weight
        self.activation = activation

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]


def gcn_forward(h: Tensor, norm: NormalizedAdjacency, layer: GcnLayer) -> Tensor:
    """Propagate node features ``h`` of shape ``(..., N, F_in)`` through one layer.

    Leading axes of ``h`` (e.g. weeks) are treated as independent graph
    signals sharing the same adjacency.
    """
    if h.ndim < 2 or h.shape[-2] != norm.n:
        raise ShapeError(f"features {h.shape} do not match a graph of {norm.n} nodes")
    if h.shape[-1] != layer.in_features:
        raise ShapeError(f"features {h.shape} do not match weight {layer.weight.shape}")
    hw = matmul(h, layer.weight)
    adj = Tensor(norm.matrix)
    if hw.ndim == 2:
        out = matmul(adj, hw)
    else:
        # (A X)^T = X^T A^T keeps the adjacency as the shared right operand
        out = transpose(matmul(transpose(hw), Tensor(norm.matrix.T)))
    return relu(out) if layer.activation == "relu" else out
