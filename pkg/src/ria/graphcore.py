"""Attributed graph data model, validation and structural queries.

Graphs are simple and undirected.  Edges are stored once, as ``(u, v)`` with
``u < v``; features are a dense ``num_nodes x feature_dim`` float64 matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


def _norm_edge(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    num_nodes: int
    edges: frozenset
    features: np.ndarray

    @classmethod
    def build(cls, num_nodes: int, edges: Iterable[Sequence[int]] = (),
              features=None, feature_dim: int = 0) -> "AttributedGraph":
        """Normalize edge pairs and feature storage; performs no validation."""
        es = frozenset(_norm_edge(int(u), int(v)) for u, v in edges)
        if features is None:
            features = np.zeros((num_nodes, feature_dim))
        features = np.array(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1) if features.size else features.reshape(num_nodes, 0)
        features.setflags(write=False)
        return cls(int(num_nodes), es, features)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1]) if self.features.ndim == 2 else 0

    def with_features(self, features) -> "AttributedGraph":
        return AttributedGraph.build(self.num_nodes, self.edges, features)

    def with_edges(self, edges) -> "AttributedGraph":
        return AttributedGraph.build(self.num_nodes, edges, self.features)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def neighbors(self) -> list[list[int]]:
        """Adjacency list keyed by node."""
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.sorted_edges():
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int8)
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1
        return a

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttributedGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes and self.edges == other.edges
                and self.features.shape == other.features.shape
                and bool(np.array_equal(self.features, other.features)))

    def __hash__(self) -> int:
        return hash((self.num_nodes, self.edges, self.features.shape, self.features.tobytes()))


@dataclass(frozen=True)
class LabeledGraph:
    graph: AttributedGraph
    label: int
    env: int


@dataclass(frozen=True)
class EnvDataset:
    samples: tuple
    num_classes: int
    env_ids: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        envs = tuple(sorted({s.env for s in self.samples}))
        if self.env_ids and tuple(self.env_ids) != envs:
            raise ValueError(f"env_ids {self.env_ids} do not match samples {envs}")
        object.__setattr__(self, "env_ids", envs)
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[LabeledGraph]:
        return iter(self.samples)

    @property
    def feature_dim(self) -> int:
        return self.samples[0].graph.feature_dim if self.samples else 0

    def by_env(self) -> dict[int, list[LabeledGraph]]:
        out: dict[int, list[LabeledGraph]] = {e: [] for e in self.env_ids}
        for s in self.samples:
            out[s.env].append(s)
        return out

    def subset(self, envs: Iterable[int]) -> "EnvDataset":
        keep = set(envs)
        return EnvDataset(tuple(s for s in self.samples if s.env in keep), self.num_classes)


def validate(graph: AttributedGraph) -> str | None:
    """Return ``None`` when ``graph`` is well formed, else the first violation.

    Violations are returned as data: ``"node count"``, ``"self-loop"``,
    ``"endpoint range"``, ``"duplicate edge"``, ``"row count"``, ``"non-finite feature"``.
    """
    if graph.num_nodes < 0:
        return "node count"
    seen = set()
    for e in graph.edges:
        u, v = e
        if u == v:
            return "self-loop"
        if not (0 <= u < graph.num_nodes and 0 <= v < graph.num_nodes):
            return "endpoint range"
        key = _norm_edge(u, v)
        if key in seen:
            return "duplicate edge"
        seen.add(key)
    x = graph.features
    if x.ndim != 2 or x.shape[0] != graph.num_nodes:
        return "row count"
    if not np.all(np.isfinite(x)):
        return "non-finite feature"
    return None


def degree(graph: AttributedGraph, v: int) -> int:
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node {v} out of range for {graph.num_nodes} nodes")
    return sum(1 for e in graph.edges if v in e)


def degrees(graph: AttributedGraph) -> np.ndarray:
    deg = np.zeros(graph.num_nodes, dtype=np.int64)
    for u, v in graph.edges:
        deg[u] += 1
        deg[v] += 1
    return deg


def max_degree(graph: AttributedGraph) -> int:
    if graph.num_nodes < 1:
        raise ValueError("max_degree of an empty graph is undefined")
    return int(degrees(graph).max())


def permute(graph: AttributedGraph, perm: Sequence[int]) -> AttributedGraph:
    """Relabel node ``v`` as ``perm[v]``; feature row ``v`` moves to row ``perm[v]``."""
    perm = np.asarray(perm, dtype=np.int64)
    n = graph.num_nodes
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("perm is not a bijection on the node set")
    feats = np.empty_like(graph.features)
    feats[perm] = graph.features
    edges = [(int(perm[u]), int(perm[v])) for u, v in graph.edges]
    return AttributedGraph.build(n, edges, feats)


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def induced_subgraph(graph: AttributedGraph, nodes: Sequence[int]) -> AttributedGraph:
    """Subgraph on ``nodes``, relabelled ``0..len(nodes)-1`` in the given order."""
    index = {int(v): i for i, v in enumerate(nodes)}
    if len(index) != len(nodes) or any(not 0 <= v < graph.num_nodes for v in index):
        raise ValueError("malformed node set")
    edges = [(index[u], index[v]) for u, v in graph.edges if u in index and v in index]
    return AttributedGraph.build(len(nodes), edges, graph.features[list(index)])


# -- JSON lines --------------------------------------------------------------

def to_json_record(sample: LabeledGraph) -> dict:
    g = sample.graph
    return {"n": g.num_nodes, "edges": [list(e) for e in g.sorted_edges()],
            "x": g.features.tolist(), "y": int(sample.label), "env": int(sample.env)}


def from_json_record(rec: dict) -> LabeledGraph:
    n = int(rec["n"])
    edges = [tuple(e) for e in rec["edges"]]
    for e in edges:
        if len(e) != 2 or e[0] >= e[1]:
            raise ValueError(f"edge {list(e)} must be a pair [u, v] with u < v")
    if len(set(edges)) != len(edges):
        raise ValueError("invalid graph: duplicate edge")
    x = np.asarray(rec["x"], dtype=np.float64)
    if x.ndim != 2 and x.size == 0:
        x = x.reshape(n, 0)
    g = AttributedGraph(n, frozenset((int(u), int(v)) for u, v in edges), x)
    problem = validate(g)
    if problem:
        raise ValueError(f"invalid graph: {problem}")
    return LabeledGraph(AttributedGraph.build(n, g.edges, x), int(rec["y"]), int(rec["env"]))


def write_jsonl(samples: Iterable[LabeledGraph], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(to_json_record(s)) + "\n")


def read_jsonl(path, num_classes: int | None = None) -> EnvDataset:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(from_json_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if num_classes is None:
        num_classes = max((s.label for s in samples), default=0) + 1
    return EnvDataset(tuple(samples), num_classes)
