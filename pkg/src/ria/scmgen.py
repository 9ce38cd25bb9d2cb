"""Synthetic graph data from a structural causal model.

Every sample is a causal graph joined to a spurious graph by one bridge edge.
Labels are computed from the causal part only, so anything done to the
spurious part (or to node features, for topology labelers) leaves the label
unchanged.

Motif shapes:

* house: 4-cycle 0-1-2-3 with a roof node 4 adjacent to 2 and 3
* cycle: 5-cycle
* crane: path 0-1-2, nodes 3 and 4 both adjacent to 2, plus edge 3-4
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .gnn import GinConfig, GraphBatch, node_embeddings
from .graphcore import (AttributedGraph, EnvDataset, LabeledGraph, degrees,
                        induced_subgraph)

BASE_KINDS = ("wheel", "tree", "ladder", "star", "path")
MOTIFS = ("house", "cycle", "crane")
LABELERS = ("max_degree_parity", "motif_class", "message_passing")
NODE_MAPS = {
    "x_minus_1": lambda x: x - 1.0,
    "identity": lambda x: x,
    "relu": lambda x: np.maximum(x, 0.0),
    "tanh": np.tanh,
}
AGGS = ("sum_positive", "mean_positive", "max_positive")

_BASE_MIN = {"wheel": 4, "tree": 1, "ladder": 4, "star": 2, "path": 2}


@dataclass(frozen=True)
class LabelerSpec:
    kind: str = "max_degree_parity"
    depth: int | None = None
    node_map: str | None = None
    agg: str | None = None

    def __post_init__(self):
        if self.kind not in LABELERS:
            raise ValueError(f"unknown labeler {self.kind!r}")
        mp_fields = (self.depth, self.node_map, self.agg)
        if self.kind == "message_passing":
            if any(v is None for v in mp_fields):
                raise ValueError("message_passing needs depth, node_map and agg")
            if self.depth < 1 or self.node_map not in NODE_MAPS or self.agg not in AGGS:
                raise ValueError("bad message_passing parameters")
        elif any(v is not None for v in mp_fields):
            raise ValueError(f"{self.kind} takes no depth/node_map/agg")

    @property
    def num_classes(self) -> int:
        return len(MOTIFS) if self.kind == "motif_class" else 2

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class EnvSpec:
    """One environment.  ``attr_std`` is a number, or ``"env_plus_one"`` for std = env_id + 1."""
    env_id: int
    base_kind: str = "tree"
    base_size_range: tuple = (6, 15)
    motif_set: tuple = MOTIFS
    attr_dim: int = 0
    attr_std: float | str = "env_plus_one"
    num_samples: int = 100
    # spurious part for topology labelers, whose causal part is the base graph
    spurious_kind: str | None = "path"
    spurious_size_range: tuple = (2, 6)

    def __post_init__(self):
        object.__setattr__(self, "base_size_range", tuple(self.base_size_range))
        object.__setattr__(self, "spurious_size_range", tuple(self.spurious_size_range))
        object.__setattr__(self, "motif_set", tuple(self.motif_set))
        if self.base_kind not in BASE_KINDS:
            raise ValueError(f"unknown base kind {self.base_kind!r}")
        lo, hi = self.base_size_range
        if lo > hi or lo < _BASE_MIN[self.base_kind]:
            raise ValueError(f"base_size_range {self.base_size_range} invalid for {self.base_kind}")
        if self.spurious_kind is not None:
            if self.spurious_kind not in BASE_KINDS:
                raise ValueError(f"unknown spurious kind {self.spurious_kind!r}")
            slo, shi = self.spurious_size_range
            if slo > shi or slo < _BASE_MIN[self.spurious_kind]:
                raise ValueError("spurious_size_range invalid")
        if any(m not in MOTIFS for m in self.motif_set):
            raise ValueError(f"unknown motif in {self.motif_set}")
        if self.attr_dim < 0 or self.num_samples < 1 or self.env_id < 0:
            raise ValueError("attr_dim >= 0, num_samples >= 1 and env_id >= 0 required")
        self.std()

    def std(self) -> float:
        if self.attr_std == "env_plus_one":
            return float(self.env_id + 1)
        if isinstance(self.attr_std, str):
            raise ValueError(f"unknown attr_std rule {self.attr_std!r}")
        return float(self.attr_std)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("base_size_range", "spurious_size_range", "motif_set"):
            d[k] = list(d[k])
        return d


# -- graph families --------------------------------------------------------------

def make_base(kind: str, size: int, rng: np.random.Generator | None = None) -> AttributedGraph:
    if kind not in BASE_KINDS:
        raise ValueError(f"unknown base kind {kind!r}")
    if size < _BASE_MIN[kind]:
        raise ValueError(f"{kind} needs at least {_BASE_MIN[kind]} nodes, got {size}")
    if kind == "wheel":
        rim = range(1, size)
        edges = [(0, v) for v in rim] + [(v, v + 1) for v in range(1, size - 1)] + [(size - 1, 1)]
    elif kind == "tree":
        if rng is None:
            raise ValueError("tree generation needs an rng")
        edges = [(v, int(rng.integers(v))) for v in range(1, size)]
    elif kind == "ladder":
        if size % 2:
            raise ValueError("ladder size must be even")
        m = size // 2
        edges = ([(i, i + 1) for i in range(m - 1)] + [(m + i, m + i + 1) for i in range(m - 1)]
                 + [(i, m + i) for i in range(m)])
    elif kind == "star":
        edges = [(0, v) for v in range(1, size)]
    else:
        edges = [(v, v + 1) for v in range(size - 1)]
    return AttributedGraph.build(size, edges)


def make_motif(kind: str) -> AttributedGraph:
    if kind == "house":
        edges = [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]
    elif kind == "cycle":
        edges = [(i, (i + 1) % 5) for i in range(5)]
    elif kind == "crane":
        edges = [(0, 1), (1, 2), (2, 3), (2, 4), (3, 4)]
    else:
        raise ValueError(f"unknown motif {kind!r}")
    return AttributedGraph.build(5, edges)


def _sample_size(kind: str, lo: int, hi: int, rng: np.random.Generator) -> int:
    if kind == "ladder":
        sizes = [s for s in range(lo, hi + 1) if s % 2 == 0]
        if not sizes:
            raise ValueError("ladder size range contains no even size")
        return int(sizes[rng.integers(len(sizes))])
    return int(rng.integers(lo, hi + 1))


def join_graphs(causal: AttributedGraph, spurious: AttributedGraph,
                rng: np.random.Generator) -> tuple[AttributedGraph, tuple]:
    """Disjoint union plus one uniformly random causal-spurious bridge edge.

    Causal nodes keep their indices; spurious node ``v`` becomes ``n_c + v``.
    """
    if causal.feature_dim != spurious.feature_dim:
        raise ValueError(f"feature dims differ: {causal.feature_dim} vs {spurious.feature_dim}")
    nc, ns = causal.num_nodes, spurious.num_nodes
    causal_nodes = tuple(range(nc))
    if ns == 0:
        return causal, causal_nodes
    edges = set(causal.edges) | {(u + nc, v + nc) for u, v in spurious.edges}
    if nc > 0:
        edges.add((int(rng.integers(nc)), nc + int(rng.integers(ns))))
    feats = np.concatenate([causal.features, spurious.features], axis=0)
    return AttributedGraph.build(nc + ns, edges, feats), causal_nodes


def sample_attributes(env: EnvSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n x attr_dim`` i.i.d. N(0, std^2) with std from the environment's rule."""
    if env.attr_dim == 0:
        return np.zeros((n, 0))
    return rng.normal(0.0, env.std(), size=(n, env.attr_dim))


# -- labelers ------------------------------------------------------------------

def _is_isomorphic(a: AttributedGraph, b: AttributedGraph) -> bool:
    if a.num_nodes != b.num_nodes or len(a.edges) != len(b.edges):
        return False
    if sorted(degrees(a)) != sorted(degrees(b)):
        return False
    target = b.edges
    for perm in itertools.permutations(range(a.num_nodes)):
        if all(((perm[u], perm[v]) if perm[u] < perm[v] else (perm[v], perm[u])) in target
               for u, v in a.edges):
            return True
    return False


def message_passing_states(x: np.ndarray, adj: list, depth: int, node_map) -> np.ndarray:
    """``s^0 = m(x)``, ``s^l(v) = m(x[v] + sum of s^(l-1) over neighbours of v)``."""
    s = node_map(x)
    for _ in range(depth):
        nxt = np.empty_like(s)
        for v, nb in enumerate(adj):
            nxt[v] = node_map(x[v] + (s[nb].sum(axis=0) if nb else 0.0))
        s = nxt
    return s


def label(graph: AttributedGraph, causal_nodes: Sequence[int], spec: LabelerSpec) -> int:
    causal_nodes = list(causal_nodes)
    if not causal_nodes or len(set(causal_nodes)) != len(causal_nodes):
        raise ValueError("malformed causal node set")
    sub = induced_subgraph(graph, causal_nodes)
    if spec.kind == "max_degree_parity":
        return int(degrees(sub).max() % 2 == 1)
    if spec.kind == "motif_class":
        for i, kind in enumerate(MOTIFS):
            if _is_isomorphic(sub, make_motif(kind)):
                return i
        raise ValueError("causal node set does not induce a known motif")
    x = sub.features if sub.feature_dim else np.ones((sub.num_nodes, 1))
    s = message_passing_states(x, sub.neighbors(), spec.depth, NODE_MAPS[spec.node_map])
    if spec.agg == "sum_positive":
        return int(s.sum() > 0)
    if spec.agg == "mean_positive":
        return int(s.mean() > 0)
    return int(s.max() > 0)


# -- datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratedSample:
    sample: LabeledGraph
    causal_nodes: tuple


def _sample_parts(env: EnvSpec, labeler: LabelerSpec, rng: np.random.Generator):
    lo, hi = env.base_size_range
    if labeler.kind == "motif_class":
        kind = env.motif_set[int(rng.integers(len(env.motif_set)))]
        causal = make_motif(kind)
        spurious = make_base(env.base_kind, _sample_size(env.base_kind, lo, hi, rng), rng)
    else:
        causal = make_base(env.base_kind, _sample_size(env.base_kind, lo, hi, rng), rng)
        if env.spurious_kind is None:
            spurious = AttributedGraph.build(0)
        else:
            slo, shi = env.spurious_size_range
            spurious = make_base(env.spurious_kind, _sample_size(env.spurious_kind, slo, shi, rng), rng)
    return causal, spurious


def generate_sample(env: EnvSpec, labeler: LabelerSpec, seed: int, index: int) -> GeneratedSample:
    """Sample ``index`` of environment ``env``; depends only on (seed, env_id, index)."""
    rng = np.random.default_rng([seed, env.env_id, index])
    causal, spurious = _sample_parts(env, labeler, rng)
    causal = causal.with_features(sample_attributes(env, causal.num_nodes, rng))
    spurious = spurious.with_features(sample_attributes(env, spurious.num_nodes, rng))
    graph, causal_nodes = join_graphs(causal, spurious, rng)
    y = label(graph, causal_nodes, labeler)
    return GeneratedSample(LabeledGraph(graph, y, env.env_id), causal_nodes)


def build_dataset(specs: Sequence[EnvSpec], labeler: LabelerSpec, seed: int,
                  start_index: int = 0) -> EnvDataset:
    """``num_samples`` graphs per environment; ``start_index`` offsets the sample counters."""
    if not specs:
        raise ValueError("no environment specs")
    if len({s.attr_dim for s in specs}) != 1:
        raise ValueError("attr_dim must agree across environments")
    if len({s.env_id for s in specs}) != len(specs):
        raise ValueError("duplicate env_id")
    if labeler.kind == "motif_class" and any(not s.motif_set for s in specs):
        raise ValueError("motif_class needs a nonempty motif_set")
    samples = [generate_sample(spec, labeler, seed, start_index + i).sample
               for spec in specs for i in range(spec.num_samples)]
    return EnvDataset(tuple(samples), labeler.num_classes)


# -- Synth ---------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Additive-attribute benchmark: motif (causal) joined to a base graph (spurious).

    Observed features are a fixed random GIN transform of ``X_C + X_S`` whose
    weight scale depends on the environment; the label is a thresholded
    random MLP of mean-pooled message passing over the causal part.
    """
    attr_dim: int = 16
    samples_per_env: tuple = (500, 500, 500, 500)
    base_kinds: tuple = ("wheel", "tree", "ladder", "star")
    base_size_range: tuple = (6, 15)
    motif_set: tuple = MOTIFS
    attr_std: tuple = (1.0, 2.0, 3.0, 4.0)
    transform_layers: int = 1
    transform_scale: tuple = (1.0, 1.0, 1.0, 1.0)
    label_depth: int = 1
    label_hidden: int = 16
    causal_topology_weight: float = 0.0
    train_envs: tuple = (0, 1)
    val_envs: tuple = (2,)
    test_envs: tuple = (3,)

    def __post_init__(self):
        for k in ("samples_per_env", "base_kinds", "base_size_range", "motif_set",
                  "attr_std", "transform_scale", "train_envs", "val_envs", "test_envs"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        n = len(self.samples_per_env)
        if not (len(self.base_kinds) == len(self.attr_std) == len(self.transform_scale) == n):
            raise ValueError("per-environment lists must have equal length")
        if self.attr_dim < 1:
            raise ValueError("Synth needs attr_dim >= 1")
        envs = set(self.train_envs) | set(self.val_envs) | set(self.test_envs)
        if not envs <= set(range(n)):
            raise ValueError("split refers to unknown environments")
        if self.transform_layers < 1 or self.label_depth < 0 or self.label_hidden < 1:
            raise ValueError("bad transform/label architecture")

    @property
    def num_envs(self) -> int:
        return len(self.samples_per_env)

    def env_spec(self, e: int) -> EnvSpec:
        return EnvSpec(env_id=e, base_kind=self.base_kinds[e], base_size_range=self.base_size_range,
                       motif_set=self.motif_set, attr_dim=self.attr_dim,
                       attr_std=self.attr_std[e], num_samples=self.samples_per_env[e])

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SynthModel:
    """Fixed random networks shared by every environment of one Synth dataset."""
    transform_cfg: GinConfig
    transform: dc.ParamStore
    label_w1: np.ndarray
    label_w2: np.ndarray
    threshold: float = 0.0


def _synth_model(cfg: SynthConfig, seed: int) -> SynthModel:
    rng = np.random.default_rng([seed, 0x5EED])
    tcfg = GinConfig(num_layers=cfg.transform_layers, hidden_dim=cfg.attr_dim,
                     in_dim=cfg.attr_dim, out_dim=cfg.attr_dim)
    params = dc.ParamStore()
    width = cfg.attr_dim
    for layer in range(cfg.transform_layers):
        p = f"conv{layer}."
        params.add(p + "lin1.weight", rng.normal(0, 1 / np.sqrt(width), (width, cfg.attr_dim)))
        params.add(p + "lin1.bias", np.zeros(cfg.attr_dim))
        params.add(p + "lin2.weight", rng.normal(0, 1 / np.sqrt(cfg.attr_dim), (cfg.attr_dim, cfg.attr_dim)))
        params.add(p + "lin2.bias", np.zeros(cfg.attr_dim))
    d_in = cfg.attr_dim + 1
    w1 = rng.normal(0, 1 / np.sqrt(d_in), (d_in, cfg.label_hidden))
    w2 = rng.normal(0, 1 / np.sqrt(cfg.label_hidden), cfg.label_hidden)
    return SynthModel(tcfg, params, w1, w2)


def _scaled_transform(model: SynthModel, scale: float) -> dc.ParamStore:
    ps = dc.ParamStore()
    for name, t in model.transform.items():
        ps.add(name, t.value * scale if name.endswith("weight") else t.value)
    return ps


def _synth_score(model: SynthModel, x_c: np.ndarray, sub: AttributedGraph, depth: int,
                 topo_weight: float) -> float:
    s = message_passing_states(x_c, sub.neighbors(), depth, NODE_MAPS["identity"])
    deg = degrees(sub).astype(np.float64)
    pooled = np.concatenate([s.mean(axis=0), [topo_weight * (deg.max() - deg.mean())]])
    # tanh keeps the score odd, so its distribution is symmetric in every environment
    return float(np.tanh(pooled @ model.label_w1) @ model.label_w2)


def build_synth_dataset(cfg: SynthConfig, seed: int, extra_per_env: int = 0) -> EnvDataset:
    """Build all Synth environments; ``extra_per_env`` draws additional held-out samples
    for the training environments (their counters follow the main samples)."""
    model = _synth_model(cfg, seed)
    raw = []  # (env, index, graph, score)
    for e in range(cfg.num_envs):
        env = cfg.env_spec(e)
        params = _scaled_transform(model, cfg.transform_scale[e])
        n = cfg.samples_per_env[e] + (extra_per_env if e in cfg.train_envs else 0)
        parts = []
        for i in range(n):
            rng = np.random.default_rng([seed, e, i])
            causal, spurious = _sample_parts(env, LabelerSpec("motif_class"), rng)
            x_c = sample_attributes(env, causal.num_nodes, rng)
            x_s = sample_attributes(env, spurious.num_nodes, rng)
            g, causal_nodes = join_graphs(causal.with_features(x_c), spurious.with_features(x_s), rng)
            score = _synth_score(model, x_c, causal, cfg.label_depth, cfg.causal_topology_weight)
            parts.append((i, g, score))
        # observed features: c_xi(X_C + X_S, A) for the whole environment at once
        batch = GraphBatch([g for _, g, _ in parts])
        x_obs = batch.split_rows(_transform_forward(model.transform_cfg, params, batch))
        for (i, g, score), x in zip(parts, x_obs):
            raw.append((e, i, g.with_features(x), score))
    train_scores = [s for e, i, _, s in raw if e in cfg.train_envs and i < cfg.samples_per_env[e]]
    model.threshold = float(np.median(train_scores))
    samples = [LabeledGraph(g, int(s > model.threshold), e) for e, _, g, s in raw]
    return EnvDataset(tuple(samples), 2)


def _transform_forward(cfg: GinConfig, params: dc.ParamStore, batch: GraphBatch) -> np.ndarray:
    from .gnn import gin_layer  # local: keeps the transform free of the classifier's relu stack
    h = batch.x
    for layer in range(cfg.num_layers):
        h = gin_layer(h, batch, params, f"conv{layer}.", cfg.eps)
    return np.asarray(h.value)
