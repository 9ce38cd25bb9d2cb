"""GIN message-passing networks used as the classifier and the mask augmenter.

A minibatch of graphs is evaluated as one disjoint union: node rows are
concatenated, edges are offset, and neighbour sums / readouts go through the
row gather/scatter primitives.  Each graph's computation is exactly what it
would be on its own.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .graphcore import AttributedGraph

READOUTS = ("mean", "sum", "max")


@dataclass(frozen=True)
class GinConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    in_dim: int = 0
    out_dim: int = 2
    eps: float = 0.0
    readout: str = "mean"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 1 or self.out_dim < 1 or self.in_dim < 0:
            raise ValueError("dimensions must be positive (in_dim >= 0)")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")

    @property
    def input_width(self) -> int:
        # featureless graphs get a constant 1 per node
        return max(self.in_dim, 1)

    def to_dict(self) -> dict:
        return asdict(self)


class GraphBatch:
    """Disjoint union of a sequence of graphs."""

    def __init__(self, graphs: Sequence[AttributedGraph], in_dim: int | None = None):
        if not graphs:
            raise ValueError("empty batch")
        self.graphs = list(graphs)
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.counts = counts
        self.offsets = offsets
        self.num_graphs = len(graphs)
        self.num_nodes = int(counts.sum())
        self.node_graph = np.repeat(np.arange(len(graphs)), counts)
        src, dst = [], []
        for off, g in zip(offsets, graphs):
            if g.edges:
                e = np.array(g.sorted_edges(), dtype=np.int64) + off
                src += [e[:, 0], e[:, 1]]
                dst += [e[:, 1], e[:, 0]]
        self.src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
        self.dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
        dims = {g.feature_dim for g in graphs}
        if len(dims) != 1:
            raise ValueError(f"mixed feature dims in batch: {sorted(dims)}")
        self.feature_dim = dims.pop()
        if in_dim is not None and in_dim != self.feature_dim:
            raise ValueError(f"feature_dim {self.feature_dim} != in_dim {in_dim}")
        if self.feature_dim == 0:
            self.x = np.ones((self.num_nodes, 1))
        else:
            self.x = np.concatenate([g.features for g in graphs], axis=0)

    def split_rows(self, mat: np.ndarray) -> list[np.ndarray]:
        return np.split(np.asarray(mat), np.cumsum(self.counts)[:-1])


def _mlp(h, params: dc.ParamStore, prefix: str):
    z = dc.add(dc.matmul(h, params[prefix + "lin1.weight"]), params[prefix + "lin1.bias"])
    z = dc.relu(z)
    return dc.add(dc.matmul(z, params[prefix + "lin2.weight"]), params[prefix + "lin2.bias"])


def gin_layer(h, batch: GraphBatch, params: dc.ParamStore, prefix: str, eps: float = 0.0):
    """``MLP((1 + eps) * h[v] + sum of h[u] over neighbours u of v)`` for every node."""
    h = dc.as_tensor(h)
    if h.shape[0] != batch.num_nodes:
        raise ValueError(f"{h.shape[0]} feature rows for {batch.num_nodes} nodes")
    agg = dc.scatter_add_rows(dc.gather_rows(h, batch.src), batch.dst, batch.num_nodes)
    self_term = h if eps == 0.0 else dc.mul(h, 1.0 + eps)
    return _mlp(dc.add(self_term, agg), params, prefix)


def init_gin_params(params: dc.ParamStore, cfg: GinConfig, rng: np.random.Generator,
                    prefix: str = "") -> None:
    width = cfg.input_width
    for layer in range(cfg.num_layers):
        p = f"{prefix}conv{layer}."
        params.add(p + "lin1.weight", dc.glorot_uniform(rng, width, cfg.hidden_dim))
        params.add(p + "lin1.bias", np.zeros(cfg.hidden_dim))
        params.add(p + "lin2.weight", dc.glorot_uniform(rng, cfg.hidden_dim, cfg.hidden_dim))
        params.add(p + "lin2.bias", np.zeros(cfg.hidden_dim))
        width = cfg.hidden_dim
    params.add(prefix + "head.weight", dc.glorot_uniform(rng, cfg.hidden_dim, cfg.out_dim))
    params.add(prefix + "head.bias", np.zeros(cfg.out_dim))


def node_embeddings(params: dc.ParamStore, cfg: GinConfig, batch: GraphBatch, x=None):
    h = batch.x if x is None else x
    for layer in range(cfg.num_layers):
        h = dc.relu(gin_layer(h, batch, params, f"conv{layer}.", cfg.eps))
    return h


def readout(h, batch: GraphBatch, kind: str = "mean"):
    if kind == "max":
        return dc.segment_max(h, batch.node_graph, batch.num_graphs)
    pooled = dc.scatter_add_rows(h, batch.node_graph, batch.num_graphs)
    if kind == "sum":
        return pooled
    return dc.mul(pooled, (1.0 / np.maximum(batch.counts, 1))[:, None])


class Classifier:
    """Graph-level GIN classifier ``h_theta``."""

    def __init__(self, cfg: GinConfig, rng: np.random.Generator | None = None,
                 params: dc.ParamStore | None = None):
        self.config = cfg
        if params is None:
            params = dc.ParamStore()
            init_gin_params(params, cfg, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.config.out_dim

    def logits(self, batch: GraphBatch, x=None):
        """``[num_graphs, out_dim]`` logits; ``x`` overrides the batch node features."""
        if batch.feature_dim != self.config.in_dim:
            raise ValueError(f"graph feature_dim {batch.feature_dim} != in_dim {self.config.in_dim}")
        h = node_embeddings(self.params, self.config, batch, x)
        pooled = readout(h, batch, self.config.readout)
        return dc.add(dc.matmul(pooled, self.params["head.weight"]), self.params["head.bias"])


class Augmenter:
    """Node-level GIN ``f_w`` emitting one logit per feature entry."""

    def __init__(self, cfg: GinConfig, rng: np.random.Generator | None = None,
                 params: dc.ParamStore | None = None):
        if cfg.in_dim < 1 or cfg.out_dim != cfg.in_dim:
            raise ValueError("augmenter needs in_dim >= 1 and out_dim == in_dim")
        self.config = cfg
        if params is None:
            params = dc.ParamStore()
            init_gin_params(params, cfg, rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def node_logits(self, batch: GraphBatch):
        h = node_embeddings(self.params, self.config, batch)
        return dc.add(dc.matmul(h, self.params["head.weight"]), self.params["head.bias"])


def classify(h: Classifier, graph: AttributedGraph) -> np.ndarray:
    return h.logits(GraphBatch([graph])).value[0]


def augment_probs_batch(f: Augmenter, batch: GraphBatch):
    if batch.feature_dim == 0:
        raise ValueError("mask augmentation is undefined for featureless graphs")
    return dc.sigmoid(f.node_logits(batch))


def augment_probs(f: Augmenter, graph: AttributedGraph) -> np.ndarray:
    """Per-entry keep probabilities ``sigmoid(f_w(X, A))``, same shape as ``X``."""
    if graph.feature_dim == 0:
        raise ValueError("mask augmentation is undefined for featureless graphs")
    return augment_probs_batch(f, GraphBatch([graph])).value


def zero_params(params: dc.ParamStore, names: Sequence[str] | None = None) -> None:
    for name, t in params.items():
        if names is None or name in names:
            t.value = np.zeros_like(t.value)
