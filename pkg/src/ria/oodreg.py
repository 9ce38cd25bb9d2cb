"""Risks, OoD regularizers, and the ascent/descent objectives of RIA.

``E`` is the mean over training environments of the mean cross entropy on
augmented graphs; it is the only quantity the augmenter climbs.  ``J`` adds the
environment-averaged regularizer and is what the classifier descends.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .augment import sample_edge_transform
from .gnn import Classifier, GraphBatch
from .graphcore import AttributedGraph, LabeledGraph

KINDS = ("none", "irm", "vrex", "rice")


@dataclass(frozen=True)
class RegularizerSpec:
    kind: str = "none"
    lam: float = 1.0
    beta: float = 1.0
    num_edge_augs: int = 10
    p_add: float = 0.01
    p_del: float = 0.01

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}; expected one of {KINDS}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("regularizer weights must be nonnegative")
        if self.num_edge_augs < 1:
            raise ValueError("num_edge_augs must be positive")
        if not (0 <= self.p_add <= 1 and 0 <= self.p_del <= 1):
            raise ValueError("edge flip probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EnvBatch:
    """One environment's minibatch, optionally with substituted (masked) features."""
    env: int
    batch: GraphBatch
    labels: np.ndarray
    x: dc.Tensor | None = None

    @classmethod
    def from_samples(cls, env: int, samples: Sequence[LabeledGraph], x=None) -> "EnvBatch":
        return cls(env, GraphBatch([s.graph for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64), x)


@dataclass
class Objectives:
    E: dc.Tensor
    J: dc.Tensor
    env_risks: dict = field(default_factory=dict)
    penalty: dc.Tensor | None = None


def _batch_of(h: Classifier, samples) -> EnvBatch:
    if not samples:
        raise ValueError("empty batch")
    return EnvBatch.from_samples(samples[0].env, samples)


def sample_losses(h: Classifier, eb: EnvBatch) -> dc.Tensor:
    return dc.softmax_cross_entropy(h.logits(eb.batch, eb.x), eb.labels)


def erm_risk(h: Classifier, batch: Sequence[LabeledGraph]) -> dc.Tensor:
    """Mean softmax cross entropy over ``batch``."""
    return dc.mean(sample_losses(h, _batch_of(h, list(batch))))


def _irm_from_logits(z: dc.Tensor, labels: np.ndarray) -> dc.Tensor:
    # d/dw CE(w z, y) at w = 1 is sum_c z_c (softmax(z)_c - [c == y])
    onehot = np.zeros(z.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    per_sample = dc.sum(dc.mul(z, dc.sub(dc.softmax(z), onehot)), axis=1)
    return dc.square(dc.mean(per_sample))


def irm_penalty(h: Classifier, batch_e) -> dc.Tensor:
    """Squared derivative of the environment risk w.r.t. a logit multiplier at 1."""
    eb = batch_e if isinstance(batch_e, EnvBatch) else _batch_of(h, list(batch_e))
    if eb.batch.num_graphs == 0:
        raise ValueError("empty batch")
    return _irm_from_logits(h.logits(eb.batch, eb.x), eb.labels)


def irm_penalty_from_logits(logits, labels) -> dc.Tensor:
    return _irm_from_logits(dc.as_tensor(logits), np.asarray(labels, dtype=np.int64))


def vrex_penalty(risks: Mapping, beta: float = 1.0) -> dc.Tensor:
    """``beta`` times the population variance of per-environment risks (env_id order)."""
    if not risks:
        raise ValueError("vrex needs at least one environment")
    return dc.mul(dc.variance(dc.stack([risks[e] for e in sorted(risks)])), beta)


# -- RICE ----------------------------------------------------------------------

def sample_rice_transforms(graphs: Sequence[AttributedGraph], spec: RegularizerSpec,
                           rng: np.random.Generator) -> list[list[AttributedGraph]]:
    return [[sample_edge_transform(g, spec.p_add, spec.p_del, rng)[1]
             for _ in range(spec.num_edge_augs)] for g in graphs]


def rice_distances(h: Classifier, batch: GraphBatch, transformed: list[list[AttributedGraph]],
                   x=None) -> dc.Tensor:
    """``[num_graphs, num_augs]`` logit distances between transformed and original graphs."""
    n_aug = len(transformed[0])
    flat = [t for row in transformed for t in row]
    tbatch = GraphBatch(flat)
    x = dc.const(batch.x) if x is None else dc.as_tensor(x)
    # transformed graphs keep node order, so their feature rows repeat the originals'
    rows = np.concatenate([np.tile(np.arange(o, o + c), n_aug)
                           for o, c in zip(batch.offsets, batch.counts)])
    zt = h.logits(tbatch, dc.gather_rows(x, rows))
    z = dc.gather_rows(h.logits(batch, x), np.repeat(np.arange(batch.num_graphs), n_aug))
    return dc.reshape(dc.l2_norm(dc.sub(zt, z), axis=1), (batch.num_graphs, n_aug))


def rice_penalty_batch(h: Classifier, eb: EnvBatch, spec: RegularizerSpec,
                       rng: np.random.Generator) -> dc.Tensor:
    transformed = sample_rice_transforms(eb.batch.graphs, spec, rng)
    dist = rice_distances(h, eb.batch, transformed, eb.x)
    return dc.mul(dc.mean(dc.max_axis(dist, axis=1)), spec.lam)


def rice_penalty(h: Classifier, graph: AttributedGraph, spec: RegularizerSpec,
                 rng: np.random.Generator) -> dc.Tensor:
    """``lam`` times the largest logit shift over ``num_edge_augs`` sampled edge flips."""
    if spec.kind != "rice":
        raise ValueError("rice_penalty needs a rice RegularizerSpec")
    eb = EnvBatch(0, GraphBatch([graph]), np.zeros(1, dtype=np.int64))
    return rice_penalty_batch(h, eb, spec, rng)


# -- Algorithm-level objectives --------------------------------------------------------

def objectives(h: Classifier, env_batches: Sequence[EnvBatch], spec: RegularizerSpec,
               rng: np.random.Generator | None = None) -> Objectives:
    """Compute ``E`` and ``J`` from one forward pass per environment."""
    if not env_batches:
        raise ValueError("no environments")
    risks = {}
    logits = {}
    for eb in env_batches:
        if eb.batch.num_graphs == 0:
            raise ValueError(f"environment {eb.env} has an empty batch")
        z = h.logits(eb.batch, eb.x)
        logits[eb.env] = z
        risks[eb.env] = dc.mean(dc.softmax_cross_entropy(z, eb.labels))
    envs = [eb.env for eb in env_batches]
    E = dc.mean(dc.stack([risks[e] for e in envs]))
    if spec.kind == "none":
        return Objectives(E, E, risks)
    if spec.kind == "irm":
        pens = [_irm_from_logits(logits[eb.env], eb.labels) for eb in env_batches]
        penalty = dc.mul(dc.mean(dc.stack(pens)), spec.lam)
    elif spec.kind == "vrex":
        penalty = vrex_penalty(risks, spec.beta)
    else:
        if rng is None:
            raise ValueError("rice needs an rng")
        pens = [rice_penalty_batch(h, eb, spec, rng) for eb in env_batches]
        penalty = dc.mean(dc.stack(pens))
    return Objectives(E, dc.add(E, penalty), risks, penalty)


def ascent_loss(h: Classifier, env_batches: Sequence[EnvBatch]) -> dc.Tensor:
    return objectives(h, env_batches, RegularizerSpec("none")).E


def descent_loss(h: Classifier, env_batches: Sequence[EnvBatch], spec: RegularizerSpec,
                 rng: np.random.Generator | None = None) -> dc.Tensor:
    return objectives(h, env_batches, spec, rng).J
