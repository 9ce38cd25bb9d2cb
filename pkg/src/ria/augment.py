"""Adversarial node-feature masks and invertible edge transformations.

A mask keeps ``k`` entries of a graph's feature matrix.  Entries are drawn one
at a time, without replacement, from the categorical distribution
proportional to the augmenter's keep probabilities.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .gnn import Augmenter, GraphBatch, augment_probs_batch
from .graphcore import AttributedGraph

log = logging.getLogger(__name__)

ESTIMATORS = ("straight_through", "score_function")


class MaskClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MaskAugmentation:
    mask: np.ndarray
    probs: np.ndarray
    k: int
    order: tuple = ()
    clamped: bool = False


def _draw_without_replacement(p: np.ndarray, k: int, rng: np.random.Generator) -> list[int]:
    # exponential keys log(u) / p, sorted descending, give the same ordered draw
    # as picking one entry at a time with probability proportional to p
    keys = np.log(rng.random(p.size)) / p
    return [int(i) for i in np.argsort(-keys, kind="stable")[:k]]


def sample_mask(probs, k: int, rng: np.random.Generator, warn: bool = True) -> MaskAugmentation:
    """Start from zeros and set ``k`` distinct entries to 1, drawn proportionally to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if k < 0:
        raise ValueError("k must be nonnegative")
    if probs.size and not (np.all(probs > 0) and np.all(probs < 1)):
        raise ValueError("mask probabilities must lie in (0, 1)")
    numel = probs.size
    clamped = k > numel
    if clamped:
        if warn:
            warnings.warn(f"k={k} exceeds {numel} entries; keeping all", MaskClampWarning, stacklevel=2)
        k = numel
    if k == numel:
        order = tuple(range(numel))
    else:
        order = tuple(_draw_without_replacement(probs.ravel(), k, rng))
    mask = np.zeros(numel)
    mask[list(order)] = 1.0
    return MaskAugmentation(mask.reshape(probs.shape), probs, k, order, clamped)


def apply_mask(m: MaskAugmentation, graph: AttributedGraph) -> AttributedGraph:
    if m.mask.shape != graph.features.shape:
        raise ValueError(f"mask shape {m.mask.shape} != feature shape {graph.features.shape}")
    return graph.with_features(m.mask * graph.features)


def _ordered_log_prob(probs: dc.Tensor, m: MaskAugmentation, rows: np.ndarray):
    """Log-probability of the ordered draws of ``m`` under sequential sampling."""
    d = probs.shape[1]
    order = np.asarray(m.order, dtype=np.int64)
    k = len(order)
    block = dc.gather_rows(probs, rows)
    total = dc.sum(block)
    picked_rows = dc.gather_rows(block, order // d)
    onehot = np.zeros((k, d))
    onehot[np.arange(k), order % d] = 1.0
    picked = dc.mul(picked_rows, onehot)
    before = dc.sum(dc.matmul(np.tril(np.ones((k, k)), -1), picked), axis=1)
    remaining = dc.sub(total, before)
    return dc.sub(dc.sum(dc.log(dc.sum(picked, axis=1))), dc.sum(dc.log(remaining)))


@dataclass
class RelaxedMask:
    """Masked batch features with a differentiable pathway back to ``w``."""
    features: dc.Tensor
    masks: list
    log_probs: list  # per-graph log-probabilities (score-function estimator only)


def relaxed_mask_features(f: Augmenter | None, batch: GraphBatch, k: int,
                          rng: np.random.Generator,
                          estimator: str = "straight_through") -> RelaxedMask:
    """Sample one mask per graph and return ``mask * X`` on the tape.

    With the straight-through estimator the forward value is the hard mask and
    the backward pass treats the mask as the keep probabilities.  With the
    score-function estimator the features carry no gradient; the caller uses
    ``log_probs`` instead.  ``k == 0`` disables augmentation.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    x = batch.x
    if k == 0 or f is None:
        return RelaxedMask(dc.const(x), [], [])
    probs = augment_probs_batch(f, batch)
    masks, hard = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaskClampWarning)
        for p in batch.split_rows(probs.value):
            m = sample_mask(np.clip(p, 1e-12, 1.0 - 1e-12), k, rng)
            masks.append(m)
            hard.append(m.mask)
    hard = np.concatenate(hard, axis=0)
    if any(m.clamped for m in masks):
        log.debug("k=%d clamped to the full feature matrix on some graphs", k)
    if estimator == "straight_through":
        return RelaxedMask(dc.mul(dc.straight_through(hard, probs), x), masks, [])
    log_probs = []
    for m, off, cnt in zip(masks, batch.offsets, batch.counts):
        if m.clamped or m.k == m.mask.size:
            log_probs.append(dc.const(0.0))
        else:
            log_probs.append(_ordered_log_prob(probs, m, np.arange(off, off + cnt)))
    return RelaxedMask(dc.const(hard * x), masks, log_probs)


# -- invertible edge flips ------------------------------------------------------

@dataclass(frozen=True)
class EdgeTransform:
    additions: frozenset
    deletions: frozenset

    def inverse(self) -> "EdgeTransform":
        return EdgeTransform(self.deletions, self.additions)

    def is_identity(self) -> bool:
        return not self.additions and not self.deletions


def apply_edge_transform(t: EdgeTransform, graph: AttributedGraph) -> AttributedGraph:
    edges = graph.edges
    if not t.deletions <= edges or t.additions & edges:
        raise ValueError("transform does not match the graph's edge set")
    return graph.with_edges((edges - t.deletions) | t.additions)


def sample_edge_transform(graph: AttributedGraph, p_add: float, p_del: float,
                          rng: np.random.Generator) -> tuple[EdgeTransform, AttributedGraph]:
    """Delete each edge with ``p_del`` and add each non-edge with ``p_add``, independently."""
    if not (0.0 <= p_add <= 1.0 and 0.0 <= p_del <= 1.0):
        raise ValueError("edge flip probabilities must lie in [0, 1]")
    edges = graph.sorted_edges()
    non_edges = [e for e in itertools.combinations(range(graph.num_nodes), 2)
                 if e not in graph.edges]
    dels = rng.random(len(edges)) < p_del
    adds = rng.random(len(non_edges)) < p_add
    t = EdgeTransform(frozenset(e for e, d in zip(non_edges, adds) if d),
                      frozenset(e for e, d in zip(edges, dels) if d))
    return t, apply_edge_transform(t, graph)


def k_hot_masks(shape: tuple, k: int):
    """Every 0/1 matrix of ``shape`` with exactly ``min(k, numel)`` ones."""
    numel = int(np.prod(shape))
    for keep in itertools.combinations(range(numel), min(k, numel)):
        m = np.zeros(numel)
        m[list(keep)] = 1.0
        yield m.reshape(shape)


def worst_case_mask(h, sample, k: int) -> tuple[np.ndarray, float]:
    """Brute-force the k-hot mask with the largest cross entropy for one labeled graph."""
    g = sample.graph
    if g.feature_dim == 0:
        raise ValueError("mask augmentation is undefined for featureless graphs")
    masks = list(k_hot_masks(g.features.shape, k))
    batch = GraphBatch([g] * len(masks))
    x = np.concatenate([m * g.features for m in masks], axis=0)
    losses = dc.softmax_cross_entropy(h.logits(batch, x), np.full(len(masks), sample.label)).value
    i = int(np.argmax(losses))
    return masks[i], float(losses[i])
