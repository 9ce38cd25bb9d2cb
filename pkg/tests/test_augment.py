import itertools
import warnings

import numpy as np
import pytest
from scipy import stats

from ria import diffcore as dc
from ria.augment import (EdgeTransform, MaskClampWarning, apply_edge_transform, apply_mask,
                         k_hot_masks, relaxed_mask_features, sample_edge_transform, sample_mask,
                         worst_case_mask)
from ria.gnn import Augmenter, Classifier, GinConfig, GraphBatch
from ria.graphcore import AttributedGraph, LabeledGraph
from ria.scmgen import make_base


def _graph(rng, n=4, d=3):
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.5]
    return AttributedGraph.build(n, edges, rng.normal(size=(n, d)))


def test_k_zero_and_exhaustion():
    rng = np.random.default_rng(0)
    p = np.full((2, 3), 0.5)
    np.testing.assert_array_equal(sample_mask(p, 0, rng).mask, 0.0)
    np.testing.assert_array_equal(sample_mask(p, 6, rng).mask, 1.0)


def test_clamp_warns():
    with pytest.warns(MaskClampWarning):
        m = sample_mask(np.full((2, 2), 0.5), 9, np.random.default_rng(0))
    assert m.clamped and m.k == 4 and m.mask.sum() == 4


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1])
def test_probs_must_be_open_interval(bad):
    with pytest.raises(ValueError):
        sample_mask(np.array([0.5, bad]), 1, np.random.default_rng(0))


def test_negative_k():
    with pytest.raises(ValueError):
        sample_mask(np.array([0.5]), -1, np.random.default_rng(0))


def test_exactly_min_k_numel_ones():
    rng = np.random.default_rng(1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaskClampWarning)
        for _ in range(1000):
            shape = tuple(rng.integers(1, 5, size=2))
            k = int(rng.integers(0, 20))
            m = sample_mask(rng.uniform(0.01, 0.99, size=shape), k, rng, warn=False)
            assert m.mask.sum() == min(k, m.mask.size)
            assert set(np.unique(m.mask)) <= {0.0, 1.0}


def test_dominant_entry_frequency():
    rng = np.random.default_rng(2)
    p = np.array([0.99, 0.003, 0.003, 0.004])
    hits = sum(sample_mask(p, 1, rng).mask[0] for _ in range(10_000))
    assert hits / 10_000 >= 0.95


def _ordered_prob(p, seq):
    """Probability of drawing ``seq`` in order with sequential renormalization."""
    p = np.asarray(p, dtype=float)
    left = p.sum()
    out = 1.0
    for i in seq:
        out *= p[i] / left
        left -= p[i]
    return out


def test_inclusion_frequencies_match_sequential_draws():
    # exact subset probabilities from the sequential definition, against Monte Carlo
    p = np.array([0.9, 0.6, 0.3, 0.1, 0.05])
    k = 2
    subsets = list(itertools.combinations(range(5), k))
    expected = np.array([sum(_ordered_prob(p, perm) for perm in itertools.permutations(s))
                         for s in subsets])
    assert np.isclose(expected.sum(), 1.0)
    rng = np.random.default_rng(3)
    counts = dict.fromkeys(subsets, 0)
    n = 20_000
    for _ in range(n):
        counts[tuple(sorted(sample_mask(p, k, rng).order))] += 1
    obs = np.array([counts[s] for s in subsets])
    assert stats.chisquare(obs, expected * n).pvalue > 0.01


def test_draw_order_first_pick():
    p = np.array([0.8, 0.4, 0.2])
    rng = np.random.default_rng(4)
    firsts = np.bincount([sample_mask(p, 2, rng).order[0] for _ in range(20_000)], minlength=3)
    assert stats.chisquare(firsts, p / p.sum() * 20_000).pvalue > 0.01


def test_apply_mask():
    rng = np.random.default_rng(0)
    g = _graph(rng)
    ones = sample_mask(np.full(g.features.shape, 0.5), g.features.size, rng)
    assert apply_mask(ones, g) == g
    zeros = sample_mask(np.full(g.features.shape, 0.5), 0, rng)
    out = apply_mask(zeros, g)
    assert out.edges == g.edges and out.num_nodes == g.num_nodes
    np.testing.assert_array_equal(out.features, 0.0)
    with pytest.raises(ValueError):
        apply_mask(sample_mask(np.full((1, 1), 0.5), 1, rng), g)


def test_relaxed_forward_equals_hard_mask():
    rng = np.random.default_rng(5)
    f = Augmenter(GinConfig(in_dim=3, out_dim=3), rng)
    gs = [_graph(rng) for _ in range(3)]
    batch = GraphBatch(gs)
    rm = relaxed_mask_features(f, batch, 4, np.random.default_rng(9))
    expected = np.concatenate([apply_mask(m, g).features for m, g in zip(rm.masks, gs)])
    np.testing.assert_array_equal(rm.features.value, expected)
    assert all(m.mask.sum() == 4 for m in rm.masks)


def test_relaxed_gradient_reaches_augmenter():
    rng = np.random.default_rng(6)
    f = Augmenter(GinConfig(in_dim=3, out_dim=3), rng)
    h = Classifier(GinConfig(in_dim=3, out_dim=2), rng)
    batch = GraphBatch([_graph(rng) for _ in range(4)])
    with dc.Tape() as tape:
        rm = relaxed_mask_features(f, batch, 5, rng)
        loss = dc.mean(dc.softmax_cross_entropy(h.logits(batch, rm.features), np.array([0, 1, 0, 1])))
    dc.grad(loss, f.params, tape)
    norm = np.sqrt(sum((f.params.grad(k) ** 2).sum() for k in f.params))
    assert norm > 1e-8


def test_relaxed_backward_matches_probs_surrogate():
    # with the hard mask frozen, the ST gradient is the gradient of probs * X
    rng = np.random.default_rng(7)
    f = Augmenter(GinConfig(num_layers=1, hidden_dim=4, in_dim=2, out_dim=2), rng)
    for _, t in f.params.items():
        t.value = t.value + 0.1 * rng.normal(size=t.shape)
    batch = GraphBatch([_graph(rng, d=2)])
    wts = rng.normal(size=batch.x.shape)
    with dc.Tape() as tape:
        rm = relaxed_mask_features(f, batch, 3, np.random.default_rng(0))
        loss = dc.sum(dc.mul(rm.features, wts))
    dc.grad(loss, f.params, tape)
    surrogate = lambda p: float(np.sum(dc.sigmoid(f.node_logits(batch)).value * batch.x * wts))
    fd = dc.finite_diff(surrogate, f.params, 1e-6)
    for k in f.params:
        np.testing.assert_allclose(f.params.grad(k), fd[k], rtol=1e-4, atol=1e-7)


def test_k_zero_gives_constant_features():
    rng = np.random.default_rng(8)
    f = Augmenter(GinConfig(in_dim=3, out_dim=3), rng)
    batch = GraphBatch([_graph(rng)])
    rm = relaxed_mask_features(f, batch, 0, rng)
    assert not rm.features.requires_grad
    np.testing.assert_array_equal(rm.features.value, batch.x)


def test_score_function_log_probs():
    rng = np.random.default_rng(10)
    f = Augmenter(GinConfig(num_layers=1, hidden_dim=4, in_dim=2, out_dim=2), rng)
    g = _graph(rng, n=2, d=2)
    batch = GraphBatch([g])
    rm = relaxed_mask_features(f, batch, 2, np.random.default_rng(1), estimator="score_function")
    probs = dc.sigmoid(f.node_logits(batch)).value.ravel()
    assert np.isclose(np.exp(rm.log_probs[0].item()), _ordered_prob(probs, rm.masks[0].order))


def test_worst_case_mask_is_max():
    rng = np.random.default_rng(11)
    g = _graph(rng, n=3, d=2)
    h = Classifier(GinConfig(in_dim=2, out_dim=2), rng)
    m, loss = worst_case_mask(h, LabeledGraph(g, 1, 0), 3)
    assert len(list(k_hot_masks((3, 2), 3))) == 20
    for other in k_hot_masks((3, 2), 3):
        z = h.logits(GraphBatch([g]), other * g.features)
        assert dc.softmax_cross_entropy(z, np.array([1])).value[0] <= loss


# -- edge transforms -------------------------------------------------------------

def test_edge_transform_examples():
    rng = np.random.default_rng(0)
    tri = AttributedGraph.build(3, [(0, 1), (0, 2), (1, 2)])
    t, g = sample_edge_transform(tri, 0.0, 0.0, rng)
    assert t.is_identity() and g == tri
    t, g = sample_edge_transform(tri, 0.0, 1.0, rng)
    assert g.edges == frozenset()


def test_edge_transform_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        g = _graph(rng, n=int(rng.integers(1, 7)), d=1)
        t, out = sample_edge_transform(g, rng.random(), rng.random(), rng)
        assert not t.additions & g.edges and t.deletions <= g.edges
        assert all(u != v for u, v in t.additions)
        assert apply_edge_transform(t.inverse(), out) == g


def test_edge_transform_mismatch():
    g = make_base("path", 3)
    with pytest.raises(ValueError):
        apply_edge_transform(EdgeTransform(frozenset({(0, 1)}), frozenset()), g)
