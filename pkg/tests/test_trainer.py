import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog

from ria.gnn import Classifier, GinConfig, GraphBatch, classify
from ria.graphcore import AttributedGraph, EnvDataset, LabeledGraph, from_json_record
from ria.oodreg import RegularizerSpec
from ria.trainer import (TrainConfig, TrainHistory, collapse_metric, erm_train, evaluate,
                         ria_train)

FIXTURES = Path(__file__).parent / "fixtures"


def _toy(rng, n_per_env=8, envs=(0, 1), d=2):
    out = []
    for e in envs:
        for _ in range(n_per_env):
            n = int(rng.integers(3, 6))
            edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.5]
            x = rng.normal(size=(n, d)) * (e + 1)
            out.append(LabeledGraph(AttributedGraph.build(n, edges, x), int(x[:, 0].mean() > 0), e))
    return EnvDataset(tuple(out), 2)


def _cfg(**kw):
    base = dict(lr_theta=0.05, lr_w=0.05, epochs=3, batch_size=4, seed=3,
                classifier=GinConfig(num_layers=2, hidden_dim=8, in_dim=2, out_dim=2))
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_keeps_init():
    rng = np.random.default_rng(0)
    data = _toy(rng)
    for fn in (erm_train, ria_train):
        h, hist = fn(_cfg(epochs=0, k=4), data, data, data)
        ref, _ = fn(_cfg(epochs=0, k=4), data, data, data)
        assert len(hist) == 0
        fresh = Classifier(_cfg().classifier, np.random.default_rng([3, 0]))
        for k in fresh.params:
            np.testing.assert_array_equal(h.params[k].value, fresh.params[k].value)
            np.testing.assert_array_equal(h.params[k].value, ref.params[k].value)


def _trajectory(fn, cfg, data, steps=3):
    snaps = []

    def grab(step, h, f):
        if step <= steps:
            snaps.append(h.params.snapshot())

    fn(cfg, data, data, data, on_step=grab)
    return snaps[:steps]


def test_identity_masks_reduce_to_erm():
    data = _toy(np.random.default_rng(1))
    erm = _trajectory(erm_train, _cfg(epochs=2), data)
    ria = _trajectory(ria_train, _cfg(epochs=2, k=10 ** 6, T=1), data)
    assert len(erm) == 3
    for a, b in zip(erm, ria):
        for k in a:
            assert np.array_equal(a[k], b[k]), k


def test_single_step_matches_fixture():
    fx = json.loads((FIXTURES / "step_fixture.json").read_text())
    data = EnvDataset(tuple(from_json_record(r) for r in fx["samples"]), 2)
    c = fx["config"]
    cfg = TrainConfig(lr_theta=c["lr_theta"], epochs=1, k=0, batch_size=c["batch_size"], seed=c["seed"],
                      classifier=GinConfig(**c["classifier"]),
                      regularizer=RegularizerSpec("vrex", beta=c["beta"]))
    h0, _ = ria_train(replace(cfg, epochs=0), data, data, data)
    for k, v in fx["init"].items():
        np.testing.assert_array_equal(h0.params[k].value, np.array(v))
    (after,) = _trajectory(ria_train, cfg, data, steps=1)
    for k, v in fx["after_one_step"].items():
        v = np.array(v)
        assert np.all(np.abs(after[k] - v) <= 1e-10 * np.maximum(np.abs(v), 1e-300) + 1e-15), k


def _linearly_separable(points, labels):
    # feasibility of y_i (w . x_i + b) >= 1
    s = np.where(labels == 1, 1.0, -1.0)
    a_ub = -s[:, None] * np.hstack([points, np.ones((len(points), 1))])
    res = linprog(np.zeros(points.shape[1] + 1), A_ub=a_ub, b_ub=-np.ones(len(points)),
                  bounds=[(None, None)] * (points.shape[1] + 1))
    return res.status == 0


def test_erm_fits_separable_task():
    rng = np.random.default_rng(2)
    samples = []
    for i in range(24):
        n = int(rng.integers(2, 5))
        c = rng.uniform(0.5, 1.5) * (1 if i % 2 else -1)
        samples.append(LabeledGraph(AttributedGraph.build(n, [(v, v + 1) for v in range(n - 1)],
                                                          np.full((n, 1), c)), int(c > 0), i % 2))
    data = EnvDataset(tuple(samples), 2)
    pooled = np.array([s.graph.features.mean(0) for s in samples])
    assert _linearly_separable(pooled, np.array([s.label for s in samples]))
    cfg = TrainConfig(lr_theta=0.1, epochs=200, batch_size=4, seed=0,
                      classifier=GinConfig(num_layers=1, hidden_dim=8, in_dim=1, out_dim=2))
    h, hist = erm_train(cfg, data, data, data)
    assert hist.column("train_acc").max() == 1.0


def test_determinism():
    data = _toy(np.random.default_rng(3))
    for fn, kw in [(erm_train, {}), (ria_train, dict(k=5, regularizer=RegularizerSpec("rice", num_edge_augs=2, p_add=0.2, p_del=0.2)))]:
        a = fn(_cfg(**kw), data, data, data)[1]
        b = fn(_cfg(**kw), data, data, data)[1]
        assert a.to_csv() == b.to_csv()


@pytest.mark.parametrize("kind", ["irm", "vrex", "rice"])
def test_regularized_runs_finite(kind):
    data = _toy(np.random.default_rng(4))
    spec = RegularizerSpec(kind, num_edge_augs=2, p_add=0.1, p_del=0.1)
    h, hist = ria_train(_cfg(k=6, T=2, regularizer=spec), data, data, data)
    assert len(hist) == 3
    assert all(np.isfinite(t.value).all() for _, t in h.params.items())
    assert np.all(np.isfinite(hist.column("train_objective")))


def test_augmenter_moves():
    data = _toy(np.random.default_rng(5))
    seen = []
    ria_train(_cfg(k=6, epochs=1), data, data, data, on_step=lambda s, h, f: seen.append(f.params.snapshot()))
    assert any(not np.array_equal(seen[0][k], seen[-1][k]) for k in seen[0])


def test_score_function_estimator_runs():
    data = _toy(np.random.default_rng(6))
    seen = []
    ria_train(_cfg(k=6, epochs=1, estimator="score_function"), data, data, data,
              on_step=lambda s, h, f: seen.append(f.params.snapshot()))
    assert any(not np.array_equal(seen[0][k], seen[-1][k]) for k in seen[0])


def test_best_val_checkpoint_returned():
    rng = np.random.default_rng(7)
    data, val = _toy(rng), _toy(rng, envs=(2,))
    h, hist = erm_train(_cfg(epochs=6), data, val, val)
    rec = hist.records[hist.best_epoch - 1]
    assert rec["val_acc"] == hist.column("val_acc").max()
    assert evaluate(h, val) == (rec["val_loss"], rec["val_acc"])


def test_inconsistent_datasets_rejected():
    rng = np.random.default_rng(8)
    data = _toy(rng)
    other = _toy(rng, d=3)
    with pytest.raises(ValueError):
        erm_train(_cfg(), data, other, data)
    with pytest.raises(ValueError):
        ria_train(_cfg(), EnvDataset((), 2), data, data)


class _FixedLogits:
    def __init__(self, fn):
        self.fn = fn

    def logits(self, batch):
        from ria import diffcore as dc
        return dc.const(np.array([self.fn(g) for g in batch.graphs]))


def test_evaluate_rules():
    rng = np.random.default_rng(9)
    data = _toy(rng)
    oracle = _FixedLogits(lambda g: [0.0, 5.0] if g.features[:, 0].mean() > 0 else [5.0, 0.0])
    assert evaluate(oracle, data)[1] == 1.0
    balanced = EnvDataset(tuple(LabeledGraph(s.graph, i % 2, s.env) for i, s in enumerate(data)), 2)
    loss, acc = evaluate(_FixedLogits(lambda g: [0.3, 0.3]), balanced)
    assert acc == 0.5 and np.isclose(loss, np.log(2))
    with pytest.raises(ValueError):
        evaluate(oracle, EnvDataset((), 2))


def test_evaluate_matches_recount():
    rng = np.random.default_rng(10)
    data = EnvDataset(_toy(rng).samples[:10], 2)
    h = Classifier(GinConfig(in_dim=2, out_dim=2), rng)
    correct, losses = 0, []
    for s in data:
        z = classify(h, s.graph)
        correct += int(np.argmax(z) == s.label)
        losses.append(np.log(np.exp(z).sum()) - z[s.label])
    loss, acc = evaluate(h, data, batch_size=3)
    assert acc == correct / 10
    assert np.isclose(loss, np.mean(losses), rtol=1e-12)


def _hist(train, ood):
    h = TrainHistory()
    for i, (t, o) in enumerate(zip(train, ood), 1):
        h.append(dict(epoch=i, train_loss=t, train_acc=1.0, val_loss=0.0, val_acc=1.0,
                      ood_test_loss=o, ood_test_acc=0.5, train_objective=t))
    return h


def test_collapse_metric_rules():
    up = np.linspace(1.0, 2.0, 12)
    assert collapse_metric(_hist([0.01] * 12, up), 10).collapsed
    assert not collapse_metric(_hist([0.5] * 12, up), 10).collapsed
    assert not collapse_metric(_hist([0.01] * 12, up[::-1]), 10).collapsed
    with pytest.raises(ValueError):
        collapse_metric(_hist([0.01] * 5, up[:5]), 10)


def test_collapse_slope_least_squares():
    ood = np.random.default_rng(11).normal(size=15)
    rep = collapse_metric(_hist([0.2] * 15, ood), 8)
    slope = np.polyfit(np.arange(8), ood[-8:], 1)[0]
    assert np.isclose(rep.ood_slope, slope, rtol=1e-12)
    assert np.isclose(rep.train_loss, 0.2)


def test_history_csv_roundtrip():
    h = _hist([0.1, 0.2, 1 / 3], [0.5, 0.25, np.pi])
    back = TrainHistory.from_csv(h.to_csv())
    assert back.records == h.records
    with pytest.raises(ValueError):
        h.append(dict(h.records[-1]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_theta=0)
    with pytest.raises(ValueError):
        TrainConfig(T=0)
    with pytest.raises(ValueError):
        TrainConfig(estimator="reinforce")


def test_early_stop():
    # constant labels: the loss flattens and training stops before the epoch budget
    rng = np.random.default_rng(12)
    data = EnvDataset(tuple(LabeledGraph(s.graph, 0, s.env) for s in _toy(rng)), 2)
    cfg = _cfg(epochs=400, lr_theta=0.5, early_stop_tol=1e-3, early_stop_window=5)
    _, hist = erm_train(cfg, data, data, data)
    assert hist.stopped_early and len(hist) < 400
