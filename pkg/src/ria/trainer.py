"""Alternating gradient ascent-descent training, the ERM baseline, and evaluation.

Per minibatch group (one minibatch from every training environment) RIA takes
``T`` ascent steps on the augmenter against ``E``; on the last of them it also
takes one descent step on the classifier against ``J``.  Both gradients come
from the same forward pass, before either update.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .augment import ESTIMATORS, relaxed_mask_features
from .gnn import Augmenter, Classifier, GinConfig, GraphBatch
from .graphcore import EnvDataset
from .oodreg import EnvBatch, RegularizerSpec, objectives

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc",
                  "ood_test_loss", "ood_test_acc", "train_objective")

# independent rng streams derived from the seed
_INIT_THETA, _INIT_W, _ORDER, _MASK, _RICE = range(5)


@dataclass(frozen=True)
class TrainConfig:
    lr_theta: float = 1e-3
    lr_w: float = 1e-4
    epochs: int = 100
    T: int = 1
    k: int = 0
    regularizer: RegularizerSpec = field(default_factory=RegularizerSpec)
    batch_size: int = 32
    seed: int = 0
    classifier: GinConfig | None = None
    augmenter: GinConfig | None = None
    estimator: str = "straight_through"
    early_stop_tol: float = 1e-6
    early_stop_window: int = 10
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.lr_theta <= 0 or self.lr_w <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0 or self.T < 1 or self.k < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0, T >= 1, k >= 0, batch_size >= 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.early_stop_window < 1 or self.eval_batch_size < 1:
            raise ValueError("early_stop_window and eval_batch_size must be positive")

    def arch_for(self, data: EnvDataset) -> tuple[GinConfig, GinConfig | None]:
        d = data.feature_dim
        clf = self.classifier or GinConfig(in_dim=d, out_dim=data.num_classes)
        if clf.in_dim != d or clf.out_dim != data.num_classes:
            raise ValueError(f"classifier arch ({clf.in_dim}->{clf.out_dim}) does not fit data "
                             f"({d}->{data.num_classes})")
        if d == 0:
            return clf, None
        aug = self.augmenter or GinConfig(num_layers=clf.num_layers, hidden_dim=clf.hidden_dim,
                                          in_dim=d, out_dim=d)
        return clf, aug

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regularizer"] = self.regularizer.to_dict()
        return d


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def append(self, rec: dict) -> None:
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != HISTORY_FIELDS:
            raise ValueError("not a history CSV")
        h = cls()
        for row in rows[1:]:
            h.append({"epoch": int(row[0]), **{k: float(v) for k, v in zip(HISTORY_FIELDS[1:], row[1:])}})
        return h


# -- evaluation ------------------------------------------------------------------

def predict(h: Classifier, data: EnvDataset, batch_size: int = 256) -> np.ndarray:
    """Logits for every sample, in dataset order."""
    out = []
    for i in range(0, len(data.samples), batch_size):
        chunk = data.samples[i:i + batch_size]
        out.append(h.logits(GraphBatch([s.graph for s in chunk])).value)
    return np.concatenate(out, axis=0)


def evaluate(h: Classifier, data: EnvDataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross entropy and argmax accuracy (ties go to the lowest class index)."""
    if not data.samples:
        raise ValueError("empty dataset")
    z = predict(h, data, batch_size)
    y = np.array([s.label for s in data.samples])
    loss = dc.softmax_cross_entropy(z, y).value.mean()
    acc = np.mean(np.argmax(z, axis=1) == y)
    return float(loss), float(acc)


@dataclass(frozen=True)
class CollapseReport:
    train_loss: float
    ood_slope: float
    collapsed: bool


def _ls_slope(y: np.ndarray) -> float:
    x = np.arange(len(y), dtype=np.float64)
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def collapse_metric(history: TrainHistory, window: int = 10,
                    loss_threshold: float = 0.05) -> CollapseReport:
    """Final-window mean train loss, least-squares OoD-loss slope, and the collapse flag."""
    if window < 2:
        raise ValueError("window must be at least 2")
    if len(history) < window:
        raise ValueError(f"history has {len(history)} epochs, window is {window}")
    train = history.column("train_loss")[-window:].mean()
    slope = _ls_slope(history.column("ood_test_loss")[-window:])
    return CollapseReport(float(train), slope, bool(train < loss_threshold and slope > 0))


# -- training ------------------------------------------------------------------

def _check_data(train: EnvDataset, *others: EnvDataset) -> None:
    if not train.samples:
        raise ValueError("training set is empty")
    for d in others:
        if d.num_classes != train.num_classes or (d.samples and d.feature_dim != train.feature_dim):
            raise ValueError("datasets disagree on num_classes or feature_dim")


def _minibatch_groups(train: EnvDataset, batch_size: int, rng: np.random.Generator):
    """One shuffled minibatch list per environment; shorter envs cycle."""
    per_env = {}
    for e, samples in sorted(train.by_env().items()):
        order = rng.permutation(len(samples))
        per_env[e] = [[samples[i] for i in order[j:j + batch_size]]
                      for j in range(0, len(samples), batch_size)]
    n_groups = max(len(b) for b in per_env.values())
    return [[(e, bs[g % len(bs)]) for e, bs in per_env.items()] for g in range(n_groups)]


def _check_finite(params: dc.ParamStore) -> None:
    for name, t in params.items():
        if not np.all(np.isfinite(t.value)):
            raise FloatingPointError(f"parameter {name} became non-finite")


def _score_function_surrogate(env_batches, h: Classifier, relaxed) -> dc.Tensor:
    # E[loss * grad log p]; the losses are treated as constants
    terms = []
    for eb, rm in zip(env_batches, relaxed):
        losses = dc.softmax_cross_entropy(h.logits(eb.batch, eb.x), eb.labels).value
        lp = dc.stack(rm.log_probs)
        terms.append(dc.mean(dc.mul(lp, losses)))
    return dc.mean(dc.stack(terms))


class _Run:
    def __init__(self, cfg: TrainConfig, train, val, test, adversarial: bool,
                 on_step: Callable | None):
        _check_data(train, val, test)
        self.cfg, self.train, self.val, self.test = cfg, train, val, test
        self.adversarial = adversarial
        self.on_step = on_step
        clf_cfg, aug_cfg = cfg.arch_for(train)
        self.h = Classifier(clf_cfg, np.random.default_rng([cfg.seed, _INIT_THETA]))
        self.f = None
        if adversarial and aug_cfg is not None and cfg.k > 0:
            self.f = Augmenter(aug_cfg, np.random.default_rng([cfg.seed, _INIT_W]))
        self.order_rng = np.random.default_rng([cfg.seed, _ORDER])
        self.mask_rng = np.random.default_rng([cfg.seed, _MASK])
        self.rice_rng = np.random.default_rng([cfg.seed, _RICE])
        self.spec = cfg.regularizer if adversarial else RegularizerSpec("none")
        self.step = 0

    def _env_batches(self, group):
        ebs, relaxed = [], []
        for e, samples in group:
            eb = EnvBatch.from_samples(e, samples)
            if self.adversarial:
                rm = relaxed_mask_features(self.f, eb.batch, self.cfg.k, self.mask_rng,
                                           self.cfg.estimator)
                eb.x = rm.features
                relaxed.append(rm)
            ebs.append(eb)
        return ebs, relaxed

    def run_group(self, group) -> float:
        cfg = self.cfg
        J_value = float("nan")
        for t in range(1, cfg.T + 1):
            last = t == cfg.T
            with dc.Tape() as tape:
                ebs, relaxed = self._env_batches(group)
                obj = objectives(self.h, ebs, self.spec if last else RegularizerSpec("none"),
                                 self.rice_rng)
                if self.f is not None:
                    if cfg.estimator == "score_function":
                        ascent = _score_function_surrogate(ebs, self.h, relaxed)
                    else:
                        ascent = obj.E
                    dc.grad(ascent, self.f.params, tape)
                if last:
                    dc.grad(obj.J, self.h.params, tape)
            if self.f is not None:
                dc.ascent_step(self.f.params, cfg.lr_w)
                _check_finite(self.f.params)
            if last:
                dc.descent_step(self.h.params, cfg.lr_theta)
                _check_finite(self.h.params)
                J_value = obj.J.item()
        self.step += 1
        if self.on_step is not None:
            self.on_step(self.step, self.h, self.f)
        return J_value

    def fit(self) -> tuple[Classifier, TrainHistory]:
        cfg = self.cfg
        hist = TrainHistory()
        best_acc, best_params = -1.0, self.h.params.snapshot()
        ev = lambda d: evaluate(self.h, d, cfg.eval_batch_size) if d.samples else (float("nan"),) * 2
        for epoch in range(1, cfg.epochs + 1):
            objs = [self.run_group(g) for g in _minibatch_groups(self.train, cfg.batch_size, self.order_rng)]
            tl, ta = ev(self.train)
            vl, va = ev(self.val)
            ol, oa = ev(self.test)
            hist.append(dict(epoch=epoch, train_loss=tl, train_acc=ta, val_loss=vl, val_acc=va,
                             ood_test_loss=ol, ood_test_acc=oa, train_objective=float(np.mean(objs))))
            score = va if not math.isnan(va) else ta
            if score > best_acc:
                best_acc, best_params, hist.best_epoch = score, self.h.params.snapshot(), epoch
            log.debug("epoch %d train %.4f/%.3f val %.4f/%.3f ood %.4f/%.3f",
                      epoch, tl, ta, vl, va, ol, oa)
            w = cfg.early_stop_window
            if len(hist) > w:
                recent = hist.column("train_loss")[-(w + 1):]
                if recent.max() - recent.min() < cfg.early_stop_tol:
                    hist.stopped_early = True
                    break
        final = self.h.params.snapshot()
        self.h.params.load(best_params)
        self.h.final_params = final
        return self.h, hist


def ria_train(cfg: TrainConfig, train: EnvDataset, val: EnvDataset, test: EnvDataset,
              on_step: Callable | None = None) -> tuple[Classifier, TrainHistory]:
    """Train with adversarial feature masks and the configured regularizer.

    The returned classifier holds the best-validation checkpoint; the last
    iterate is kept in ``final_params``.  ``on_step(step, h, f)`` runs after
    every minibatch group.
    """
    return _Run(cfg, train, val, test, True, on_step).fit()


def erm_train(cfg: TrainConfig, train: EnvDataset, val: EnvDataset, test: EnvDataset,
              on_step: Callable | None = None) -> tuple[Classifier, TrainHistory]:
    """Plain descent on the environment-averaged clean cross entropy."""
    return _Run(cfg, train, val, test, False, on_step).fit()
