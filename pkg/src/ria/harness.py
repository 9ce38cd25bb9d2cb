"""Experiment configuration, orchestration, result files, and the ``ria`` CLI.

A TOML config has three parts::

    method = "ria-vrex"            # or methods = [...] for ``ria compare``
    seeds = [1, 2, 3]
    out_dir = "runs/synth"

    [dataset]
    kind = "synth"                  # motif | amotif | synth | parity
    seed = 0
    ...                             # generator options

    [train]
    lr = 1e-3
    lr_adv = 1e-4
    epochs = 100
    ...

Exit codes: 0 success, 1 config error, 2 runtime or IO error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .gnn import GinConfig
from .graphcore import EnvDataset, read_jsonl, write_jsonl
from .oodreg import RegularizerSpec
from .scmgen import EnvSpec, LabelerSpec, SynthConfig, build_dataset, build_synth_dataset
from .trainer import TrainConfig, TrainHistory, collapse_metric, erm_train, evaluate, ria_train

log = logging.getLogger("ria")

METHODS = {"erm": "none", "ria-irm": "irm", "ria-vrex": "vrex", "ria-rice": "rice"}
DATASET_KINDS = ("motif", "amotif", "synth", "parity")
CURVE_FIELDS = ("epoch", "method", "seed", "train_loss", "ood_test_loss")
SUMMARY_FIELDS = ("method", "id_acc_mean", "id_acc_std", "ood_acc_mean", "ood_acc_std")

_TOP_KEYS = {"method", "methods", "seeds", "out_dir", "dataset", "train"}
_TRAIN_KEYS = {"lr", "lr_adv", "epochs", "num_edge_augs", "k", "arch", "num_layers",
               "p_edge_add", "p_edge_del", "hidden_dim", "readout", "eps", "T", "batch_size",
               "lam", "beta", "estimator", "aug_num_layers", "aug_hidden_dim",
               "early_stop_tol", "early_stop_window"}
_DATASET_KEYS = {"kind", "seed", "envs", "split", "id_test_per_env", "attr_dim"}
_SYNTH_KEYS = set(SynthConfig.__dataclass_fields__) - {"train_envs", "val_envs", "test_envs"}


class ConfigError(Exception):
    def __init__(self, message: str, line: int | None = None, path=None):
        super().__init__(message)
        self.line = line
        self.path = path

    def __str__(self) -> str:
        where = f"{self.path}:{self.line}: " if self.line else (f"{self.path}: " if self.path else "")
        return where + self.args[0]


def _line_of(text: str, key: str, table: str | None = None) -> int | None:
    """1-based line of ``key = ...`` (inside ``[table]`` if given), or of the table header."""
    current = None
    header = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\-]+)\s*\]+")
    assign = re.compile(rf"^\s*{re.escape(key)}\s*=") if key else None
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if key is None and current == table:
                return i
            continue
        if assign and assign.match(line) and (table is None or current == table
                                              or (current or "").startswith(table + ".")):
            return i
    return None


# -- configuration -------------------------------------------------------------

@dataclass
class DatasetConfig:
    kind: str
    seed: int = 0
    synth: SynthConfig | None = None
    envs: list = field(default_factory=list)
    labeler: LabelerSpec | None = None
    split: dict = field(default_factory=dict)
    id_test_per_env: int = 100

    def manifest(self) -> dict:
        specs = self.synth.to_dict() if self.synth else [e.to_dict() for e in self.envs]
        return {"seed": self.seed, "kind": self.kind, "specs": specs,
                "labeler": self.labeler.to_dict() if self.labeler else None,
                "split": self.split, "id_test_per_env": self.id_test_per_env}


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    train: TrainConfig
    methods: list
    seeds: list
    out_dir: Path
    source: str = ""

    @property
    def method(self) -> str:
        return self.methods[0]


def _get(table: dict, key: str, typ, default, text: str, tname: str):
    if key not in table:
        return default
    v = table[key]
    ok = isinstance(v, typ) and not (typ in (int, (int, float)) and isinstance(v, bool))
    if not ok:
        raise ConfigError(f"{tname}.{key} has the wrong type ({type(v).__name__})",
                          _line_of(text, key, tname))
    return v


def _check_keys(table: dict, allowed: set, text: str, tname: str | None):
    for k in table:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}" + (f" in [{tname}]" if tname else ""),
                              _line_of(text, k, tname))


def _parse_dataset(d: dict, text: str) -> DatasetConfig:
    if not isinstance(d, dict):
        raise ConfigError("dataset must be a table", _line_of(text, "dataset"))
    kind = d.get("kind")
    if kind not in DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}",
                          _line_of(text, "kind", "dataset") or _line_of(text, None, "dataset"))
    seed = _get(d, "seed", int, 0, text, "dataset")
    id_test = _get(d, "id_test_per_env", int, 100, text, "dataset")
    if id_test < 1:
        raise ConfigError("id_test_per_env must be positive", _line_of(text, "id_test_per_env", "dataset"))
    split = _get(d, "split", dict, {}, text, "dataset")
    for k, v in split.items():
        if k not in ("train", "val", "test") or not isinstance(v, list) \
                or not all(isinstance(e, int) for e in v):
            raise ConfigError(f"dataset.split.{k} must be train/val/test lists of env ids",
                              _line_of(text, k, "dataset.split"))
    if kind == "synth":
        _check_keys(d, _DATASET_KEYS | _SYNTH_KEYS, text, "dataset")
        opts = {k: v for k, v in d.items() if k in _SYNTH_KEYS}
        opts.update({f"{k}_envs": v for k, v in split.items()})
        try:
            synth = SynthConfig(**opts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad synth config: {exc}", _line_of(text, None, "dataset")) from exc
        split = {"train": list(synth.train_envs), "val": list(synth.val_envs),
                 "test": list(synth.test_envs)}
        return DatasetConfig(kind, seed, synth=synth, split=split, id_test_per_env=id_test)
    _check_keys(d, _DATASET_KEYS, text, "dataset")
    raw_envs = d.get("envs")
    if not isinstance(raw_envs, list) or not raw_envs:
        raise ConfigError("dataset.envs must be a nonempty array of tables",
                          _line_of(text, "envs", "dataset") or _line_of(text, None, "dataset"))
    attr_dim = _get(d, "attr_dim", int, 16 if kind == "amotif" else 0, text, "dataset")
    if kind in ("motif", "parity") and attr_dim:
        raise ConfigError(f"{kind} datasets are featureless", _line_of(text, "attr_dim", "dataset"))
    envs = []
    for i, e in enumerate(raw_envs):
        if not isinstance(e, dict):
            raise ConfigError("each env must be a table", _line_of(text, "envs", "dataset"))
        try:
            envs.append(EnvSpec(**{"env_id": i, "attr_dim": attr_dim, **e}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad env {i}: {exc}", _nth_env_line(text, i)) from exc
    ids = [e.env_id for e in envs]
    if not split:
        if len(ids) < 3:
            raise ConfigError("need an explicit split with fewer than 3 environments",
                              _line_of(text, None, "dataset"))
        split = {"train": ids[:-2], "val": [ids[-2]], "test": [ids[-1]]}
    if set(split) != {"train", "val", "test"} or not split["train"] \
            or not set(sum(split.values(), [])) <= set(ids):
        raise ConfigError("split must name train/val/test env ids that exist",
                          _line_of(text, None, "dataset.split") or _line_of(text, "split", "dataset"))
    labeler = LabelerSpec("max_degree_parity" if kind == "parity" else "motif_class")
    return DatasetConfig(kind, seed, envs=envs, labeler=labeler, split=split, id_test_per_env=id_test)


def _nth_env_line(text: str, i: int) -> int | None:
    hits = [n for n, line in enumerate(text.splitlines(), 1)
            if re.match(r"^\s*\[\[\s*dataset\.envs\s*\]\]", line)]
    return hits[i] if i < len(hits) else _line_of(text, "envs", "dataset")


def _parse_train(t: dict, text: str, methods: list) -> TrainConfig:
    if not isinstance(t, dict):
        raise ConfigError("train must be a table", _line_of(text, "train"))
    _check_keys(t, _TRAIN_KEYS, text, "train")
    num = (int, float)
    arch = _get(t, "arch", str, "gin", text, "train")
    if arch != "gin":
        raise ConfigError(f"unsupported arch {arch!r} (only 'gin')", _line_of(text, "arch", "train"))
    try:
        reg = RegularizerSpec(
            lam=float(_get(t, "lam", num, 1.0, text, "train")),
            beta=float(_get(t, "beta", num, 1.0, text, "train")),
            num_edge_augs=_get(t, "num_edge_augs", int, 10, text, "train"),
            p_add=float(_get(t, "p_edge_add", num, 0.01, text, "train")),
            p_del=float(_get(t, "p_edge_del", num, 0.01, text, "train")))
        layers = _get(t, "num_layers", int, 2, text, "train")
        hidden = _get(t, "hidden_dim", int, 32, text, "train")
        clf = GinConfig(num_layers=layers, hidden_dim=hidden,
                        readout=_get(t, "readout", str, "mean", text, "train"),
                        eps=float(_get(t, "eps", num, 0.0, text, "train")))
        aug = GinConfig(num_layers=_get(t, "aug_num_layers", int, layers, text, "train"),
                        hidden_dim=_get(t, "aug_hidden_dim", int, hidden, text, "train"))
        return TrainConfig(
            lr_theta=float(_get(t, "lr", num, 1e-3, text, "train")),
            lr_w=float(_get(t, "lr_adv", num, 1e-4, text, "train")),
            epochs=_get(t, "epochs", int, 100, text, "train"),
            T=_get(t, "T", int, 1, text, "train"),
            k=_get(t, "k", int, 0, text, "train"),
            batch_size=_get(t, "batch_size", int, 32, text, "train"),
            estimator=_get(t, "estimator", str, "straight_through", text, "train"),
            early_stop_tol=float(_get(t, "early_stop_tol", num, 1e-6, text, "train")),
            early_stop_window=_get(t, "early_stop_window", int, 10, text, "train"),
            regularizer=reg, classifier=clf, augmenter=aug)
    except ValueError as exc:
        raise ConfigError(f"bad train config: {exc}", _line_of(text, None, "train")) from exc


def parse_config(text: str, path="<config>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None, path) from exc
    try:
        _check_keys(raw, _TOP_KEYS, text, None)
        if "method" in raw and "methods" in raw:
            raise ConfigError("give either method or methods", _line_of(text, "methods"))
        methods = raw.get("methods", [raw["method"]] if "method" in raw else None)
        if not isinstance(methods, list) or not methods:
            raise ConfigError("method (or methods) is required", _line_of(text, "method") or 1)
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected one of {sorted(METHODS)}",
                                  _line_of(text, "methods") or _line_of(text, "method"))
        seeds = raw.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds must be a nonempty list of integers", _line_of(text, "seeds"))
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be distinct", _line_of(text, "seeds"))
        if "dataset" not in raw:
            raise ConfigError("missing [dataset] table", 1)
        dataset = _parse_dataset(raw["dataset"], text)
        train = _parse_train(raw.get("train", {}), text, methods)
        out_dir = raw.get("out_dir", "runs")
        if not isinstance(out_dir, str):
            raise ConfigError("out_dir must be a string", _line_of(text, "out_dir"))
    except ConfigError as exc:
        exc.path = path
        raise
    base = Path(path).parent if path != "<config>" else Path(".")
    return ExperimentConfig(dataset, train, list(methods), list(seeds), base / out_dir, text)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), str(p))


# -- datasets ------------------------------------------------------------------

@dataclass
class Splits:
    train: EnvDataset
    val: EnvDataset
    test: EnvDataset
    id_test: EnvDataset
    full: EnvDataset


def generate(dc_: DatasetConfig) -> Splits:
    s = dc_.split
    if dc_.synth is not None:
        full = build_synth_dataset(dc_.synth, dc_.seed)
        ext = build_synth_dataset(dc_.synth, dc_.seed, extra_per_env=dc_.id_test_per_env)
        counts = dict(enumerate(dc_.synth.samples_per_env))
        by_env = ext.by_env()
        id_test = EnvDataset(tuple(x for e in s["train"] for x in by_env[e][counts[e]:]),
                             full.num_classes)
    else:
        full = build_dataset(dc_.envs, dc_.labeler, dc_.seed)
        extra = [replace(e, num_samples=dc_.id_test_per_env) for e in dc_.envs if e.env_id in s["train"]]
        starts = {e.env_id: e.num_samples for e in dc_.envs}
        id_samples = []
        for e in extra:
            id_samples += build_dataset([e], dc_.labeler, dc_.seed, start_index=starts[e.env_id]).samples
        id_test = EnvDataset(tuple(id_samples), full.num_classes)
    return Splits(full.subset(s["train"]), full.subset(s["val"]), full.subset(s["test"]), id_test, full)


def write_dataset(dc_: DatasetConfig, splits: Splits, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(splits.full.samples, out_dir / "dataset.jsonl")
    manifest = dict(dc_.manifest(), num_classes=splits.full.num_classes)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# -- running -------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    history: TrainHistory
    id_test_acc: float
    ood_test_acc: float
    wall_time_s: float
    final_train_loss: float
    final_train_objective: float
    collapse: dict | None = None


def _aggregate(vals: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def train_one(method: str, tc: TrainConfig, splits: Splits, seed: int) -> SeedResult:
    cfg = replace(tc, seed=seed,
                  regularizer=replace(tc.regularizer, kind=METHODS[method]))
    if cfg.classifier is not None:
        d, c = splits.train.feature_dim, splits.train.num_classes
        aug = replace(cfg.augmenter, in_dim=max(d, 1), out_dim=max(d, 1)) if cfg.augmenter else None
        cfg = replace(cfg, classifier=replace(cfg.classifier, in_dim=d, out_dim=c),
                      augmenter=aug if d else None)
    start = time.perf_counter()
    fn = erm_train if method == "erm" else ria_train
    h, hist = fn(cfg, splits.train, splits.val, splits.test)
    _, id_acc = evaluate(h, splits.id_test) if splits.id_test.samples else (0.0, float("nan"))
    _, ood_acc = evaluate(h, splits.test) if splits.test.samples else (0.0, float("nan"))
    wall = time.perf_counter() - start
    last = hist.records[-1] if hist.records else {"train_loss": float("nan"), "train_objective": float("nan")}
    collapse = None
    if len(hist) >= 10:
        c = collapse_metric(hist, 10)
        collapse = {"train_loss": c.train_loss, "ood_slope": c.ood_slope, "collapsed": c.collapsed}
    return SeedResult(seed, hist, id_acc, ood_acc, wall, last["train_loss"],
                      last["train_objective"], collapse)


def _results_json(method: str, cfg: ExperimentConfig, runs: list[SeedResult]) -> dict:
    id_m, id_s = _aggregate([r.id_test_acc for r in runs])
    ood_m, ood_s = _aggregate([r.ood_test_acc for r in runs])
    return {
        "method": method,
        "train": cfg.train.to_dict(),
        "dataset": cfg.dataset.manifest(),
        "seeds": [{"seed": r.seed, "id_test_acc": r.id_test_acc, "ood_test_acc": r.ood_test_acc,
                   "wall_time_s": r.wall_time_s, "best_epoch": r.history.best_epoch,
                   "final_train_loss": r.final_train_loss,
                   "final_train_objective": r.final_train_objective,
                   "collapse": r.collapse, "metrics_csv": f"metrics_seed{r.seed}.csv",
                   "history": r.history.records} for r in runs],
        "aggregate": {"id_test_acc_mean": id_m, "id_test_acc_std": id_s,
                      "ood_test_acc_mean": ood_m, "ood_test_acc_std": ood_s},
    }


def run_method(cfg: ExperimentConfig, method: str, splits: Splits, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for seed in cfg.seeds:
        r = train_one(method, cfg.train, splits, seed)
        (out_dir / f"metrics_seed{seed}.csv").write_text(r.history.to_csv(), encoding="utf-8", newline="")
        log.info("%s seed %d: id %.4f ood %.4f (%.1fs)", method, seed, r.id_test_acc,
                 r.ood_test_acc, r.wall_time_s)
        runs.append(r)
    res = _results_json(method, cfg, runs)
    (out_dir / "results.json").write_text(json.dumps(res, indent=2) + "\n", encoding="utf-8")
    return res


def run_experiment(config_path, seed_override: int | None = None,
                   method: str | None = None) -> dict:
    """Generate the dataset, train every seed, write results.json, metrics CSVs and dataset files."""
    cfg = load_config(config_path)
    if seed_override is not None:
        cfg.seeds = [seed_override]
    splits = generate(cfg.dataset)
    write_dataset(cfg.dataset, splits, cfg.out_dir)
    return run_method(cfg, method or cfg.method, splits, cfg.out_dir)


def compare_methods(config_path, seed_override: int | None = None) -> list[dict]:
    """Run every configured method on one shared dataset and write summary.csv."""
    cfg = load_config(config_path)
    if seed_override is not None:
        cfg.seeds = [seed_override]
    splits = generate(cfg.dataset)
    write_dataset(cfg.dataset, splits, cfg.out_dir)
    rows = []
    for m in cfg.methods:
        res = run_method(cfg, m, splits, cfg.out_dir / m)
        a = res["aggregate"]
        rows.append({"method": m, "id_acc_mean": a["id_test_acc_mean"], "id_acc_std": a["id_test_acc_std"],
                     "ood_acc_mean": a["ood_test_acc_mean"], "ood_acc_std": a["ood_test_acc_std"]})
    write_summary(rows, cfg.out_dir / "summary.csv")
    return rows


def write_summary(rows: list[dict], path: Path) -> None:
    """summary.csv; ``*_best`` columns mark the per-column maxima of the accuracy means."""
    best = {c: max(r[c] for r in rows) for c in ("id_acc_mean", "ood_acc_mean")}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS + ("id_best", "ood_best"))
    for r in rows:
        w.writerow([r["method"]] + [repr(float(r[c])) for c in SUMMARY_FIELDS[1:]]
                   + [int(r["id_acc_mean"] == best["id_acc_mean"]),
                      int(r["ood_acc_mean"] == best["ood_acc_mean"])])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_summary(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({"method": r["method"], **{c: float(r[c]) for c in SUMMARY_FIELDS[1:]},
                    "id_best": r["id_best"] == "1", "ood_best": r["ood_best"] == "1"})
    return out


# -- curves --------------------------------------------------------------------

def export_curves(histories: Sequence[tuple[str, int, TrainHistory]], out_path) -> None:
    """Long-format loss curves: one row per (epoch, method, seed)."""
    if not histories:
        raise ValueError("no histories")
    lengths = {len(h) for _, _, h in histories}
    if len(lengths) != 1:
        raise ValueError(f"histories differ in length: {sorted(lengths)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for i in range(lengths.pop()):
        for method, seed, h in histories:
            r = h.records[i]
            w.writerow([r["epoch"], method, seed, repr(float(r["train_loss"])),
                        repr(float(r["ood_test_loss"]))])
    Path(out_path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_curves(path) -> dict:
    """Parse an ``export_curves`` file into ``{(method, seed): [(epoch, train_loss, ood_loss), ...]}``."""
    out: dict = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != CURVE_FIELDS:
            raise ValueError(f"{path}: unexpected header")
        for row in reader:
            key = (row[1], int(row[2]))
            out.setdefault(key, []).append((int(row[0]), float(row[3]), float(row[4])))
    return out


def load_run_histories(run_dir) -> list[tuple[str, int, TrainHistory]]:
    run_dir = Path(run_dir)
    res = json.loads((run_dir / "results.json").read_text(encoding="utf-8"))
    out = []
    for s in res["seeds"]:
        text = (run_dir / s["metrics_csv"]).read_text(encoding="utf-8")
        out.append((res["method"], s["seed"], TrainHistory.from_csv(text)))
    return out


# -- CLI -----------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ria", description="Graph OoD experiments with adversarial feature masks.")
    p.add_argument("--seed-override", type=int, default=None, help="run only this seed")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen", help="generate a dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    r = sub.add_parser("run", help="train the configured method")
    r.add_argument("--config", required=True)
    c = sub.add_parser("compare", help="train every configured method and write summary.csv")
    c.add_argument("--config", required=True)
    cv = sub.add_parser("curves", help="export loss curves from run directories")
    cv.add_argument("--runs", nargs="+", required=True)
    cv.add_argument("--out", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "gen":
            cfg = load_config(args.config)
            write_dataset(cfg.dataset, generate(cfg.dataset), Path(args.out))
        elif args.command == "run":
            res = run_experiment(args.config, args.seed_override)
            a = res["aggregate"]
            log.info("%s: id %.4f +- %.4f, ood %.4f +- %.4f", res["method"], a["id_test_acc_mean"],
                     a["id_test_acc_std"], a["ood_test_acc_mean"], a["ood_test_acc_std"])
        elif args.command == "compare":
            for row in compare_methods(args.config, args.seed_override):
                log.info("%-9s id %.4f ood %.4f", row["method"], row["id_acc_mean"], row["ood_acc_mean"])
        else:
            hists = [h for d in args.runs for h in load_run_histories(d)]
            export_curves(hists, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
