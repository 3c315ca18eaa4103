"""End-to-end runs: train every requested model per direction, rank the test
gallery, and write CMC curves plus the AUC summary table."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .datamodel import SPLITS, Dataset, enumerate_feature_pairs, load_manifest, split_dataset, stack_pairs
from .features import FeatureMatrix, FeatureStore
from .models import (DIRECTIONS, FEATURE_DIMS, DirectMapper, NetMapper, fit_ols, fit_ridge,
                     save_model, select_ridge_lambda)
from .synth import SynthConfig, benchmark_config, generate_feature_pairs
from .training import (EpochLog, TrainConfig, reconstruction_protocol, two_stream_protocol,
                       write_epoch_logs)

log = logging.getLogger(__name__)

MODELS = ("uniform", "ols", "ridge", "reconstruction", "two_stream")
COLUMNS = ("Random", "Uniform", "Regression", "Regression L2", "Non-linear Mapping", "Two-stream")
MODEL_COLUMN = dict(zip(MODELS, COLUMNS[1:]))
ROWS = {"ego2side": "Ego-Side", "side2ego": "Side-Ego", "ego2top": "Ego-Top", "top2ego": "Top-Ego"}
TIE_POLICY = "pessimistic"
BENCHMARK_SPLIT = {"train": 100, "val": 20, "test": 50}
BENCHMARK_MODELS = ("uniform", "ols", "reconstruction", "two_stream")


@dataclass
class ExperimentConfig:
    feature: str = "hoof32"
    directions: tuple[str, ...] = ("ego2side", "side2ego", "ego2top", "top2ego")
    models: tuple[str, ...] = MODELS
    metric: str = "euclidean"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    features: str | None = None
    synth: SynthConfig | None = None
    split_counts: dict | None = None

    def __post_init__(self):
        self.directions = tuple(self.directions)
        self.models = tuple(self.models)
        if not self.directions or not self.models:
            raise ValueError("need at least one direction and one model")
        for d in self.directions:
            if d not in DIRECTIONS:
                raise ValueError(f"unknown direction {d!r}")
        for m in self.models:
            if m not in MODELS:
                raise ValueError(f"unknown model {m!r}")
        if self.metric not in ev.METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.feature not in FEATURE_DIMS:
            raise ValueError(f"feature must be one of {sorted(FEATURE_DIMS)}")
        if (self.synth is None) == (self.manifest is None):
            raise ValueError("give exactly one of 'synth' or 'manifest'")
        if self.manifest is not None and self.features is None:
            raise ValueError("'manifest' needs a 'features' directory")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        if d.get("synth") is not None:
            d["synth"] = SynthConfig.from_dict(d["synth"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "directions": list(self.directions),
            "models": list(self.models),
            "metric": self.metric,
            "seed": self.seed,
            "train": self.train.to_dict(),
            "manifest": self.manifest,
            "features": self.features,
            "synth": None if self.synth is None else self.synth.to_dict(),
            "split_counts": self.split_counts,
        }


@dataclass
class ModelResult:
    direction: str
    model: str
    ranks: list[ev.RankingResult]
    curve: ev.CmcCurve
    auc: float
    best_epoch: int | None = None
    phase1_logs: list[EpochLog] = field(default_factory=list)
    phase2_logs: list[EpochLog] = field(default_factory=list)
    trained: object = None
    extra: dict = field(default_factory=dict)

    @property
    def gallery_size(self) -> int:
        return self.curve.gallery_size


@dataclass
class Report:
    results: dict  # (direction, model) -> ModelResult
    metadata: dict

    def table(self) -> dict:
        """{row label: {column: AUC or None}} in the fixed 4 x 6 layout."""
        out = {}
        for d, row in ROWS.items():
            cells = {c: None for c in COLUMNS}
            sizes = [r.gallery_size for (dd, _), r in self.results.items() if dd == d]
            if sizes:
                cells["Random"] = ev.random_auc(sizes[0])
            for (dd, m), r in self.results.items():
                if dd == d:
                    cells[MODEL_COLUMN[m]] = r.auc
            out[row] = cells
        return out


def benchmark_experiment(seed: int, models=BENCHMARK_MODELS) -> "ExperimentConfig":
    """Ego-to-side run on the frozen synthetic benchmark."""
    return ExperimentConfig(synth=benchmark_config(seed), directions=("ego2side",), models=models,
                            split_counts=dict(BENCHMARK_SPLIT), seed=seed, train=TrainConfig(seed=seed))


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, FeatureMatrix]:
    if cfg.synth is not None:
        data = generate_feature_pairs(cfg.synth)
        ds, fm = data.dataset, data.features
    else:
        ds = load_manifest(cfg.manifest)
        fm = FeatureStore(cfg.features).load("all", cfg.feature)
    if fm.kind != cfg.feature:
        raise ValueError(f"features are {fm.kind}, experiment asks for {cfg.feature}")
    if not any(ds.splits.get(s) for s in SPLITS):
        if cfg.split_counts is None:
            raise ValueError("dataset has no splits and no split_counts were given")
        ds = split_dataset(ds, cfg.split_counts, cfg.seed)
    return ds, fm


def direction_data(ds: Dataset, fm: FeatureMatrix, direction: str, split: str):
    """(X_source, Y_target, source clip ids) for one direction and split."""
    src, tgt = DIRECTIONS[direction]
    view = tgt if src == "ego" else src
    entries = enumerate_feature_pairs(ds, split, fm.kind, fm, view=view)
    X, Y = stack_pairs(entries, "ego" if src == "ego" else "exo", fm.dim)
    ids = [e.pair.ego if src == "ego" else e.pair.exo for e in entries]
    return X, Y, ids


def train_model(name: str, kind: str, train, val, config: TrainConfig):
    """Returns (model, best_epoch, phase1 logs, phase2 logs, extra)."""
    merged = (np.concatenate([train[0], val[0]]), np.concatenate([train[1], val[1]]))
    if name == "uniform":
        return DirectMapper(train[0].shape[1]), None, [], [], {}
    if name == "ols":
        return fit_ols(*merged, fit_intercept=config.fit_intercept), None, [], [], {}
    if name == "ridge":
        lam, extra = config.ridge_lambda, {}
        if config.ridge_grid:
            lam, scores = select_ridge_lambda(*train, *val, fit_intercept=config.fit_intercept)
            extra["grid_val_mse"] = scores
        extra["lambda"] = lam
        return fit_ridge(*merged, lam, fit_intercept=config.fit_intercept), None, [], [], extra
    if name == "reconstruction":
        res = reconstruction_protocol(kind, train, val, config)
        return NetMapper(res.model), res.best_epoch, res.phase1_logs, res.phase2_logs, {}
    if name == "two_stream":
        res = two_stream_protocol(kind, train, val, config)
        return res.model, res.best_epoch, res.phase1_logs, res.phase2_logs, {}
    raise ValueError(f"unknown model {name!r}")


def evaluate(model, X_test, Y_test, ids, metric: str) -> list[ev.RankingResult]:
    """Every test query against the whole test gallery; query i's match is row i."""
    truth = np.arange(len(X_test))
    if model.variant == "two_stream":
        return ev.rank_all_scored(model, X_test, Y_test, truth, ids)
    return ev.rank_all_mapped(model, X_test, Y_test, truth, metric, ids)


def run_experiment(cfg: ExperimentConfig) -> Report:
    ds, fm = load_data(cfg)
    results = {}
    for direction in cfg.directions:
        tr = direction_data(ds, fm, direction, "train")[:2]
        va = direction_data(ds, fm, direction, "val")[:2]
        Xte, Yte, ids = direction_data(ds, fm, direction, "test")
        if len(Xte) == 0:
            raise ValueError(f"{direction}: test split has no pairs")
        for name in cfg.models:
            log.info("training %s for %s", name, direction)
            model, best, l1, l2, extra = train_model(name, cfg.feature, tr, va, cfg.train)
            model.direction, model.kind = direction, cfg.feature
            model.info.update(seed=cfg.train.seed, best_epoch=best, **extra)
            ranks = evaluate(model, Xte, Yte, ids, cfg.metric)
            curve = ev.cmc(ranks)
            results[(direction, name)] = ModelResult(direction, name, ranks, curve, ev.auc(curve),
                                                     best, l1, l2, model, extra)
    meta = {
        "metric": cfg.metric,
        "tie_policy": TIE_POLICY,
        "two_stream_ranking": "descending logit (same order as probability)",
        "negative_ratio": cfg.train.negative_ratio,
        "feature": cfg.feature,
        "seed": cfg.seed,
        "train_seed": cfg.train.seed,
        "split_sizes": {s: len(ds.splits.get(s, ())) for s in SPLITS},
    }
    return Report(results, meta)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.2f}"


def write_report(report: Report, out_dir, save_models: bool = True) -> None:
    out = Path(out_dir)
    for sub in ("cmc", "logs", "results", "ranks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for (d, m), r in sorted(report.results.items()):
        tag = f"{d}_{m}"
        ev.write_cmc_csv(out / "cmc" / f"{tag}.csv", r.curve)
        with open(out / "ranks" / f"{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "rank", "gallery_size"])
            for rr in r.ranks:
                w.writerow([rr.query_id, rr.rank, rr.gallery_size])
        if r.phase1_logs:
            write_epoch_logs(out / "logs" / f"{tag}_phase1.csv", r.phase1_logs)
            write_epoch_logs(out / "logs" / f"{tag}_phase2.csv", r.phase2_logs)
        result = {"direction": d, "model": m, "auc": r.auc, "gallery_size": r.gallery_size,
                  "queries": len(r.ranks), "best_epoch": r.best_epoch,
                  "extra": r.extra}
        (out / "results" / f"{tag}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        if save_models and r.trained is not None:
            save_model(r.trained, out / "models" / tag)
    (out / "report_meta.json").write_text(json.dumps(report.metadata, indent=2, sort_keys=True) + "\n")
    summarize(out)


def summarize(run_dir) -> dict:
    """Rebuild summary.csv / summary.json / cmc_long.csv from a run's results/ and cmc/."""
    run = Path(run_dir)
    files = sorted((run / "results").glob("*.json"))
    if not files:
        raise FileNotFoundError(f"{run}: no results to summarise")
    table = {row: {c: None for c in COLUMNS} for row in ROWS.values()}
    long_rows = []
    for f in files:
        r = json.loads(f.read_text())
        row = ROWS[r["direction"]]
        table[row]["Random"] = ev.random_auc(r["gallery_size"])
        table[row][MODEL_COLUMN[r["model"]]] = r["auc"]
        with open(run / "cmc" / f"{r['direction']}_{r['model']}.csv", newline="") as fh:
            for rec in csv.DictReader(fh):
                long_rows.append([r["model"], r["direction"], rec["k"], rec["cmc_k"]])
    meta_path = run / "report_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(run / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", *COLUMNS])
        for row, cells in table.items():
            w.writerow([row, *(_fmt(cells[c]) for c in COLUMNS)])
    summary = {"columns": list(COLUMNS), "rows": table, "metadata": meta}
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(run / "cmc_long.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "direction", "k", "cmc_k"])
        w.writerows(long_rows)
    return summary


def format_table(summary: dict) -> str:
    cols = summary["columns"]
    lines = [" | ".join(["scenario".ljust(9)] + [c.rjust(len(c)) for c in cols])]
    for row, cells in summary["rows"].items():
        vals = ["-" if cells[c] is None else f"{cells[c]:.2f}" for c in cols]
        lines.append(" | ".join([row.ljust(9)] + [v.rjust(len(c)) for c, v in zip(cols, vals)]))
    return "\n".join(lines)
