"""Command-line entry point: ``egoexo <subcommand> [flags]``.

Every subcommand writes ``run_manifest.json`` beside its outputs. Failures
print one JSON line on stderr and exit nonzero (2 for usage, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import evaluation as ev
from .datamodel import MANIFEST_VERSION, SPLITS, load_manifest, save_manifest, split_dataset
from .experiment import (MODELS, ExperimentConfig, ModelResult, Report, benchmark_experiment,
                         direction_data, evaluate, format_table, load_data, run_experiment,
                         summarize, train_model, write_report)
from .features import FEATURE_VERSION, FeatureMatrix, FeatureStore, PcaModel, hoof, pca_apply, pca_fit
from .flow import FLOW_VERSION, read_flow_clip
from .models import DIRECTIONS, FEATURE_DIMS, MODEL_FORMAT_VERSION, load_model, save_model
from .synth import SynthConfig, benchmark_config, generate_feature_pairs, generate_flow_dataset
from .training import write_epoch_logs

FORMAT_VERSIONS = {"manifest": MANIFEST_VERSION, "feature_table": FEATURE_VERSION,
                   "flow_clip": FLOW_VERSION, "model": MODEL_FORMAT_VERSION}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{p}: config must be a JSON object")
    return doc


def _write_run_manifest(out: Path, command: str, config: dict, seed, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": config, "seed": seed, "format_versions": FORMAT_VERSIONS,
           "package_version": __version__}
    if extra:
        doc.update(extra)
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _experiment_config(args) -> ExperimentConfig:
    """Config file (or the synthetic benchmark) with command-line overrides applied."""
    if args.config:
        doc = _read_json(args.config)
    else:
        doc = benchmark_experiment(args.seed if args.seed is not None else 0).to_dict()
    if args.seed is not None:
        doc["seed"] = args.seed
        doc["train"] = {**doc.get("train", {}), "seed": args.seed}
        if doc.get("synth") is not None:
            doc["synth"] = {**doc["synth"], "seed": args.seed}
    if args.feature:
        doc["feature"] = args.feature
    if args.direction:
        doc["directions"] = args.direction
    if args.model:
        doc["models"] = args.model
    if args.metric:
        doc["metric"] = args.metric
    cfg = ExperimentConfig.from_dict(doc)
    for key in ("manifest", "features"):
        p = getattr(cfg, key)
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{key} path does not exist: {p}")
    return cfg


# subcommands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.config:
        doc = _read_json(args.config)
    else:
        doc = benchmark_config(0).to_dict() if args.preset == "benchmark" else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    out = Path(args.out)
    data = generate_flow_dataset(cfg) if args.level == "flows" else generate_feature_pairs(cfg)
    data.write(out)
    (out / "metadata.json").write_text(json.dumps(data.metadata | {"config": cfg.to_dict()},
                                                  indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "synth", cfg.to_dict(), cfg.seed, {"level": args.level})
    print(f"wrote {len(data.dataset.clips)} clips and {len(data.dataset.pairs)} pairs to {out}")
    return 0


def cmd_hoof(args) -> int:
    flows = sorted(Path(args.flows).glob("*.xvmf"))
    if not flows:
        raise FileNotFoundError(f"no .xvmf flow clips in {args.flows}")
    rows = {p.stem: hoof(read_flow_clip(p, p.stem)) for p in flows}
    fm = FeatureMatrix.from_mapping("hoof32", rows)
    out = Path(args.out)
    FeatureStore(out).save(args.split, fm)
    _write_run_manifest(out, "hoof", {"flows": str(args.flows), "split": args.split}, None,
                        {"clips": len(rows)})
    print(f"wrote {len(rows)} hoof32 descriptors to {out}")
    return 0


def _train_rows(fm: FeatureMatrix, manifest) -> FeatureMatrix:
    """Rows of clips in training videos (both views), or all rows without a manifest."""
    if manifest is None:
        return fm
    ds = load_manifest(manifest)
    train = set(ds.splits.get("train", ()))
    if not train:
        raise ValueError(f"{manifest}: no train split; run 'split' first")
    keep = [c.feature_key(fm.kind) for c in ds.clips if c.video_id in train]
    return fm.subset([k for k in keep if k in fm])


def cmd_pca(args) -> int:
    out = Path(args.out)
    store = FeatureStore(args.features)
    if args.action == "fit":
        fm = _train_rows(store.load_any("c3d4096", args.split), args.manifest)
        model = pca_fit(fm, args.out_dim)
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / "pca.npz")
        cfg = {"features": str(args.features), "manifest": args.manifest, "out_dim": args.out_dim}
        _write_run_manifest(out, "pca fit", cfg, None, {"rows": len(fm.ids)})
        print(f"fit PCA {model.in_dim}->{model.out_dim} on {len(fm.ids)} rows")
    else:
        if not args.model:
            raise UsageError("pca apply needs --model")
        model = PcaModel.load(args.model)
        reduced = pca_apply(model, store.load_any("c3d4096", args.split))
        FeatureStore(out).save(args.split, reduced)
        cfg = {"features": str(args.features), "model": args.model, "split": args.split}
        _write_run_manifest(out, "pca apply", cfg, None, {"rows": len(reduced.ids)})
        print(f"wrote {len(reduced.ids)} c3d128 rows to {out}")
    return 0


def _parse_counts(text: str) -> dict:
    counts = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        if name not in SPLITS or not value.isdigit():
            raise UsageError(f"bad --counts entry {part!r}; expected e.g. train=100,val=20,test=50")
        counts[name] = int(value)
    return counts


def cmd_split(args) -> int:
    seed = 0 if args.seed is None else args.seed
    counts = _parse_counts(args.counts)
    ds = split_dataset(load_manifest(args.manifest), counts, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(ds, out / "manifest.json")
    _write_run_manifest(out, "split", {"manifest": args.manifest, "counts": counts}, seed)
    print(", ".join(f"{s}={len(ds.splits.get(s, ()))}" for s in SPLITS))
    return 0


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    ds, fm = load_data(cfg)
    out = Path(args.out)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    trained = []
    for direction in cfg.directions:
        tr = direction_data(ds, fm, direction, "train")[:2]
        va = direction_data(ds, fm, direction, "val")[:2]
        for name in cfg.models:
            model, best, l1, l2, extra = train_model(name, cfg.feature, tr, va, cfg.train)
            model.direction, model.kind = direction, cfg.feature
            model.info.update(seed=cfg.train.seed, best_epoch=best, **extra)
            tag = f"{direction}_{name}"
            save_model(model, out / "models" / tag)
            if l1:
                write_epoch_logs(out / "logs" / f"{tag}_phase1.csv", l1)
                write_epoch_logs(out / "logs" / f"{tag}_phase2.csv", l2)
            trained.append(tag)
            print(f"{tag}: trained" + ("" if best is None else f" (best epoch {best})"))
    _write_run_manifest(out, "train", cfg.to_dict(), cfg.seed, {"models": trained})
    return 0


def cmd_eval(args) -> int:
    cfg = _experiment_config(args)
    ds, fm = load_data(cfg)
    models_dir = Path(args.models)
    out = Path(args.out)
    results = {}
    for direction in cfg.directions:
        Xte, Yte, ids = direction_data(ds, fm, direction, "test")
        for name in cfg.models:
            model = load_model(models_dir / f"{direction}_{name}")
            ranks = evaluate(model, Xte, Yte, ids, cfg.metric)
            curve = ev.cmc(ranks)
            results[(direction, name)] = ModelResult(direction, name, ranks, curve, ev.auc(curve),
                                                     model.info.get("best_epoch"))
            print(f"{direction} {name}: AUC {ev.auc(curve):.2f}")
    meta = {"metric": cfg.metric, "tie_policy": "pessimistic", "feature": cfg.feature, "seed": cfg.seed}
    write_report(Report(results, meta), out, save_models=False)
    _write_run_manifest(out, "eval", cfg.to_dict(), cfg.seed, {"models_dir": str(models_dir)})
    return 0


def cmd_report(args) -> int:
    summary = summarize(args.run)
    print(format_table(summary))
    return 0


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    report = run_experiment(cfg)
    out = Path(args.out)
    write_report(report, out)
    _write_run_manifest(out, "run", cfg.to_dict(), cfg.seed)
    print(format_table(json.loads((out / "summary.json").read_text())))
    return 0


# parser --------------------------------------------------------------------------

def _common(p, experiment: bool = False):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed (fanned out to named streams)")
    p.add_argument("--out", required=True, help="output directory")
    if experiment:
        p.add_argument("--feature", choices=sorted(FEATURE_DIMS))
        p.add_argument("--direction", action="append", choices=list(DIRECTIONS),
                       help="repeatable; overrides the config's directions")
        p.add_argument("--model", action="append", choices=list(MODELS),
                       help="repeatable; overrides the config's models")
        p.add_argument("--metric", choices=list(ev.METRICS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="egoexo", description="Ego/exo cross-view retrieval pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--level", choices=("features", "flows"), default="features")
    p.add_argument("--preset", choices=("default", "benchmark"), default="benchmark",
                   help="generator settings when no --config is given")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("hoof", help="flow clips -> hoof32 feature table")
    p.add_argument("--flows", required=True, help="directory of .xvmf clips")
    p.add_argument("--out", required=True, help="feature store directory")
    p.add_argument("--split", default="all")
    p.set_defaults(func=cmd_hoof)

    p = sub.add_parser("pca", help="fit or apply the 4096->128 projection")
    p.add_argument("action", choices=("fit", "apply"))
    p.add_argument("--features", required=True, help="store holding c3d4096 tables")
    p.add_argument("--manifest", help="fit only on clips of training videos")
    p.add_argument("--model", help="pca.npz (apply)")
    p.add_argument("--split", default="all")
    p.add_argument("--out-dim", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("split", help="assign videos to train/val/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--counts", required=True, help="e.g. train=100,val=20,test=50")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train models and save them under OUT/models")
    _common(p, experiment=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank the test gallery with saved models")
    _common(p, experiment=True)
    p.add_argument("--models", required=True, help="OUT/models directory written by 'train'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="print the 4 x 6 AUC table of a finished run")
    p.add_argument("run", help="run directory")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="train, evaluate and report in one go")
    _common(p, experiment=True)
    p.set_defaults(func=cmd_run)
    return parser


def _fail(kind: str, exc: BaseException, command: str | None, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "command": command,
                                 "message": msg}) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, argv[0] if argv else None, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        return _fail("usage", e, args.command, 2)
    except Exception as e:  # noqa: BLE001 - one-line report instead of a traceback
        return _fail("runtime", e, args.command, 1)


if __name__ == "__main__":
    raise SystemExit(main())
