#!/usr/bin/env python3
"""Generate a synthetic dataset, train every model and print the AUC table.

    python3 scripts/run_synthetic_experiment.py --seed 0 --out runs/bench0
    python3 scripts/run_synthetic_experiment.py --coupling linear --directions ego2side side2ego
"""

import argparse
import dataclasses
import json

from egoexo.experiment import MODELS, benchmark_experiment, format_table, run_experiment, write_report
from egoexo.models import DIRECTIONS


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--coupling", choices=("linear", "nonlinear"), default="nonlinear")
    ap.add_argument("--noise", type=float, default=None, help="override noise_sigma")
    ap.add_argument("--directions", nargs="+", choices=list(DIRECTIONS), default=["ego2side"])
    ap.add_argument("--models", nargs="+", choices=list(MODELS), default=list(MODELS))
    ap.add_argument("--epochs", type=int, default=None, help="override max_epochs")
    ap.add_argument("--out", help="write the full report here")
    args = ap.parse_args(argv)

    cfg = benchmark_experiment(args.seed, models=tuple(args.models))
    synth = dataclasses.replace(cfg.synth, coupling=args.coupling)
    if args.noise is not None:
        synth = dataclasses.replace(synth, noise_sigma=args.noise)
    if any(d.endswith("top") or d.startswith("top") for d in args.directions):
        synth = dataclasses.replace(synth, views=("side", "top"))
    train = cfg.train if args.epochs is None else dataclasses.replace(cfg.train, max_epochs=args.epochs)
    cfg = dataclasses.replace(cfg, synth=synth, train=train, directions=tuple(args.directions))

    report = run_experiment(cfg)
    if args.out:
        write_report(report, args.out)
    table = {"columns": None, "rows": report.table()}
    table["columns"] = list(next(iter(table["rows"].values())))
    print(format_table(table))
    best = {f"{d}/{m}": r.best_epoch for (d, m), r in report.results.items() if r.best_epoch is not None}
    if best:
        print("best epochs:", json.dumps(best, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
