"""Hopper experiment: simulate, train V3 and V1 models, roll out, compare.

    python3 scripts/hopper_pipeline.py --out runs/hopper [--seed 0] [--epochs 25]

Writes the per-version summary table (version, split, n, mean, std,
statistic, p) as CSV plus one EMD CSV per version/split/trajectory.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from granuflow.io import Checkpoint, write_checkpoint, write_csv
from granuflow.pipeline import HopperExperiment, format_table, run_hopper_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/hopper")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-train", type=int, default=5)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--versions", nargs="+", default=["V3", "V1"])
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    exp = HopperExperiment(n_train=args.n_train, n_test=args.n_test, versions=tuple(args.versions), seed=args.seed)
    if args.epochs is not None:
        exp.training = replace(exp.training, epochs=args.epochs)
    print(f"[hopper] config: {exp}")
    result = run_hopper_experiment(exp, report=lambda msg: print(f"[hopper] {msg}", flush=True))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "summary.csv", result.table_rows(), ["version", "split", "n", "mean", "std", "statistic", "p"])
    for version, r in result.versions.items():
        write_checkpoint(out / f"model_{version}.ckpt",
                         Checkpoint(r.params, replace(exp.features, normal_mode=version), r.stats,
                                    {"seed": exp.seed, "test_mse": r.test_mse}))
        write_csv(out / f"loss_{version}.csv", [{"epoch": i, "loss": v} for i, v in enumerate(r.loss_curve)])
        for split, reports in r.emds.items():
            for i, rep in enumerate(reports):
                write_csv(out / f"emd_{version}_{split}{i}.csv", rep.rows(), ["step", "emd"])
    print(format_table(result.table))
    print(f"[hopper] results written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
