"""Wall-reflection toy: same- vs inverted-orientation error for R1-R4.

    python3 scripts/toy_reflection.py --out runs/toy.csv [--seeds 0 1 2] [--epochs 3000]
"""
import argparse
import sys

from granuflow.io import write_csv
from granuflow.learner.toy import REPRESENTATIONS, toy_reflection


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="toy_reflection.csv")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int, default=3000)
    args = p.parse_args(argv)
    rows = []
    for seed in args.seeds:
        for rep in REPRESENTATIONS:
            _, report = toy_reflection(rep, seed=seed, epochs=args.epochs)
            rows.append(report.row())
            print(f"[toy] seed {seed} {rep}: same {report.same_mse:.3e} inverted {report.inverted_mse:.3e} "
                  f"ratio {report.ratio:.3g}", flush=True)
    write_csv(args.out, rows, ["representation", "seed", "train_mse", "same_mse", "inverted_mse", "ratio"])
    print(f"[toy] wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
