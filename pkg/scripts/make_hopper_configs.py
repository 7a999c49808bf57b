"""Write run-configuration JSON files for the 30 varied hopper trajectories.

    python3 scripts/make_hopper_configs.py --out configs/hopper [--n 30] [--seed 0]

Each file can be passed to ``granuflow simulate --config``.
"""
import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from granuflow.dem import hopper_training_configs


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="configs/hopper")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=2000)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cfg in enumerate(hopper_training_configs(args.n, seed=args.seed, n_steps=args.steps)):
        scene = asdict(cfg)
        path = out / f"hopper_{i:02d}.json"
        path.write_text(json.dumps({"scene": scene, "seed": cfg.seed}, indent=2) + "\n")
        print(f"{path}: alpha {cfg.alpha:.2f} deg, hole radius {cfg.hole_radius:.4f} m, fill seed {cfg.seed}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
