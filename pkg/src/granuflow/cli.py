"""Command-line interface: ``granuflow <command> [options]``.

Heavy modules are imported only after ``GRANUFLOW_THREADS`` has been applied
to the BLAS/OpenMP thread-count variables, so the cap takes effect.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def apply_thread_cap(environ=os.environ) -> Optional[int]:
    value = environ.get("GRANUFLOW_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise SystemExit(f"granuflow: error: GRANUFLOW_THREADS must be an integer, got {value!r}")
    if n < 1:
        raise SystemExit("granuflow: error: GRANUFLOW_THREADS must be >= 1")
    for var in THREAD_VARS:
        environ[var] = str(n)
    return n


def _echo(command: str, config: dict, seed) -> None:
    print(f"[{command}] config: {json.dumps(config, sort_keys=True, default=str)}")
    print(f"[{command}] seed: {seed}")


def _load_config(path: Optional[str], seed: Optional[int]):
    from .config import RunConfig

    cfg = RunConfig.load(path) if path else RunConfig()
    return cfg.with_seed(seed)


def _require_files(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(f"input file not found: {p}")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> None:
    from .dem import simulate
    from .io import write_trajectory

    cfg = _load_config(args.config, args.seed)
    if args.steps is not None:
        cfg.scene.n_steps = args.steps
    _echo("simulate", {"scene": cfg.to_dict()["scene"], "material": cfg.to_dict()["material"]}, cfg.seed)
    traj = simulate(cfg.scene, cfg.material)
    write_trajectory(args.out, traj)
    print(f"[simulate] wrote {len(traj)} frames x {traj.n_particles} particles to {args.out}")


def cmd_dataset(args) -> None:
    from .graph import dataset_from_trajectory
    from .io import read_dataset, read_trajectory, write_dataset

    _require_files(*args.traj, *([args.stats_from] if args.stats_from else []))
    cfg = _load_config(args.config, args.seed)
    stride = args.stride if args.stride is not None else cfg.dataset.stride
    stats = read_dataset(args.stats_from)[2] if args.stats_from else None
    _echo("dataset", {"features": cfg.to_dict()["features"], "stride": stride, "trajectories": args.traj}, cfg.seed)
    trajs = [read_trajectory(p) for p in args.traj]
    samples, stats = dataset_from_trajectory(
        trajs, cfg.features, stride=stride, stats=stats, seed=cfg.seed, sample_every=cfg.dataset.sample_every
    )
    write_dataset(args.out, samples, cfg.features, stats)
    print(f"[dataset] wrote {len(samples)} samples to {args.out}")


def cmd_train(args) -> None:
    from .io import Checkpoint, read_dataset, write_checkpoint, write_csv
    from .learner import GnnParams, evaluate_mse, train
    from .graph import EDGE_DIM

    _require_files(args.dataset)
    cfg = _load_config(args.config, args.seed)
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    samples, features, stats = read_dataset(args.dataset)
    _echo("train", {"model": cfg.to_dict()["model"], "training": cfg.to_dict()["training"], "features": features.__dict__}, cfg.seed)
    params = GnnParams.init(
        features.node_dim, EDGE_DIM, cfg.model.latent, cfg.model.n_blocks, cfg.model.hidden_layers, seed=cfg.seed
    )
    params, curve = train(params, samples, cfg.training, on_epoch=lambda e, l: print(f"[train] epoch {e} loss {l:.6g}"))
    write_checkpoint(args.out, Checkpoint(params, features, stats, {"seed": cfg.seed, "epochs": cfg.training.epochs}))
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    write_csv(loss_csv, [{"epoch": i, "loss": v} for i, v in enumerate(curve)], ["epoch", "loss"])
    if args.eval_dataset:
        _require_files(args.eval_dataset)
        held = read_dataset(args.eval_dataset)[0]
        print(f"[train] held-out one-step MSE {evaluate_mse(params, held):.6g}")
    print(f"[train] wrote {args.out} and {loss_csv}")


def cmd_rollout(args) -> None:
    from .io import read_checkpoint, read_trajectory, write_trajectory
    from .learner import rollout

    _require_files(args.model, args.traj)
    ckpt = read_checkpoint(args.model)
    ground = read_trajectory(args.traj)
    if args.stride > 1:
        ground = ground.subsampled(args.stride)
    start = ckpt.features.history_len if args.start is None else args.start
    steps = args.steps if args.steps is not None else len(ground) - 1 - start
    _echo("rollout", {"model": args.model, "traj": args.traj, "start": start, "steps": steps, "stride": args.stride,
                      "features": ckpt.features.__dict__}, ckpt.meta.get("seed"))
    pred = rollout(ckpt.params, ground, start, steps, ckpt.features, ckpt.stats)
    write_trajectory(args.out, pred)
    print(f"[rollout] wrote {len(pred)} frames to {args.out}")


def cmd_analyze(args) -> None:
    import numpy as np

    from .analysis import AnalysisError, GridSpec, compare_trajectories, flow_profile, version_table
    from .io import read_trajectory, write_csv

    _require_files(args.ground, *args.pred)
    cfg = _load_config(args.config, args.seed)
    labels = args.labels or [f"pred{i}" for i in range(len(args.pred))]
    if len(labels) != len(args.pred):
        raise ValueError("--labels needs one label per --pred file")
    _echo("analyze", {"analysis": cfg.to_dict()["analysis"], "ground": args.ground, "pred": args.pred, "labels": labels}, cfg.seed)
    out = Path(args.out)
    ground = read_trajectory(args.ground)
    preds = [read_trajectory(p) for p in args.pred]
    a = cfg.analysis
    emds = {}
    for label, pred in zip(labels, preds):
        offset = int(pred.meta.get("rollout_start", 0))
        window = ground.subsampled(1, offset, offset + len(pred))
        pts = np.concatenate([window.positions.reshape(-1, 3), pred.positions.reshape(-1, 3)])
        scene = ground.scene_geometry()
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        if scene is not None:
            slo, shi = scene.bounds()
            lo, hi = np.minimum(lo, slo), np.maximum(hi, shi)
        grid = GridSpec.covering(lo, hi, a.grid)
        t0 = min(a.t0, len(pred) - 1)
        thr = a.split_threshold
        if thr is None:
            thr = float(np.median(window.positions[t0][:, a.split_axis]))
        comp = compare_trajectories(ground, pred, offset)
        write_csv(out / f"emd_{label}.csv", comp.emd.rows(), ["step", "emd"])
        cols = ["bin", "vx", "vy", "vz", "count"]
        write_csv(out / f"profile_time_ground_{label}.csv", comp.ground_profile.rows(), cols)
        write_csv(out / f"profile_time_{label}.csv", comp.pred_profile.rows(), cols)
        zr = (float(lo[2]), float(hi[2]))
        write_csv(out / f"profile_z_ground_{label}.csv", flow_profile(window, "per_z", a.profile_bins, z_range=zr).rows(), cols)
        write_csv(out / f"profile_z_{label}.csv", flow_profile(pred, "per_z", a.profile_bins, z_range=zr).rows(), cols)
        try:
            from .analysis import mixing_entropy

            g_ent = mixing_entropy(window, grid, t0, (a.split_axis, thr))
            p_ent = mixing_entropy(pred, grid, t0, (a.split_axis, thr))
            write_csv(out / f"entropy_ground_{label}.csv", g_ent.rows(), ["step", "time", "S"])
            write_csv(out / f"entropy_{label}.csv", p_ent.rows(), ["step", "time", "S"])
        except AnalysisError as exc:
            print(f"[analyze] entropy skipped for {label}: {exc}", file=sys.stderr)
        emds[label] = {"given": [comp.emd.values]}
        print(f"[analyze] {label}: EMD mean {comp.emd.mean:.6g} std {comp.emd.std:.6g} over {len(comp.emd.values)} steps")
    if len(labels) > 1:
        try:
            rows = version_table(emds, reference=labels[0])
            write_csv(out / "wilcoxon.csv", [r.row() for r in rows], ["version", "split", "n", "mean", "std", "statistic", "p"])
        except AnalysisError as exc:
            print(f"[analyze] Wilcoxon summary skipped: {exc}", file=sys.stderr)
    print(f"[analyze] reports written to {out}")


def cmd_toy(args) -> None:
    from .io import write_csv
    from .learner import REPRESENTATIONS, toy_reflection

    reps = REPRESENTATIONS if args.rep == "all" else (args.rep,)
    _echo("toy-reflect", {"representations": list(reps), "epochs": args.epochs}, args.seed)
    rows = []
    for rep in reps:
        _, report = toy_reflection(rep, seed=args.seed, epochs=args.epochs)
        rows.append(report.row())
        print(f"[toy-reflect] {rep}: same {report.same_mse:.6g} inverted {report.inverted_mse:.6g}")
    out = args.out or f"toy_{args.rep}_{args.seed}.csv"
    write_csv(out, rows, ["representation", "seed", "train_mse", "same_mse", "inverted_mse", "ratio"])
    print(f"[toy-reflect] wrote {out}")


def cmd_convert(args) -> None:
    from .io import dump_to_trajectory, read_dump, write_trajectory

    _require_files(args.dump)
    _echo("convert", {"dump": args.dump, "timestep_size": args.timestep_size, "radius": args.radius,
                      "density": args.density}, None)
    frames = read_dump(args.dump)
    traj = dump_to_trajectory(frames, args.timestep_size, args.radius, args.density)
    write_trajectory(args.out, traj)
    print(f"[convert] wrote {len(traj)} frames x {traj.n_particles} particles to {args.out}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="granuflow", description="Granular-flow simulation and learned-simulator lab.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a DEM scene and write a trajectory")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override scene.n_steps")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("dataset", help="build graph samples from trajectories")
    s.add_argument("--config")
    s.add_argument("--traj", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stride", type=int)
    s.add_argument("--stats-from", help="reuse normalization statistics of an existing dataset")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("train", help="train the graph network on a dataset")
    s.add_argument("--config")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.add_argument("--eval-dataset")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rollout", help="roll a trained model forward")
    s.add_argument("--model", required=True)
    s.add_argument("--traj", required=True, help="ground-truth trajectory supplying the initial frames and scene")
    s.add_argument("--out", required=True)
    s.add_argument("--start", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--stride", type=int, default=1, help="frame stride the model was trained with")
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("analyze", help="compare predicted and ground-truth trajectories")
    s.add_argument("--config")
    s.add_argument("--ground", required=True)
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--labels", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("toy-reflect", help="run the wall-reflection toy experiment")
    s.add_argument("--rep", choices=("R1", "R2", "R3", "R4", "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=3000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_toy)

    s = sub.add_parser("convert", help="convert a LIGGGHTS/LAMMPS text dump to a trajectory")
    s.add_argument("--dump", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--timestep-size", type=float, default=1.0, help="seconds per simulation timestep")
    s.add_argument("--radius", type=float, default=0.01, help="radius when the dump has none")
    s.add_argument("--density", type=float, default=2500.0)
    s.set_defaults(func=cmd_convert)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except KeyboardInterrupt:
        print(f"granuflow {args.command}: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line diagnostic instead of a traceback
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"granuflow {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
