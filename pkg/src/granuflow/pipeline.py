"""Desk-scale hopper experiment: simulate, train one model per normal
representation, roll out and compare the versions with the paired test.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import GridSpec, VersionRow, compare_trajectories, mixing_entropy, version_table
from .dem import SceneConfig, Trajectory, hopper_training_configs, simulate
from .graph import EDGE_DIM, FeatureConfig, NormalizerStats, dataset_from_trajectory
from .learner import GnnParams, TrainConfig, evaluate_mse, rollout, train

log = logging.getLogger(__name__)


@dataclass
class HopperExperiment:
    n_train: int = 5
    n_test: int = 2
    n_particles: int = 100
    n_steps: int = 2000
    frame_stride: int = 1  # simulator steps per stored frame (the learned time step)
    sample_every: int = 10  # frames between training samples
    hole_open_step: int = 500
    versions: tuple = ("V3", "V1")
    features: FeatureConfig = field(default_factory=lambda: FeatureConfig(noise_std=0.0))
    latent: int = 32
    n_blocks: int = 2
    hidden_layers: int = 1
    training: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, epochs=25, batch_size=4))
    rollout_start: Optional[int] = None  # default: first frame after the outlet opens
    rollout_steps: int = 50
    seed: int = 0

    def scene_configs(self) -> list[SceneConfig]:
        return hopper_training_configs(
            self.n_train + self.n_test,
            seed=self.seed,
            n_particles=self.n_particles,
            n_steps=self.n_steps,
            stride=self.frame_stride,
            hole_open_step=self.hole_open_step,
        )


@dataclass
class VersionResult:
    version: str
    params: GnnParams
    stats: NormalizerStats
    loss_curve: list
    test_mse: float
    rollouts: dict  # split -> list of predicted trajectories
    emds: dict  # split -> list of per-trajectory EmdReport (dyadic steps and values)
    seconds: float


@dataclass
class ExperimentResult:
    train_trajectories: list
    test_trajectories: list
    versions: dict
    table: list

    def table_rows(self) -> list[dict]:
        return [r.row() for r in self.table]


def format_table(rows: Sequence[VersionRow]) -> str:
    """Fixed-width text rendering: one line per version and split."""
    lines = [f"{'version':<8}{'split':<7}{'n':>4}{'mean EMD':>13}{'std':>13}{'p (ref < v)':>14}"]
    for r in rows:
        p = "-" if np.isnan(r.pvalue) else f"{r.pvalue:.3e}"
        lines.append(f"{r.version:<8}{r.split:<7}{r.n:>4}{r.mean:>13.4e}{r.std:>13.4e}{p:>14}")
    return "\n".join(lines)


def run_hopper_experiment(
    exp: HopperExperiment,
    trajectories: Optional[Sequence[Trajectory]] = None,
    report: Callable[[str], None] = log.info,
) -> ExperimentResult:
    """Run the full protocol; ``trajectories`` may supply pre-simulated runs."""
    if trajectories is None:
        trajectories = []
        for i, cfg in enumerate(exp.scene_configs()):
            t = time.perf_counter()
            trajectories.append(simulate(cfg))
            report(f"simulated hopper {i} (alpha {cfg.alpha:.1f}, hole {cfg.hole_radius:.3f}) "
                   f"in {time.perf_counter() - t:.1f} s")
    train_trajs = list(trajectories[: exp.n_train])
    test_trajs = list(trajectories[exp.n_train : exp.n_train + exp.n_test])
    if len(test_trajs) != exp.n_test:
        raise ValueError(f"need {exp.n_train + exp.n_test} trajectories, got {len(trajectories)}")
    C = exp.features.history_len
    dt_frame = train_trajs[0].dt
    start = exp.rollout_start
    if start is None:
        start = max(C, int(np.ceil(exp.hole_open_step / exp.frame_stride)))

    results = {}
    for version in exp.versions:
        t = time.perf_counter()
        fc = replace(exp.features, normal_mode=version)
        train_set, stats = dataset_from_trajectory(train_trajs, fc, seed=exp.seed, sample_every=exp.sample_every)
        test_set, _ = dataset_from_trajectory(test_trajs, replace(fc, noise_std=0.0), stats=stats,
                                              sample_every=exp.sample_every)
        params = GnnParams.init(fc.node_dim, EDGE_DIM, exp.latent, exp.n_blocks, exp.hidden_layers, seed=exp.seed)
        params, curve = train(params, train_set, replace(exp.training, seed=exp.seed),
                              on_epoch=lambda e, l: report(f"{version} epoch {e} loss {l:.4g}"))
        mse = evaluate_mse(params, test_set)
        report(f"{version}: held-out one-step normalized MSE {mse:.4g}")
        rolls, emds = {}, {}
        for split, trajs in (("train", train_trajs), ("test", test_trajs)):
            rolls[split], emds[split] = [], []
            for g in trajs:
                pred = rollout(params, g, start, exp.rollout_steps, fc, stats)
                rolls[split].append(pred)
                emds[split].append(compare_trajectories(g, pred).emd)
        results[version] = VersionResult(version, params, stats, curve, mse, rolls, emds,
                                         time.perf_counter() - t)
        report(f"{version}: trained and rolled out in {results[version].seconds:.0f} s (frame dt {dt_frame:g} s)")
    values = {v: {split: [rep.values for rep in reps] for split, reps in r.emds.items()} for v, r in results.items()}
    table = version_table(values, reference=exp.versions[0])
    return ExperimentResult(train_trajs, test_trajs, results, table)


# ---------------------------------------------------------------------------
# drum mixing


def drum_mixing_scene(seed: int = 0, **overrides) -> SceneConfig:
    """Rotating drum long enough to cover the mixing transient.

    400 particles in an 8-sided drum turning at 7 rad/s; frames every 0.02 s
    for 1 s.  Past roughly 1.1 s the entropy plateaus and only fluctuates.
    """
    kw = dict(kind="drum", n_particles=400, drum_length=0.5, drum_segments=8, omega=7.0,
              n_steps=10000, stride=200, seed=seed)
    kw.update(overrides)
    return SceneConfig(**kw)


def drum_mixing_curve(traj: Trajectory, t0_time: float = 0.3, grid=(6, 1, 6), axis: int = 0):
    """Entropy curve from the frame nearest ``t0_time``; classes split at the
    median coordinate along ``axis`` at that frame."""
    t0 = int(np.argmin(np.abs(traj.times - t0_time)))
    lo, hi = traj.scene_geometry().bounds()
    threshold = float(np.median(traj.positions[t0][:, axis]))
    return mixing_entropy(traj, GridSpec.covering(lo, hi, grid), t0, (axis, threshold))
