"""Trajectory rollout with a learned (or any) acceleration predictor."""
from __future__ import annotations

from typing import Callable, Optional, Union

import numpy as np

from ..dem import Trajectory
from ..graph import FeatureConfig, GraphSample, NormalizerStats, build_graph
from .nn import GnnParams, gnn_forward

Predictor = Callable[[GraphSample], np.ndarray]


class RolloutError(RuntimeError):
    pass


def _as_predictor(model) -> Predictor:
    if isinstance(model, GnnParams):
        return lambda sample: gnn_forward(model, sample)
    if callable(model):
        return model
    raise TypeError("model must be GnnParams or a callable")


def rollout(
    model: Union[GnnParams, Predictor],
    ground: Trajectory,
    start: int,
    n_steps: int,
    cfg: FeatureConfig,
    stats: NormalizerStats,
    bounds: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> Trajectory:
    """Roll the model forward from frame ``start`` of ``ground``.

    The ``C + 1`` frames ending at ``start`` seed the history; every step
    rebuilds the graph (virtual nodes included) against the mesh pose of that
    frame, de-normalizes the predicted accelerations and applies
    ``v += dt * a; p += dt * v``.  The returned trajectory begins with frame
    ``start`` and holds ``n_steps`` predicted frames after it.
    """
    C = cfg.history_len
    if start < C:
        raise ValueError(f"rollout needs {C + 1} initial frames; start must be >= {C}")
    predict = _as_predictor(model)
    dt = ground.dt
    scene = ground.scene_geometry()
    wall_v = scene.wall_velocity if scene is not None and scene.omega else None
    if bounds is None and scene is not None:
        bounds = scene.bounds()
    margin = 10.0 * float(ground.radii.max()) if ground.n_particles else 0.0

    hist = [p for p in ground.positions[start - C : start + 1]]
    t0 = float(ground.times[start])
    positions = [hist[-1]]
    velocities = [(hist[-1] - hist[-2]) / dt]
    times = [t0]
    for s in range(n_steps):
        t = t0 + s * dt
        mesh = ground.mesh_at_time(t) if scene is not None else None
        sample = build_graph(np.array(hist[-(C + 1) :]), mesh, cfg, dt, stats, wall_v)
        sample.frame_index = start + s
        acc = stats.denormalize_targets(np.asarray(predict(sample), dtype=float))
        vel = (hist[-1] - hist[-2]) / dt + dt * acc
        pos = hist[-1] + dt * vel
        if not np.isfinite(pos).all():
            raise RolloutError(f"non-finite positions at rollout step {s + 1}")
        if bounds is not None:
            lo, hi = bounds
            out = np.any((pos < lo - margin) | (pos > hi + margin), axis=1)
            if out.any():
                raise RolloutError(f"particle {int(np.argmax(out))} left the scene bounds at rollout step {s + 1}")
        hist.append(pos)
        hist = hist[-(C + 1) :]
        positions.append(pos)
        velocities.append(vel)
        times.append(t0 + (s + 1) * dt)
    return Trajectory(
        np.array(positions),
        np.array(velocities),
        np.array(times),
        ground.radii,
        ground.masses,
        dt,
        scene=ground.scene,
        mesh_angles=None if scene is None else np.array([scene.angle_at(scene.step_of(t)) for t in times]),
        meta={"rollout_start": start},
    )
