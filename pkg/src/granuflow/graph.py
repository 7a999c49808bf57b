"""Graph samples from particle frames.

Real particles become nodes connected within the connectivity radius.  A
virtual boundary node is inserted at the closest point of every triangle that
lies within reach of a particle; it is wired to that particle only and carries
the triangle's normal according to the chosen normal mode:

* ``V1`` - no normal information (six zero slots)
* ``V2`` - the normal given by the mesh corner order, then three zeros
* ``V3`` - both orientations, sorted by the sign-pattern key
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dem import Trajectory
from .geometry import TriMesh, cell_list_candidates, closest_point_kernel, nearby_triangle_pairs

NORMAL_MODES = ("V1", "V2", "V3")
EDGE_DIM = 4


@dataclass
class FeatureConfig:
    connectivity_radius: float = 0.03
    history_len: int = 5
    normal_mode: str = "V3"
    type_weight: float = 1.0
    normal_weight: float = 1.0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.normal_mode not in NORMAL_MODES:
            raise ValueError(f"normal_mode must be one of {NORMAL_MODES}")
        if not self.connectivity_radius > 0:
            raise ValueError("connectivity_radius must be positive")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if not (self.type_weight > 0 and self.normal_weight > 0):
            raise ValueError("feature weights must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def node_dim(self) -> int:
        return 3 * self.history_len + 1 + 6


@dataclass
class NormalizerStats:
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(3))
    velocity_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        for name in ("target_mean", "target_std", "velocity_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))
        if np.any(self.target_std <= 0) or np.any(self.velocity_std <= 0):
            raise ValueError("normalization std must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("target_mean", "target_std", "velocity_std")}

    @classmethod
    def from_dict(cls, d) -> "NormalizerStats":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})

    def normalize_targets(self, acc):
        return (acc - self.target_mean) / self.target_std

    def denormalize_targets(self, acc):
        return acc * self.target_std + self.target_mean


@dataclass
class VirtualNodes:
    owner: np.ndarray
    triangle: np.ndarray
    position: np.ndarray
    normal_pairs: np.ndarray
    mesh_normal: np.ndarray
    wall_velocity: np.ndarray

    def __len__(self) -> int:
        return len(self.owner)

    @classmethod
    def empty(cls) -> "VirtualNodes":
        idx = np.zeros(0, np.int64)
        return cls(idx, idx.copy(), np.zeros((0, 3)), np.zeros((0, 6)), np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass
class GraphSample:
    """Nodes are ordered real particles first, then virtual nodes.

    ``edges[:, 0]`` sends to ``edges[:, 1]``; edges are sorted by receiver and,
    within a receiver, by label-independent keys (edge then sender features).
    """

    node_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    n_real: int
    targets: Optional[np.ndarray] = None
    frame_index: int = -1

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)


def neighbor_pairs(positions, radius: float) -> np.ndarray:
    """Directed pairs (both directions) of points closer than ``radius``."""
    pos = np.asarray(positions, dtype=float)
    i, j = cell_list_candidates(pos, radius)
    dist = np.sqrt(np.sum((pos[i] - pos[j]) ** 2, axis=1))
    keep = dist < radius
    i, j = i[keep], j[keep]
    pairs = np.concatenate([np.stack([i, j], 1), np.stack([j, i], 1)]).reshape(-1, 2)
    return pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]


def insert_virtual_nodes(
    positions, mesh: TriMesh, cfg: FeatureConfig, wall_velocity: Optional[Callable] = None
) -> VirtualNodes:
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    R = cfg.connectivity_radius
    pi, ti = nearby_triangle_pairs(pos, mesh, R)
    if len(pi):
        B, E0, E1 = mesh.canonical
        _, _, cp, sq, _ = closest_point_kernel(pos[pi], B[ti], E0[ti], E1[ti])
        keep = sq < R * R
        pi, ti, cp = pi[keep], ti[keep], cp[keep]
    else:
        cp = np.zeros((0, 3))
    if wall_velocity is not None and len(pi):
        wv = np.asarray(wall_velocity(cp), dtype=float).reshape(-1, 3)
    else:
        wv = np.zeros((len(pi), 3))
    return VirtualNodes(
        owner=pi,
        triangle=ti,
        position=cp,
        normal_pairs=mesh.canonical_normal_pairs[ti] if len(ti) else np.zeros((0, 6)),
        mesh_normal=mesh.normals[ti] if len(ti) else np.zeros((0, 3)),
        wall_velocity=wv,
    )


def encode_node_features(velocity_history, virtuals: VirtualNodes, cfg: FeatureConfig) -> np.ndarray:
    """Node feature rows: C velocity frames (oldest first), type flag, normal block."""
    vh = np.asarray(velocity_history, dtype=float)
    C = cfg.history_len
    if vh.ndim != 3 or vh.shape[0] < C:
        raise ValueError(f"velocity history needs {C} frames, got {vh.shape[0] if vh.ndim == 3 else 0}")
    vh = vh[-C:]
    n, v = vh.shape[1], len(virtuals)
    feats = np.zeros((n + v, cfg.node_dim))
    feats[:n, : 3 * C] = vh.transpose(1, 0, 2).reshape(n, 3 * C)
    if v:
        feats[n:, : 3 * C] = np.tile(virtuals.wall_velocity, (1, C))
        feats[n:, 3 * C] = cfg.type_weight
        if cfg.normal_mode == "V2":
            feats[n:, 3 * C + 1 : 3 * C + 4] = cfg.normal_weight * virtuals.mesh_normal
        elif cfg.normal_mode == "V3":
            feats[n:, 3 * C + 1 :] = cfg.normal_weight * virtuals.normal_pairs
    return feats


def _edge_block(positions, virtuals: VirtualNodes, n: int, R: float):
    pairs = neighbor_pairs(positions, R)
    v_idx = n + np.arange(len(virtuals))
    to_v = np.stack([virtuals.owner, v_idx], 1)
    from_v = np.stack([v_idx, virtuals.owner], 1)
    edges = np.concatenate([pairs, to_v, from_v]).astype(np.int64).reshape(-1, 2)
    node_pos = np.concatenate([positions, virtuals.position]) if len(virtuals) else positions
    disp = (node_pos[edges[:, 1]] - node_pos[edges[:, 0]]) / R
    dist = np.sqrt(np.sum(disp**2, axis=1))
    return edges, np.concatenate([disp, dist[:, None]], axis=1)


def _sort_edges(edges, edge_feats, node_feats):
    if not len(edges):
        return edges, edge_feats
    sender = node_feats[edges[:, 0]]
    keys = [sender[:, c] for c in range(sender.shape[1] - 1, -1, -1)]
    keys += [edge_feats[:, c] for c in range(edge_feats.shape[1] - 1, -1, -1)]
    keys.append(edges[:, 1])
    order = np.lexsort(keys)
    return edges[order], edge_feats[order]


def build_graph(
    position_history,
    mesh: Optional[TriMesh],
    cfg: FeatureConfig,
    dt: float,
    stats: Optional[NormalizerStats] = None,
    wall_velocity: Optional[Callable] = None,
) -> GraphSample:
    """Graph for the last frame of ``position_history`` (C+1 frames, oldest first)."""
    hist = np.asarray(position_history, dtype=float)
    C = cfg.history_len
    if hist.ndim != 3 or len(hist) < C + 1:
        raise ValueError(f"need {C + 1} position frames to form {C} velocities")
    hist = hist[-(C + 1) :]
    vel = np.diff(hist, axis=0) / dt
    current = hist[-1]
    n = current.shape[0]
    if mesh is not None and len(mesh):
        virt = insert_virtual_nodes(current, mesh, cfg, wall_velocity)
    else:
        virt = VirtualNodes.empty()
    feats = encode_node_features(vel, virt, cfg)
    if stats is not None:
        feats[:, : 3 * C] /= np.tile(stats.velocity_std, C)
    edges, efeats = _edge_block(current, virt, n, cfg.connectivity_radius)
    edges, efeats = _sort_edges(edges, efeats, feats)
    return GraphSample(feats, edges, efeats, n)


def acceleration_targets(positions, k: int, dt: float) -> np.ndarray:
    """Second difference that exactly inverts the semi-implicit Euler update."""
    return (positions[k + 1] - 2.0 * positions[k] + positions[k - 1]) / (dt * dt)


def build_sample(
    traj: Trajectory,
    k: int,
    cfg: FeatureConfig,
    stats: Optional[NormalizerStats] = None,
    rng: Optional[np.random.Generator] = None,
) -> GraphSample:
    C = cfg.history_len
    if not C <= k < len(traj) - 1:
        raise IndexError(f"frame {k} outside [{C}, {len(traj) - 2}]")
    hist = traj.positions[k - C : k + 1].copy()
    if cfg.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        steps = rng.normal(0.0, cfg.noise_std / np.sqrt(C + 1), size=hist.shape)
        hist = hist + np.cumsum(steps, axis=0)
    scene = traj.scene_geometry()
    mesh = traj.mesh_at_time(float(traj.times[k])) if scene is not None else None
    wall_v = scene.wall_velocity if scene is not None and scene.omega else None
    sample = build_graph(hist, mesh, cfg, traj.dt, stats, wall_v)
    target = (traj.positions[k + 1] - 2.0 * hist[-1] + hist[-2]) / (traj.dt * traj.dt)
    sample.targets = target if stats is None else stats.normalize_targets(target)
    sample.frame_index = k
    return sample


def compute_stats(samples: Sequence[GraphSample], cfg: FeatureConfig) -> NormalizerStats:
    """Per-axis statistics over raw (unnormalized) samples, two-pass."""
    C = cfg.history_len
    tgt = np.concatenate([s.targets for s in samples])
    vel = np.concatenate([s.node_features[: s.n_real, : 3 * C].reshape(-1, 3) for s in samples])
    mean = tgt.mean(axis=0)
    std = np.sqrt(np.mean((tgt - mean) ** 2, axis=0))
    vstd = np.sqrt(np.mean(vel**2, axis=0))
    # spreads at roundoff level (e.g. pure free fall) would amplify noise
    std = np.where(std > 1e-9 * np.maximum(np.abs(mean), 1.0), std, 1.0)
    vstd = np.where(vstd > 0, vstd, 1.0)
    return NormalizerStats(mean, std, vstd)


def normalize_sample(sample: GraphSample, stats: NormalizerStats, cfg: FeatureConfig) -> GraphSample:
    C = cfg.history_len
    feats = sample.node_features.copy()
    feats[:, : 3 * C] /= np.tile(stats.velocity_std, C)
    targets = None if sample.targets is None else stats.normalize_targets(sample.targets)
    return GraphSample(feats, sample.edges, sample.edge_features, sample.n_real, targets, sample.frame_index)


def dataset_from_trajectory(
    trajectories,
    cfg: FeatureConfig,
    stride: int = 1,
    stats: Optional[NormalizerStats] = None,
    seed: int = 0,
    sample_every: int = 1,
) -> tuple[list[GraphSample], NormalizerStats]:
    """Samples over the valid frames of one or more trajectories.

    Frames are subsampled by ``stride`` first, so targets use the effective
    step ``stride * dt``; ``sample_every`` then keeps every n-th valid frame
    without changing that step.  Statistics are computed over the emitted samples
    unless ``stats`` is given (e.g. training statistics for a test set).
    """
    if stride < 1 or sample_every < 1:
        raise ValueError("stride and sample_every must be >= 1")
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    rng = np.random.default_rng(seed)
    raw = []
    C = cfg.history_len
    for traj in trajectories:
        sub = traj.subsampled(stride)
        if len(sub) < C + 2:
            raise ValueError(f"trajectory has {len(sub)} strided frames, need at least {C + 2}")
        raw += [build_sample(sub, k, cfg, None, rng) for k in range(C, len(sub) - 1, sample_every)]
    if stats is None:
        stats = compute_stats(raw, cfg)
    return [normalize_sample(s, stats, cfg) for s in raw], stats
