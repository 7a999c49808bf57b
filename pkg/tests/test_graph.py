import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granuflow.dem import SceneConfig, Trajectory, box_mesh, simulate
from granuflow.geometry import TriMesh, all_pairs_within, mesh_min_distance
from granuflow.graph import (
    FeatureConfig,
    NormalizerStats,
    build_graph,
    build_sample,
    compute_stats,
    dataset_from_trajectory,
    encode_node_features,
    insert_virtual_nodes,
    neighbor_pairs,
)

R = 0.03
G = np.array([0.0, 0.0, -9.81])
FLOOR = TriMesh(np.array([[[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]]]))


def free_fall(n_frames=20, n=6, dt=1e-3, seed=0):
    """Ballistic frames produced by the semi-implicit Euler update."""
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, size=(n, 3))
    v = rng.normal(0, 0.3, size=(n, 3))
    pos, vel = [p], [v]
    for _ in range(n_frames - 1):
        v = v + dt * G
        p = p + dt * v
        pos.append(p)
        vel.append(v)
    times = dt * np.arange(n_frames)
    return Trajectory(np.array(pos), np.array(vel), times, np.full(n, 0.01), np.ones(n), dt)


def static_history(positions, C=5):
    return np.repeat(np.asarray(positions, float)[None], C + 1, axis=0)


def test_feature_config_validation():
    with pytest.raises(ValueError):
        FeatureConfig(connectivity_radius=0)
    with pytest.raises(ValueError):
        FeatureConfig(history_len=0)
    with pytest.raises(ValueError):
        FeatureConfig(normal_mode="V4")
    with pytest.raises(ValueError):
        FeatureConfig(type_weight=0.0)


@pytest.mark.parametrize("C", [1, 3, 5, 8])
def test_node_width_is_3c_plus_7(C):
    cfg = FeatureConfig(history_len=C)
    assert cfg.node_dim == 3 * C + 7
    s = build_graph(static_history([[0, 0, 0.01], [0.5, 0.5, 0.5]], C), FLOOR, cfg, 1e-3)
    assert s.node_features.shape[1] == 3 * C + 7


def test_neighbor_threshold_is_strict():
    assert len(neighbor_pairs([[0, 0, 0], [R, 0, 0]], R)) == 0
    pairs = neighbor_pairs([[0, 0, 0], [0.99 * R, 0, 0]], R)
    assert sorted(map(tuple, pairs)) == [(0, 1), (1, 0)]


def test_neighbor_pairs_match_all_pairs_on_300_points():
    pos = np.random.default_rng(1).uniform(0, 0.3, size=(300, 3))
    pairs = {tuple(p) for p in neighbor_pairs(pos, R)}
    i, j = all_pairs_within(pos, R)
    assert pairs == set(zip(i, j)) | set(zip(j, i))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_neighbor_pairs_match_all_pairs(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 0.2, size=(int(rng.integers(0, 120)), 3))
    pairs = {tuple(p) for p in neighbor_pairs(pos, R)}
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    brute = {(a, b) for a in range(len(pos)) for b in range(len(pos)) if a != b and d[a, b] < R}
    assert pairs == brute


def test_no_virtual_node_out_of_range():
    assert len(insert_virtual_nodes([[0, 0, 2 * R]], FLOOR, FeatureConfig())) == 0


def test_one_virtual_node_below_particle():
    v = insert_virtual_nodes([[0.1, 0.1, 0.5 * R]], FLOOR, FeatureConfig())
    assert len(v) == 1 and v.owner[0] == 0 and v.triangle[0] == 0
    np.testing.assert_allclose(v.position[0], [0.1, 0.1, 0.0])
    np.testing.assert_array_equal(v.wall_velocity, 0.0)


def test_box_corner_virtual_nodes_match_exhaustive_scan():
    box = box_mesh((0, 0, 0), (1, 1, 1))
    p = np.array([0.01, 0.01, 0.01])
    v = insert_virtual_nodes([p], box, FeatureConfig())
    scan = [t for t in range(len(box)) if mesh_min_distance(p, TriMesh(box.vertices[t : t + 1]))[1].sq_dist < R * R]
    assert sorted(v.triangle.tolist()) == scan
    faces = {tuple(np.round(np.abs(n))) for n in box.normals[v.triangle]}
    assert len(faces) == 3 and len(v) >= 3


def test_real_particles_have_zero_normal_block():
    cfg = FeatureConfig()
    s = build_graph(static_history([[0, 0, 0.01], [0.02, 0, 0.01]]), FLOOR, cfg, 1e-3)
    C = cfg.history_len
    np.testing.assert_array_equal(s.node_features[: s.n_real, 3 * C :], 0.0)
    assert s.n_nodes == 4


@pytest.mark.parametrize(
    "mode, block",
    [("V1", [0, 0, 0, 0, 0, 0]), ("V2", [0, 0, 1, 0, 0, 0]), ("V3", [0, 0, -1, 0, 0, 1])],
)
def test_floor_normal_block_per_mode(mode, block):
    cfg = FeatureConfig(normal_mode=mode, normal_weight=2.0, type_weight=3.0)
    s = build_graph(static_history([[0, 0, 0.01]]), FLOOR, cfg, 1e-3)
    C = cfg.history_len
    virt = s.node_features[1]
    assert virt[3 * C] == 3.0
    np.testing.assert_array_equal(virt[3 * C + 1 :], 2.0 * np.array(block, float))
    np.testing.assert_array_equal(virt[: 3 * C], 0.0)


def test_v3_halves_are_negations():
    box = box_mesh((0, 0, 0), (0.1, 0.1, 0.1))
    s = build_graph(static_history([[0.01, 0.01, 0.01]]), box, FeatureConfig(), 1e-3)
    block = s.node_features[s.n_real :, -6:]
    np.testing.assert_array_equal(block[:, :3], -block[:, 3:])


def test_missing_history_errors():
    with pytest.raises(ValueError):
        encode_node_features(np.zeros((2, 3, 3)), insert_virtual_nodes(np.zeros((3, 3)) + 5, FLOOR, FeatureConfig()),
                             FeatureConfig(history_len=5))
    with pytest.raises(ValueError):
        build_graph(np.zeros((3, 2, 3)), None, FeatureConfig(history_len=5), 1e-3)


def _random_scene_history(seed, C=5):
    rng = np.random.default_rng(seed)
    box = box_mesh((0, 0, 0), (0.1, 0.1, 0.1))
    base = rng.uniform(0.005, 0.095, size=(40, 3))
    hist = base[None] + np.cumsum(rng.normal(0, 1e-4, size=(C + 1, 40, 3)), axis=0)
    return box, hist


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_v3_sample_bit_identical_under_orientation_flips(seed):
    box, hist = _random_scene_history(seed % 1000)
    flip = np.random.default_rng(seed).random(len(box)) < 0.5
    verts = box.vertices.copy()
    verts[flip] = verts[flip][:, [0, 2, 1]]
    flipped = TriMesh(verts)
    cfg = FeatureConfig()
    a = build_graph(hist, box, cfg, 1e-3)
    b = build_graph(hist, flipped, cfg, 1e-3)
    np.testing.assert_array_equal(a.node_features, b.node_features)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.edge_features, b.edge_features)


def test_v2_changes_under_flip():
    hist = static_history([[0.05, 0.05, 0.01]])
    box = box_mesh((0, 0, 0), (0.1, 0.1, 0.1))
    cfg = FeatureConfig(normal_mode="V2")
    a = build_graph(hist, box, cfg, 1e-3)
    b = build_graph(hist, box.flipped(), cfg, 1e-3)
    assert not np.array_equal(a.node_features, b.node_features)


def test_virtual_wiring_and_edge_features():
    box, hist = _random_scene_history(3)
    s = build_graph(hist, box, FeatureConfig(), 1e-3)
    n = s.n_real
    src, dst = s.edges.T
    assert np.all((src >= 0) & (src < s.n_nodes) & (dst >= 0) & (dst < s.n_nodes))
    assert not np.any((src >= n) & (dst >= n))
    virt = insert_virtual_nodes(hist[-1], box, FeatureConfig())
    for k in range(len(virt)):
        touching = s.edges[(src == n + k) | (dst == n + k)]
        assert set(touching.ravel()) == {n + k, int(virt.owner[k])}
    disp, dist = s.edge_features[:, :3], s.edge_features[:, 3]
    assert np.all((dist >= 0) & (dist <= 1))
    np.testing.assert_allclose(np.linalg.norm(disp, axis=1), dist, atol=1e-9)
    real = s.edges[(src < n) & (dst < n)]
    assert {tuple(e) for e in real} == {(b, a) for a, b in real}


def test_far_triangle_removal_changes_nothing():
    box, hist = _random_scene_history(4)
    far = np.array([[[5.0, 5, 5], [6.0, 5, 5], [5.0, 6, 5]]])
    a = build_graph(hist, box, FeatureConfig(), 1e-3)
    b = build_graph(hist, TriMesh(np.concatenate([far, box.vertices])), FeatureConfig(), 1e-3)
    np.testing.assert_array_equal(a.node_features, b.node_features)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.edge_features, b.edge_features)


def test_free_fall_targets_equal_gravity():
    traj = free_fall()
    cfg = FeatureConfig()
    for k in range(cfg.history_len, len(traj) - 1):
        np.testing.assert_allclose(build_sample(traj, k, cfg).targets, np.tile(G, (6, 1)), atol=1e-9)


def test_build_sample_range_errors():
    traj = free_fall(10)
    cfg = FeatureConfig()
    with pytest.raises(IndexError):
        build_sample(traj, 4, cfg)
    with pytest.raises(IndexError):
        build_sample(traj, 9, cfg)


def test_noise_free_sample_is_deterministic_and_noise_only_touches_inputs():
    traj = free_fall()
    cfg = FeatureConfig()
    a, b = build_sample(traj, 7, cfg), build_sample(traj, 7, cfg)
    np.testing.assert_array_equal(a.node_features, b.node_features)
    noisy = FeatureConfig(noise_std=1e-3)
    c = build_sample(traj, 7, noisy, rng=np.random.default_rng(0))
    d = build_sample(traj, 7, noisy, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(c.node_features, d.node_features)
    assert not np.allclose(c.node_features, a.node_features)
    # targets are recomputed against the perturbed last frame
    assert not np.allclose(c.targets, a.targets)


def test_settled_frame_targets_are_small():
    cfg = SceneConfig(kind="box", n_particles=9, n_steps=4000, stride=100, seed=0)
    traj = simulate(cfg)
    s = build_sample(traj, len(traj) - 2, FeatureConfig())
    assert np.abs(s.targets).max() < 1e-2


def test_dataset_counts_and_stride():
    traj = free_fall(30)
    cfg = FeatureConfig()
    samples, _ = dataset_from_trajectory(traj, cfg)
    assert len(samples) == 30 - cfg.history_len - 1
    raw, _ = dataset_from_trajectory(traj, cfg, stride=2, stats=NormalizerStats())
    assert len(raw) == 15 - cfg.history_len - 1
    for s in raw:
        np.testing.assert_allclose(s.targets, np.tile(G, (6, 1)), atol=1e-9)
    with pytest.raises(ValueError):
        dataset_from_trajectory(free_fall(6), cfg)
    with pytest.raises(ValueError):
        dataset_from_trajectory(traj, cfg, stride=0)


def test_normalized_targets_are_standardized():
    box_cfg = SceneConfig(kind="box", n_particles=20, n_steps=400, stride=10, seed=2)
    samples, stats = dataset_from_trajectory(simulate(box_cfg), FeatureConfig())
    tgt = np.concatenate([s.targets for s in samples])
    assert np.abs(tgt.mean(axis=0)).max() < 1e-9
    np.testing.assert_allclose(tgt.std(axis=0), 1.0, atol=1e-9)
    back = NormalizerStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(back.target_std, stats.target_std)


def test_stats_guard_zero_spread():
    traj = free_fall(12)
    raw, _ = dataset_from_trajectory(traj, FeatureConfig(), stats=NormalizerStats())
    stats = compute_stats(raw, FeatureConfig())
    np.testing.assert_array_equal(stats.target_std, 1.0)
    with pytest.raises(ValueError):
        NormalizerStats(target_std=[1.0, 0.0, 1.0])
