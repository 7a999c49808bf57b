import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granuflow.analysis import (
    AnalysisError,
    GridSpec,
    cell_entropy,
    compare_trajectories,
    dyadic_steps,
    emd,
    entropy_of_frame,
    flow_profile,
    mixing_entropy,
    version_table,
    wilcoxon_signed_rank,
)
from granuflow.dem import Trajectory

from oracles import emd_brute_force, signed_rank_enumeration

LN2 = math.log(2)
UNIT_GRID = GridSpec(np.zeros(3), np.ones(3), (2, 1, 1))  # two unit cells along x


def traj_from(positions, velocities=None, dt=0.1):
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[1]
    v = np.zeros_like(positions) if velocities is None else np.asarray(velocities, dtype=float)
    return Trajectory(positions, v, dt * np.arange(len(positions)), np.full(n, 0.01), np.ones(n), dt)


# --------------------------------------------------------------------------- entropy


def test_separated_classes_have_zero_entropy():
    pts = [[0.2, 0.5, 0.5], [0.4, 0.5, 0.5], [1.2, 0.5, 0.5], [1.7, 0.5, 0.5]]
    assert entropy_of_frame(pts, np.array([-1, -1, 1, 1]), UNIT_GRID) == 0.0


def test_evenly_mixed_cells_reach_ln2():
    pts = [[0.2, 0.5, 0.5], [0.4, 0.5, 0.5], [1.2, 0.5, 0.5], [1.7, 0.5, 0.5]]
    assert entropy_of_frame(pts, np.array([-1, 1, 1, -1]), UNIT_GRID) == pytest.approx(LN2, abs=1e-15)


def test_hand_evaluated_entropy():
    pts = [[0.1 * (i + 1), 0.5, 0.5] for i in range(4)] + [[1.0 + 0.1 * (i + 1), 0.5, 0.5] for i in range(4)]
    labels = np.array([1, 1, 1, -1, 1, 1, -1, -1])
    s31 = -0.75 * math.log(0.75) - 0.25 * math.log(0.25)
    expected = (4 * s31 + 4 * LN2) / 8
    assert entropy_of_frame(pts, labels, UNIT_GRID) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.6277, abs=1e-4)


def test_cell_entropy_zero_log_zero():
    np.testing.assert_array_equal(cell_entropy([0, 3, 0], [0, 0, 2]), [0.0, 0.0, 0.0])


def test_grid_errors():
    with pytest.raises(AnalysisError):
        GridSpec(np.zeros(3), [1, 1, 0], (1, 1, 1))
    with pytest.raises(AnalysisError, match="outside"):
        UNIT_GRID.flat_index([[2.5, 0.5, 0.5]])


def test_mixing_entropy_freezes_classes_at_t0():
    # two particles swap cells; classes fixed at t0 keep S at zero
    p0 = [[0.5, 0.5, 0.5], [1.5, 0.5, 0.5]]
    p1 = [[1.5, 0.5, 0.5], [0.5, 0.5, 0.5]]
    curve = mixing_entropy(traj_from([p0, p1, p0]), UNIT_GRID, t0=1, split=(0, 1.0))
    np.testing.assert_array_equal(curve.values, [0.0, 0.0])
    assert curve.t0 == 1 and [r["step"] for r in curve.rows()] == [1, 2]


def test_mixing_entropy_errors():
    t = traj_from([[[0.5, 0.5, 0.5], [0.6, 0.5, 0.5]]])
    with pytest.raises(AnalysisError, match="empty"):
        mixing_entropy(t, UNIT_GRID, 0, (0, 1.0))
    with pytest.raises(AnalysisError):
        mixing_entropy(t, UNIT_GRID, 5, (0, 0.55))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_entropy_bounds_and_label_swap(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    pos = rng.uniform(0, 1, size=(int(rng.integers(1, 8)), n, 3))
    grid = GridSpec.covering(np.zeros(3), np.ones(3), tuple(rng.integers(1, 5, size=3)))
    labels = rng.choice([-1, 1], size=n)
    for frame in pos:
        s = entropy_of_frame(frame, labels, grid)
        assert 0.0 <= s <= LN2 + 1e-15
        assert s == pytest.approx(entropy_of_frame(frame, -labels, grid), abs=1e-15)


# --------------------------------------------------------------------------- profiles


def test_uniform_velocity_profile():
    u = np.array([0.1, -0.2, 0.3])
    pos = np.random.default_rng(0).uniform(size=(4, 10, 3))
    t = traj_from(pos, np.broadcast_to(u, pos.shape))
    np.testing.assert_allclose(flow_profile(t).mean_velocity, np.tile(u, (4, 1)), atol=1e-15)
    prof = flow_profile(t, "per_z", bins=3)
    np.testing.assert_allclose(prof.mean_velocity[prof.valid], np.tile(u, (prof.valid.sum(), 1)), atol=1e-15)


def test_free_fall_profile():
    g, dt = 9.81, 0.01
    times = dt * np.arange(50)
    vz = -g * times
    vel = np.zeros((50, 4, 3))
    vel[:, :, 2] = vz[:, None]
    t = Trajectory(np.zeros((50, 4, 3)), vel, times, np.full(4, 0.01), np.ones(4), dt)
    np.testing.assert_allclose(flow_profile(t).mean_velocity[:, 2], -g * times, rtol=0, atol=1e-9)


def test_hand_built_profile():
    pos = [[[0, 0, 0.1], [0, 0, 0.3], [0, 0, 0.9]], [[0, 0, 0.2], [0, 0, 0.6], [0, 0, 0.8]]]
    vel = [[[1, 0, 0], [2, 0, 0], [3, 0, -1]], [[4, 0, 0], [5, 0, 0], [6, 0, -2]]]
    t = traj_from(pos, vel)
    per_time = flow_profile(t)
    np.testing.assert_allclose(per_time.mean_velocity, [[2, 0, -1 / 3], [5, 0, -2 / 3]])
    per_z = flow_profile(t, "per_z", bins=2, z_range=(0.0, 1.0))
    # z < 0.5: velocities 1, 2, 4 ; z >= 0.5: 3, 5, 6
    np.testing.assert_allclose(per_z.mean_velocity[:, 0], [7 / 3, 14 / 3])
    np.testing.assert_allclose(per_z.mean_velocity[:, 2], [0, -1])
    np.testing.assert_array_equal(per_z.counts, [3, 3])
    np.testing.assert_allclose(per_z.centers, [0.25, 0.75])


def test_empty_bins_are_flagged():
    t = traj_from([[[0, 0, 0.1], [0, 0, 0.2]]], [[[1, 0, 0], [1, 0, 0]]])
    prof = flow_profile(t, "per_z", bins=4, z_range=(0.0, 1.0))
    assert prof.counts.tolist() == [2, 0, 0, 0]
    assert np.isnan(prof.mean_velocity[1:]).all()
    with pytest.raises(AnalysisError):
        flow_profile(t, window=(3, 5))
    with pytest.raises(AnalysisError):
        flow_profile(t, "per_z", bins=0)


# --------------------------------------------------------------------------- EMD


def test_emd_identity_and_translation():
    a = np.random.default_rng(0).normal(size=(30, 3))
    assert emd(a, a) == 0.0
    assert emd(a, a[::-1]) == 0.0
    d = np.array([0.3, -0.4, 1.2])
    assert emd(a, a + d) == pytest.approx(np.linalg.norm(d), rel=1e-12)


def test_emd_size_mismatch():
    with pytest.raises(AnalysisError):
        emd(np.zeros((3, 3)), np.zeros((4, 3)))


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 7])
def test_emd_matches_permutation_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        a, b = rng.normal(size=(2, n, 3))
        assert abs(emd(a, b) - emd_brute_force(a, b)) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_emd_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 12, 3))
    ab, ba = emd(a, b), emd(b, a)
    assert ab >= 0 and abs(ab - ba) <= 1e-9
    assert emd(a, c) <= ab + emd(b, c) + 1e-9


# --------------------------------------------------------------------------- Wilcoxon


def test_wilcoxon_all_positive_n5():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5], alternative="greater")
    assert res.pvalue == 1 / 32 and res.exact and res.statistic == 15


@pytest.mark.parametrize("n", range(5, 13))
@pytest.mark.parametrize("alternative", ["less", "greater", "two_sided"])
def test_wilcoxon_exact_matches_enumeration(n, alternative):
    rng = np.random.default_rng(n)
    d = np.round(rng.normal(0.3, 1.0, size=n), 1)  # rounding creates ties and zeros
    if np.count_nonzero(d) < 5:
        d[d == 0] = 0.7
    res = wilcoxon_signed_rank(d, alternative=alternative)
    assert res.pvalue == pytest.approx(signed_rank_enumeration(d, alternative), abs=1e-12)


def test_wilcoxon_normal_approximation_close_to_exact_at_15():
    from granuflow import analysis

    rng = np.random.default_rng(15)
    for _ in range(20):
        d = rng.normal(0.2, 1.0, size=15)
        exact = wilcoxon_signed_rank(d, alternative="greater").pvalue
        old = analysis.EXACT_WILCOXON_MAX_N
        analysis.EXACT_WILCOXON_MAX_N = 10
        try:
            approx = wilcoxon_signed_rank(d, alternative="greater")
        finally:
            analysis.EXACT_WILCOXON_MAX_N = old
        assert not approx.exact
        assert abs(approx.pvalue - exact) <= 0.01


def test_wilcoxon_large_sample_uses_approximation():
    d = np.random.default_rng(0).normal(size=40)
    res = wilcoxon_signed_rank(d)
    assert not res.exact and 0 <= res.pvalue <= 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(5, 30))
def test_wilcoxon_swap_symmetry_and_bounds(seed, n):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, n))
    less = wilcoxon_signed_rank(x, y, "less").pvalue
    greater = wilcoxon_signed_rank(y, x, "greater").pvalue
    assert less == pytest.approx(greater, abs=1e-15)
    two = wilcoxon_signed_rank(x, y).pvalue
    assert 0 <= two <= 1


def test_wilcoxon_errors():
    with pytest.raises(AnalysisError, match="zero"):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    with pytest.raises(AnalysisError):
        wilcoxon_signed_rank([1, 2, 3])
    with pytest.raises(AnalysisError, match="length"):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2])
    with pytest.raises(AnalysisError):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], alternative="sideways")


# --------------------------------------------------------------------------- comparison


def test_dyadic_steps():
    assert dyadic_steps(1).tolist() == []
    assert dyadic_steps(9).tolist() == [1, 2, 4, 8]
    assert dyadic_steps(10**6).tolist() == [2**p for p in range(17)]


def test_identical_trajectories_compare_to_zero():
    pos = np.random.default_rng(0).uniform(size=(40, 8, 3))
    g = traj_from(pos)
    pred = traj_from(pos[5:])
    pred.meta["rollout_start"] = 5
    comp = compare_trajectories(g, pred, grid=GridSpec.covering(np.zeros(3), np.ones(3), (3, 3, 3)), split=(0, 0.5))
    assert comp.emd.steps.tolist() == [1, 2, 4, 8, 16, 32]
    assert comp.emd.mean == 0.0 and comp.emd.std == 0.0
    np.testing.assert_array_equal(comp.ground_entropy.values, comp.pred_entropy.values)
    np.testing.assert_array_equal(comp.ground_profile.mean_velocity, comp.pred_profile.mean_velocity)


def test_comparison_errors():
    g = traj_from(np.zeros((10, 4, 3)))
    with pytest.raises(AnalysisError):
        compare_trajectories(g, traj_from(np.zeros((5, 3, 3))))
    with pytest.raises(AnalysisError):
        compare_trajectories(g, traj_from(np.zeros((5, 4, 3)), dt=0.2))
    with pytest.raises(AnalysisError):
        compare_trajectories(g, traj_from(np.zeros((5, 4, 3))), offset=8)


def test_version_table_layout_and_pvalue():
    rng = np.random.default_rng(0)
    emds = {
        "V3": {"train": [rng.uniform(0, 1, 17) for _ in range(5)], "test": [rng.uniform(0, 1, 17) for _ in range(5)]},
        "V1": {"train": [rng.uniform(1, 2, 17) for _ in range(5)], "test": [rng.uniform(0.5, 1.5, 17) for _ in range(5)]},
    }
    rows = version_table(emds)
    assert [(r.version, r.split) for r in rows] == [("V1", "test"), ("V1", "train"), ("V3", "test"), ("V3", "train")]
    v1 = {r.split: r for r in rows if r.version == "V1"}
    assert v1["train"].n == 85 and v1["train"].pvalue < 1e-10
    assert 0 <= v1["test"].pvalue <= 1
    assert all(math.isnan(r.pvalue) for r in rows if r.version == "V3")
    assert set(rows[0].row()) == {"version", "split", "n", "mean", "std", "statistic", "p"}
    with pytest.raises(AnalysisError):
        version_table({"V1": emds["V1"]})
