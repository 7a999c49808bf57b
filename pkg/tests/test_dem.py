import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from granuflow.dem import (
    Contact,
    MaterialParams,
    ParticleState,
    Scene,
    SceneConfig,
    SimulationError,
    box_mesh,
    build_drum,
    build_hopper,
    contact_force,
    dem_step,
    hopper_training_configs,
    particle_contacts,
    shadow_energy,
    simulate,
    stability_bound,
    wall_contacts,
)
from granuflow.geometry import TriMesh, all_pairs_within

NO_GRAVITY = MaterialParams(k=1000.0, gamma=0.0, gravity=(0.0, 0.0, 0.0))
FLOOR = TriMesh(np.array([[[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 1.0, 0.0]]]))


def state(positions, velocities=None, radius=0.5, mass=1.0):
    positions = np.asarray(positions, dtype=float)
    v = np.zeros_like(positions) if velocities is None else np.asarray(velocities, dtype=float)
    return ParticleState(positions, v, radius, mass)


def test_state_validation():
    with pytest.raises(ValueError):
        ParticleState(np.zeros((2, 3)), np.zeros((2, 3)), [0.1, -0.1], 1.0)
    with pytest.raises(ValueError):
        ParticleState(np.zeros((2, 3)), np.zeros((3, 3)), 0.1, 1.0)


def test_material_validation():
    with pytest.raises(ValueError):
        MaterialParams(k=0.0)
    with pytest.raises(ValueError):
        MaterialParams(gamma=-1.0)


def test_particle_overlap_and_touching():
    c = particle_contacts(state([[0, 0, 0], [0.9, 0, 0]]), 1.0)
    assert len(c) == 1 and c.overlap[0] == pytest.approx(0.1)
    np.testing.assert_allclose(c.normal[0], [-1, 0, 0])  # from j toward i
    assert len(particle_contacts(state([[0, 0, 0], [1.0, 0, 0]]), 1.0)) == 0


def test_coincident_centers_error():
    with pytest.raises(SimulationError):
        particle_contacts(state([[0, 0, 0], [0, 0, 0]]), 1.0)


def test_cell_size_must_cover_diameter():
    with pytest.raises(ValueError):
        particle_contacts(state([[0, 0, 0], [0.9, 0, 0]]), 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_particle_contacts_match_all_pairs(seed):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 1, size=(200, 3))
    radii = rng.uniform(0.02, 0.05, size=200)
    s = ParticleState(pos, np.zeros_like(pos), radii, 1.0)
    c = particle_contacts(s)
    ai, aj = all_pairs_within(pos, radii=radii)
    assert list(zip(c.i, c.j)) == sorted(zip(ai, aj))


def test_floor_contact():
    s = state([[0, 0, 0.05]], radius=0.1)
    c = wall_contacts(s, FLOOR)
    assert len(c) == 1 and c.overlap[0] == pytest.approx(0.05)
    np.testing.assert_allclose(c.normal[0], [0, 0, 1])
    assert len(wall_contacts(state([[0, 0, 0.2]], radius=0.1), FLOOR)) == 0


def test_particle_on_triangle_errors():
    with pytest.raises(SimulationError):
        wall_contacts(state([[0, 0, 0]], radius=0.1), FLOOR)


def test_wall_velocity_enters_relative_velocity():
    s = state([[0, 0, 0.05]], velocities=[[0, 0, -1.0]], radius=0.1)
    moving = wall_contacts(s, FLOOR, lambda q: np.tile([0.0, 0.0, 0.5], (len(q), 1)))
    assert moving.rel_normal_velocity[0] == pytest.approx(-1.5)


def test_drum_wall_velocity_is_rigid_rotation():
    cfg = SceneConfig(kind="drum", omega=2.0)
    scene = Scene.from_config(cfg)
    q = np.array([[0.08, 0.01, 0.0], [0.0, -0.02, 0.08]])
    expected = np.cross([0.0, 2.0, 0.0], q - scene.center)
    np.testing.assert_allclose(scene.wall_velocity(q), expected)
    assert scene.angle_at(250) == pytest.approx(2.0 * 250 * cfg.dt)


@pytest.mark.parametrize(
    "delta, gamma, v, expected", [(0.01, 0.0, 0.0, 10.0), (0.01, 5.0, -0.2, 11.0), (0.01, 5.0, 3.0, 0.0)]
)
def test_contact_force(delta, gamma, v, expected):
    mat = MaterialParams(k=1000.0, gamma=gamma)
    f = contact_force(Contact(0, 0, 1, delta, np.array([0.0, 0.0, 1.0]), v), mat)
    np.testing.assert_allclose(f, [0, 0, expected])


def test_free_fall_step():
    s = state([[0, 0, 5.0]])
    out = dem_step(s, None, MaterialParams(gravity=(0, 0, -9.81)), 0.1)
    np.testing.assert_allclose(out.velocities[0], [0, 0, -0.981])
    np.testing.assert_allclose(out.positions[0] - s.positions[0], [0, 0, -0.0981])


def test_head_on_momentum():
    s = state([[0, 0, 0], [0.95, 0, 0]], velocities=[[1.0, 0, 0], [-0.5, 0, 0]])
    p0 = s.momentum()
    for _ in range(50):
        s = dem_step(s, None, NO_GRAVITY, 1e-3)
        np.testing.assert_allclose(s.momentum(), p0, rtol=0, atol=1e-12 * np.abs(p0).sum())


def test_non_finite_force_reports_particle():
    s = state([[0, 0, 5.0], [0, 0, 0], [0.9, 0, 0]])
    s.velocities[2, 0] = np.nan  # poisons the contact force between 1 and 2
    with pytest.raises(SimulationError, match="particle 1"):
        dem_step(s, None, NO_GRAVITY, 1e-3)


def test_stability_bound_enforced():
    cfg = SceneConfig(kind="box", n_particles=5, n_steps=1, dt=1e-3)
    with pytest.raises(SimulationError, match="stability bound"):
        simulate(cfg)


def test_zero_steps_gives_initial_frame():
    traj = simulate(SceneConfig(kind="box", n_particles=5, n_steps=0))
    assert len(traj) == 1 and traj.times[0] == 0.0


def test_simulation_is_deterministic():
    cfg = SceneConfig(kind="box", n_particles=20, n_steps=100, seed=4)
    a, b = simulate(cfg), simulate(cfg)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.velocities, b.velocities)


def test_damped_box_shadow_energy_non_increasing():
    cfg = SceneConfig(kind="box", n_particles=30, n_steps=0, seed=2)
    mat = MaterialParams()
    traj = simulate(cfg, mat)
    scene = Scene.from_config(cfg)
    s = traj.frame(0)
    s.velocities[:] = np.random.default_rng(0).normal(0, 0.5, size=s.velocities.shape)
    ref = scene.walls.bounds()[0]
    e = shadow_energy(s, scene.walls, mat, cfg.dt, ref)
    for _ in range(300):
        s = dem_step(s, scene.walls, mat, cfg.dt)
        e_next = shadow_energy(s, scene.walls, mat, cfg.dt, ref)
        assert e_next <= e + 1e-6 * abs(e)
        e = e_next


def test_box_containment():
    cfg = SceneConfig(kind="box", n_particles=40, n_steps=600, stride=20, seed=1)
    traj = simulate(cfg)
    lo, hi = Scene.from_config(cfg).walls.bounds()
    r = cfg.particle_radius
    assert np.all(traj.positions >= lo - r) and np.all(traj.positions <= hi + r)


def test_hopper_geometry_and_fill():
    cfg = SceneConfig(kind="hopper", n_particles=60, seed=3)
    mesh, s = build_hopper(cfg)
    assert len(s) == 60
    assert len(particle_contacts(s)) == 0
    assert len(wall_contacts(s, mesh)) == 0
    scene = Scene.from_config(cfg)
    assert len(scene.mesh_at(0)) == len(scene.walls) + len(scene.cap)
    assert len(scene.mesh_at(cfg.hole_open_step)) == len(scene.walls)


def test_vertical_hopper_walls():
    cfg = SceneConfig(kind="hopper", alpha=90.0 - 1e-9, n_particles=10)
    mesh, _ = build_hopper(cfg)
    xs = mesh.vertices.reshape(-1, 3)
    upper = xs[xs[:, 2] > 1e-9]
    assert np.allclose(np.abs(upper[:, 0]).max(), cfg.hopper_half_width, atol=1e-6)


def test_hopper_rejects_overfill():
    with pytest.raises(SimulationError, match="cannot place"):
        build_hopper(SceneConfig(kind="hopper", n_particles=5000))


def test_closed_hopper_keeps_particles_above_bottom():
    cfg = SceneConfig(kind="hopper", hole_radius=0.0, n_particles=40, n_steps=1500, stride=50, hole_open_step=0)
    traj = simulate(cfg)
    assert traj.positions[:, :, 2].min() > 0.0


def test_open_hopper_discharge_is_monotone():
    cfg = SceneConfig(kind="hopper", n_particles=60, n_steps=2500, stride=25, hole_open_step=0, hole_radius=0.035)
    traj = simulate(cfg)
    below = (traj.positions[:, :, 2] < 0.0).sum(axis=1)
    assert below[-1] > 0
    assert np.all(np.diff(below) >= 0)


def test_training_configs_are_distinct():
    cfgs = hopper_training_configs(30, seed=0)
    assert len({(c.alpha, c.hole_radius, c.seed) for c in cfgs}) == 30
    assert all(55 <= c.alpha <= 80 for c in cfgs)


def test_drum_fill_is_settled_and_inside():
    cfg = SceneConfig(kind="drum", n_particles=40, settle_steps=3000, omega=0.0)
    mesh, s = build_drum(cfg)
    assert np.all(s.velocities == 0)
    rho = np.hypot(s.positions[:, 0], s.positions[:, 2])
    assert rho.max() < cfg.drum_radius
    assert np.abs(s.positions[:, 1]).max() < cfg.drum_length / 2


@pytest.mark.slow
def test_static_drum_comes_to_rest():
    # normal-only contacts damp sliding slowly, so the pile needs ~2 s to settle
    cfg = SceneConfig(kind="drum", n_particles=40, omega=0.0, settle_steps=500, n_steps=22000, stride=1000)
    traj = simulate(cfg)
    ke = 0.5 * np.sum(traj.masses[None, :] * np.sum(traj.velocities**2, axis=2), axis=1)
    assert ke[-3:].max() < 1e-5
    assert ke[-1] < 1e-4 * ke.max()


def test_drum_mesh_pose_follows_rotation():
    cfg = SceneConfig(kind="drum", omega=1.5, dt=1e-4)
    scene = Scene.from_config(cfg)
    from granuflow.geometry import rotate_mesh_y

    np.testing.assert_allclose(scene.mesh_at(400).vertices, rotate_mesh_y(scene.walls, 1.5 * 400 * 1e-4).vertices)


def test_trajectory_metadata():
    cfg = SceneConfig(kind="box", n_particles=5, n_steps=10, stride=5)
    traj = simulate(cfg)
    assert len(traj) == 3
    np.testing.assert_allclose(np.diff(traj.times), traj.dt)
    assert traj.dt == pytest.approx(5 * cfg.dt)
    sub = traj.subsampled(2)
    assert sub.dt == pytest.approx(2 * traj.dt) and len(sub) == 2
