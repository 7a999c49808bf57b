"""Minimal discrete-element simulator for frictionless spheres and mesh walls.

Contacts follow a normal spring-dashpot law ``F = k*delta - gamma*v_n`` clamped
at zero (no cohesion), integrated with semi-implicit Euler:
``v += dt * a`` followed by ``p += dt * v``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .geometry import (
    TriMesh,
    cell_list_candidates,
    closest_point_kernel,
    nearby_triangle_pairs,
    rotation_x,
    rotation_y,
)

log = logging.getLogger(__name__)

CENTER_TOL = 1e-12
PARTICLE_PARTICLE = 0
PARTICLE_WALL = 1


class SimulationError(RuntimeError):
    pass


@dataclass
class ParticleState:
    positions: np.ndarray
    velocities: np.ndarray
    radii: np.ndarray
    masses: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        self.radii = np.broadcast_to(np.asarray(self.radii, dtype=float), (n,)).copy()
        self.masses = np.broadcast_to(np.asarray(self.masses, dtype=float), (n,)).copy()
        if len(self.velocities) != n:
            raise ValueError("positions and velocities differ in length")
        if n and (np.any(self.radii <= 0) or np.any(self.masses <= 0)):
            raise ValueError("radii and masses must be positive")

    def __len__(self) -> int:
        return len(self.positions)

    def copy(self) -> "ParticleState":
        return ParticleState(self.positions.copy(), self.velocities.copy(), self.radii, self.masses, self.time)

    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.masses * np.sum(self.velocities**2, axis=1)))


@dataclass
class MaterialParams:
    # defaults are arbitrary desk-scale values, not calibrated to any material
    k: float = 5000.0
    gamma: float = 3.0
    gravity: tuple = (0.0, 0.0, -9.81)

    def __post_init__(self):
        self.gravity = tuple(float(g) for g in self.gravity)
        if not self.k > 0:
            raise ValueError("spring stiffness k must be positive")
        if self.gamma < 0:
            raise ValueError("damping gamma must be non-negative")


@dataclass
class SceneConfig:
    kind: str = "hopper"
    # hopper
    alpha: float = 60.0
    hole_radius: float = 0.03
    hole_open_step: int = 500
    hopper_half_width: float = 0.06
    hopper_depth: float = 0.1
    hopper_height: float = 0.15
    catch_depth: float = 0.06
    hole_segments: int = 24
    # drum
    drum_radius: float = 0.08
    drum_length: float = 0.1
    drum_segments: int = 48
    omega: float = 0.0
    fill_angle: float = 90.0
    settle_steps: int = 2000
    # box
    box_size: tuple = (0.1, 0.1, 0.1)
    # particles and integration
    n_particles: int = 100
    particle_radius: float = 0.01
    density: float = 2500.0
    dt: float = 1e-4
    n_steps: int = 1000
    stride: int = 1
    seed: int = 0

    def __post_init__(self):
        self.box_size = tuple(float(x) for x in self.box_size)
        if self.kind not in ("hopper", "drum", "box"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.kind == "hopper" and not 0 < self.alpha <= 90:
            raise ValueError("hopper alpha must lie in (0, 90] degrees")
        if self.hole_radius < 0:
            raise ValueError("hole_radius must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.n_steps < 0 or self.n_particles < 0:
            raise ValueError("n_steps and n_particles must be non-negative")

    @property
    def particle_mass(self) -> float:
        return self.density * 4.0 / 3.0 * math.pi * self.particle_radius**3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Contact:
    kind: int
    i: int
    j: int
    overlap: float
    normal: np.ndarray
    rel_normal_velocity: float


@dataclass
class Contacts:
    """Struct-of-arrays contact list; ``normal`` points toward particle ``i``."""

    kind: int
    i: np.ndarray
    j: np.ndarray
    overlap: np.ndarray
    normal: np.ndarray
    rel_normal_velocity: np.ndarray
    point: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.i)

    def records(self) -> list[Contact]:
        return [
            Contact(self.kind, int(a), int(b), float(d), n.copy(), float(v))
            for a, b, d, n, v in zip(self.i, self.j, self.overlap, self.normal, self.rel_normal_velocity)
        ]


# ---------------------------------------------------------------------------
# scenes


def _quad(a, b, c, d):
    return [(a, b, c), (a, c, d)]


def _box_tris(lo, hi):
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    p = lambda x, y, z: (x, y, z)  # noqa: E731
    tris = []
    tris += _quad(p(x0, y0, z0), p(x1, y0, z0), p(x1, y1, z0), p(x0, y1, z0))
    tris += _quad(p(x0, y0, z1), p(x0, y1, z1), p(x1, y1, z1), p(x1, y0, z1))
    tris += _quad(p(x0, y0, z0), p(x0, y0, z1), p(x1, y0, z1), p(x1, y0, z0))
    tris += _quad(p(x0, y1, z0), p(x1, y1, z0), p(x1, y1, z1), p(x0, y1, z1))
    tris += _quad(p(x0, y0, z0), p(x0, y1, z0), p(x0, y1, z1), p(x0, y0, z1))
    tris += _quad(p(x1, y0, z0), p(x1, y0, z1), p(x1, y1, z1), p(x1, y1, z0))
    return tris


def box_mesh(lo, hi, name="box") -> TriMesh:
    return TriMesh(np.array(_box_tris(lo, hi), dtype=float), name=name)


def _ray_to_rect(theta, hx, hy):
    c, s = math.cos(theta), math.sin(theta)
    t = min(hx / abs(c) if abs(c) > 1e-15 else math.inf, hy / abs(s) if abs(s) > 1e-15 else math.inf)
    return t * c, t * s


def _plate_with_hole(hx, hy, radius, segments, z=0.0):
    """Rectangle [-hx, hx] x [-hy, hy] minus a centered polygonal hole, plus its cap."""
    if radius == 0:
        return _quad((-hx, -hy, z), (hx, -hy, z), (hx, hy, z), (-hx, hy, z)), []
    if radius >= min(hx, hy):
        raise ValueError("hole radius must be smaller than the bottom plate half-widths")
    step = 2 * math.pi / segments
    angles = [(i + 0.5) * step for i in range(segments)]
    corners = [(hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)]
    corner_angles = [math.atan2(cy, cx) % (2 * math.pi) for cx, cy in corners]
    ring = [(radius * math.cos(a), radius * math.sin(a)) for a in angles]
    rect = [_ray_to_rect(a, hx, hy) for a in angles]
    plate, cap = [], []
    for i in range(segments):
        k = (i + 1) % segments
        a0, a1 = angles[i], angles[i] + step
        c0, c1 = (*ring[i], z), (*ring[k], z)
        r0, r1 = (*rect[i], z), (*rect[k], z)
        inside = [c for c, ca in zip(corners, corner_angles) if a0 < ca < a1 or a0 < ca + 2 * math.pi < a1]
        if inside:
            K = (*inside[0], z)
            plate += [(c0, r0, K), (c0, K, c1), (c1, K, r1)]
        else:
            plate += [(c0, r0, r1), (c0, r1, c1)]
        cap.append(((0.0, 0.0, z), c0, c1))
    return plate, cap


def hopper_mesh(cfg: SceneConfig) -> tuple[TriMesh, TriMesh]:
    """Static hopper walls (with catch bin below the outlet) and the removable cap."""
    a, hy, H = cfg.hopper_half_width, cfg.hopper_depth / 2, cfg.hopper_height
    alpha = math.radians(cfg.alpha)
    A = a + H * math.cos(alpha) / math.sin(alpha)
    tris = []
    for y in (-hy, hy):
        tris += _quad((-a, y, 0.0), (a, y, 0.0), (A, y, H), (-A, y, H))
    tris += _quad((a, -hy, 0.0), (a, hy, 0.0), (A, hy, H), (A, -hy, H))
    tris += _quad((-a, -hy, 0.0), (-A, -hy, H), (-A, hy, H), (-a, hy, 0.0))
    plate, cap = _plate_with_hole(a, hy, cfg.hole_radius, cfg.hole_segments)
    tris += plate
    # catch bin keeps discharged particles inside the scene bounds
    zc = -cfg.catch_depth
    if cfg.hole_radius > 0 and cfg.catch_depth > 0:
        tris += _quad((-A, -hy, zc), (A, -hy, zc), (A, hy, zc), (-A, hy, zc))
        for y in (-hy, hy):
            tris += _quad((-A, y, zc), (A, y, zc), (A, y, 0.0), (-A, y, 0.0))
        for x in (-A, A):
            tris += _quad((x, -hy, zc), (x, hy, zc), (x, hy, 0.0), (x, -hy, 0.0))
        # ledge joining the bin walls to the hopper bottom
        if A - a > 1e-9 * max(a, H):  # vertical walls need no ledge
            for sgn in (-1, 1):
                tris += _quad((sgn * a, -hy, 0.0), (sgn * A, -hy, 0.0), (sgn * A, hy, 0.0), (sgn * a, hy, 0.0))
    walls = TriMesh(np.array(tris, dtype=float), name="hopper")
    cap_mesh = TriMesh(np.array(cap, dtype=float).reshape(-1, 3, 3), name="hopper_cap")
    return walls, cap_mesh


def drum_mesh(cfg: SceneConfig) -> TriMesh:
    """Closed cylinder with axis y, centered at the origin."""
    R, hl, S = cfg.drum_radius, cfg.drum_length / 2, cfg.drum_segments
    ang = [2 * math.pi * i / S for i in range(S)]
    ring = [(R * math.cos(t), R * math.sin(t)) for t in ang]
    tris = []
    for i in range(S):
        (x0, z0), (x1, z1) = ring[i], ring[(i + 1) % S]
        tris += _quad((x0, -hl, z0), (x0, hl, z0), (x1, hl, z1), (x1, -hl, z1))
        tris.append(((0.0, -hl, 0.0), (x1, -hl, z1), (x0, -hl, z0)))
        tris.append(((0.0, hl, 0.0), (x0, hl, z0), (x1, hl, z1)))
    return TriMesh(np.array(tris, dtype=float), name="drum")


@dataclass
class Scene:
    """Geometry of a scene as a function of the simulation step."""

    cfg: SceneConfig
    walls: TriMesh
    cap: Optional[TriMesh] = None
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_config(cls, cfg: SceneConfig) -> "Scene":
        if cfg.kind == "hopper":
            walls, cap = hopper_mesh(cfg)
            return cls(cfg, walls, cap if len(cap) else None)
        if cfg.kind == "drum":
            return cls(cfg, drum_mesh(cfg))
        half = np.asarray(cfg.box_size) / 2
        return cls(cfg, box_mesh(-half * np.array([1, 1, 0]), half * np.array([1, 1, 2])))

    @property
    def omega(self) -> float:
        return self.cfg.omega if self.cfg.kind == "drum" else 0.0

    def angle_at(self, step: int) -> float:
        return self.omega * step * self.cfg.dt

    def step_of(self, time: float) -> int:
        return int(round(time / self.cfg.dt))

    def mesh_at(self, step: int) -> TriMesh:
        mesh = self.walls
        if self.cap is not None and step < self.cfg.hole_open_step:
            mesh = mesh.merged(self.cap)
        angle = self.angle_at(step)
        if angle != 0.0:
            mesh = mesh.transformed(rotation_y(angle), self.center)
        return mesh

    def wall_velocity(self, points) -> np.ndarray:
        """Rigid-body velocity omega * y_hat x (q - center)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if self.omega == 0.0:
            return np.zeros_like(pts)
        r = pts - self.center
        return self.omega * np.stack([r[:, 2], np.zeros(len(r)), -r[:, 0]], axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.walls.bounds()
        if self.omega != 0.0:
            # rotation about y sweeps the x-z extent into a disk
            rad = float(np.max(np.hypot(*(self.walls.vertices.reshape(-1, 3)[:, [0, 2]] - self.center[[0, 2]]).T)))
            lo = np.array([self.center[0] - rad, lo[1], self.center[2] - rad])
            hi = np.array([self.center[0] + rad, hi[1], self.center[2] + rad])
        return lo, hi


def _lattice_fill(cfg: SceneConfig, inside: Callable, lo, hi, rng, sort_key=None) -> np.ndarray:
    r = cfg.particle_radius
    spacing = 2.3 * r
    jitter = 0.05 * r
    axes = [np.arange(lo[i] + 1.05 * r, hi[i] - 1.05 * r + 1e-15, spacing) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[inside(grid)] if len(grid) else grid
    if len(grid) < cfg.n_particles:
        raise SimulationError(
            f"cannot place {cfg.n_particles} particles without overlap (room for {len(grid)})"
        )
    heights = grid[:, 2] if sort_key is None else sort_key(grid)
    layer = np.round((heights - heights.min()) / spacing).astype(int)
    order = np.lexsort((rng.random(len(grid)), layer))
    pts = grid[order[: cfg.n_particles]]
    return pts + rng.uniform(-jitter, jitter, size=pts.shape)


def _particles(cfg: SceneConfig, positions) -> ParticleState:
    n = len(positions)
    return ParticleState(positions, np.zeros((n, 3)), cfg.particle_radius, cfg.particle_mass)


def build_hopper(cfg: SceneConfig) -> tuple[TriMesh, ParticleState]:
    """Hopper mesh (walls + closed cap) and a jittered lattice filling."""
    if cfg.kind != "hopper":
        raise ValueError("build_hopper needs a hopper config")
    scene = Scene.from_config(cfg)
    r = 1.05 * cfg.particle_radius
    a, hy, H = cfg.hopper_half_width, cfg.hopper_depth / 2, cfg.hopper_height
    alpha = math.radians(cfg.alpha)
    sa, ca = math.sin(alpha), math.cos(alpha)

    def inside(p):
        # signed distance to the inclined walls, measured in the x-z plane
        d = (np.abs(p[:, 0]) - a) * sa - p[:, 2] * ca
        return (d <= -r) & (np.abs(p[:, 1]) <= hy - r) & (p[:, 2] >= r) & (p[:, 2] <= H - r)

    A = a + H * ca / sa
    rng = np.random.default_rng(cfg.seed)
    pos = _lattice_fill(cfg, inside, (-A, -hy, 0.0), (A, hy, H), rng)
    return scene.mesh_at(0), _particles(cfg, pos)


def build_box(cfg: SceneConfig) -> tuple[TriMesh, ParticleState]:
    scene = Scene.from_config(cfg)
    lo, hi = scene.walls.bounds()
    rng = np.random.default_rng(cfg.seed)
    pos = _lattice_fill(cfg, lambda p: np.ones(len(p), bool), lo, hi, rng)
    return scene.walls, _particles(cfg, pos)


def build_drum(cfg: SceneConfig, mat: Optional[MaterialParams] = None) -> tuple[TriMesh, ParticleState]:
    """Drum mesh and an initial filling.

    The filling settles under gravity in a resting drum whose orientation is the
    working drum rotated by ``-fill_angle`` about x; the settled bed is then
    rigidly rotated by ``+fill_angle`` about x into the working drum.
    """
    if cfg.kind != "drum":
        raise ValueError("build_drum needs a drum config")
    mat = mat or MaterialParams()
    scene = Scene.from_config(cfg)
    theta = math.radians(cfg.fill_angle)
    to_rest = rotation_x(-theta)
    rest_mesh = scene.walls.transformed(to_rest)
    R, hl, r = cfg.drum_radius, cfg.drum_length / 2, 1.05 * cfg.particle_radius
    # shrink the inscribed radius for the faceted wall
    r_in = R * math.cos(math.pi / cfg.drum_segments) - r

    def inside(p_local):
        return (np.hypot(p_local[:, 0], p_local[:, 2]) <= r_in) & (np.abs(p_local[:, 1]) <= hl - r)

    rng = np.random.default_rng(cfg.seed)
    local = _lattice_fill(
        cfg, inside, (-R, -hl, -R), (R, hl, R), rng, sort_key=lambda p: p @ to_rest.T[:, 2]
    )
    state = _particles(cfg, local @ to_rest.T)
    check_stability(state, mat, cfg.dt)
    for _ in range(cfg.settle_steps):
        state = dem_step(state, rest_mesh, mat, cfg.dt)
    back = rotation_x(theta)
    state = ParticleState(state.positions @ back.T, np.zeros_like(state.velocities), state.radii, state.masses, 0.0)
    return scene.walls, state


def build_scene(cfg: SceneConfig, mat: Optional[MaterialParams] = None) -> tuple[Scene, ParticleState]:
    if cfg.kind == "hopper":
        _, state = build_hopper(cfg)
    elif cfg.kind == "drum":
        _, state = build_drum(cfg, mat)
    else:
        _, state = build_box(cfg)
    return Scene.from_config(cfg), state


def hopper_training_configs(n: int = 30, seed: int = 0, **overrides) -> list[SceneConfig]:
    """Varied hopper configs: wall angle, outlet size and filling seed."""
    rng = np.random.default_rng(seed)
    cfgs = []
    for i in range(n):
        cfgs.append(
            SceneConfig(
                kind="hopper",
                alpha=float(rng.uniform(55.0, 80.0)),
                hole_radius=float(rng.uniform(0.025, 0.04)),
                seed=int(rng.integers(2**31)),
                **overrides,
            )
        )
    return cfgs


# ---------------------------------------------------------------------------
# contacts and forces


def particle_contacts(state: ParticleState, cell_size: Optional[float] = None) -> Contacts:
    """Overlapping sphere pairs (i < j), found with a uniform cell list."""
    pos, rad = state.positions, state.radii
    if cell_size is None:
        cell_size = 2.0 * float(rad.max()) if len(rad) else 1.0
    elif len(rad) and cell_size < 2.0 * float(rad.max()) * (1 - 1e-12):
        raise ValueError("cell_size must be at least twice the largest radius")
    i, j = cell_list_candidates(pos, cell_size)
    diff = pos[i] - pos[j]
    dist = np.sqrt(np.sum(diff**2, axis=1))
    keep = dist < rad[i] + rad[j]
    i, j, diff, dist = i[keep], j[keep], diff[keep], dist[keep]
    if np.any(dist < CENTER_TOL):
        k = int(np.argmax(dist < CENTER_TOL))
        raise SimulationError(f"coincident particle centers {int(i[k])} and {int(j[k])}")
    normal = diff / dist[:, None]
    vrel = np.sum((state.velocities[i] - state.velocities[j]) * normal, axis=1)
    return Contacts(PARTICLE_PARTICLE, i, j, rad[i] + rad[j] - dist, normal, vrel)


def wall_contacts(
    state: ParticleState, mesh: TriMesh, mesh_velocity_at: Optional[Callable] = None
) -> Contacts:
    """Sphere-triangle overlaps; one contact per (particle, triangle) in reach."""
    pos, rad = state.positions, state.radii
    pi, ti = nearby_triangle_pairs(pos, mesh, rad)
    if len(pi):
        B, E0, E1 = mesh.canonical
        _, _, cp, sq, _ = closest_point_kernel(pos[pi], B[ti], E0[ti], E1[ti])
        keep = sq < rad[pi] ** 2
        pi, ti, cp, sq = pi[keep], ti[keep], cp[keep], sq[keep]
    else:
        cp, sq = np.zeros((0, 3)), np.zeros(0)
    dist = np.sqrt(sq)
    if np.any(dist < CENTER_TOL):
        k = int(np.argmax(dist < CENTER_TOL))
        raise SimulationError(f"particle {int(pi[k])} center lies on triangle {int(ti[k])}")
    normal = (pos[pi] - cp) / dist[:, None]
    vel = state.velocities[pi]
    if mesh_velocity_at is not None and len(pi):
        vel = vel - mesh_velocity_at(cp)
    vrel = np.sum(vel * normal, axis=1)
    return Contacts(PARTICLE_WALL, pi, ti, rad[pi] - dist, normal, vrel, point=cp)


def force_magnitudes(overlap, rel_normal_velocity, mat: MaterialParams) -> np.ndarray:
    return np.maximum(mat.k * overlap - mat.gamma * rel_normal_velocity, 0.0)


def contact_force(c: Contact, mat: MaterialParams) -> np.ndarray:
    """Force on particle ``c.i``: (k*delta - gamma*v_n) along the normal, never attractive."""
    mag = max(mat.k * c.overlap - mat.gamma * c.rel_normal_velocity, 0.0)
    return mag * np.asarray(c.normal, dtype=float)


def accelerations(
    state: ParticleState,
    mesh: Optional[TriMesh],
    mat: MaterialParams,
    mesh_velocity_at: Optional[Callable] = None,
    cell_size: Optional[float] = None,
) -> np.ndarray:
    n = len(state)
    force = np.zeros((n, 3))
    pc = particle_contacts(state, cell_size)
    if len(pc):
        f = force_magnitudes(pc.overlap, pc.rel_normal_velocity, mat)[:, None] * pc.normal
        np.add.at(force, pc.i, f)
        np.add.at(force, pc.j, -f)
    if mesh is not None and len(mesh):
        wc = wall_contacts(state, mesh, mesh_velocity_at)
        if len(wc):
            f = force_magnitudes(wc.overlap, wc.rel_normal_velocity, mat)[:, None] * wc.normal
            np.add.at(force, wc.i, f)
    acc = force / state.masses[:, None] + np.asarray(mat.gravity)
    bad = ~np.isfinite(acc).all(axis=1)
    if bad.any():
        raise SimulationError(f"non-finite force on particle {int(np.argmax(bad))}")
    return acc


def dem_step(
    state: ParticleState,
    mesh: Optional[TriMesh],
    mat: MaterialParams,
    dt: float,
    mesh_velocity_at: Optional[Callable] = None,
    cell_size: Optional[float] = None,
) -> ParticleState:
    if not dt > 0:
        raise ValueError("dt must be positive")
    acc = accelerations(state, mesh, mat, mesh_velocity_at, cell_size)
    vel = state.velocities + dt * acc
    pos = state.positions + dt * vel
    return ParticleState(pos, vel, state.radii, state.masses, state.time + dt)


def stability_bound(state: ParticleState, mat: MaterialParams) -> float:
    return 0.1 * math.sqrt(float(state.masses.min()) / mat.k)


def check_stability(state: ParticleState, mat: MaterialParams, dt: float) -> None:
    if len(state) and dt > stability_bound(state, mat):
        raise SimulationError(
            f"dt={dt:g} exceeds the stability bound 0.1*sqrt(m_min/k)={stability_bound(state, mat):g}"
        )


def elastic_energy(state: ParticleState, mesh: Optional[TriMesh], mat: MaterialParams) -> float:
    e = 0.0
    pc = particle_contacts(state)
    e += 0.5 * mat.k * float(np.sum(pc.overlap**2))
    if mesh is not None and len(mesh):
        wc = wall_contacts(state, mesh)
        e += 0.5 * mat.k * float(np.sum(wc.overlap**2))
    return e


def potential_energy(state: ParticleState, mat: MaterialParams, reference=None) -> float:
    ref = np.zeros(3) if reference is None else np.asarray(reference, dtype=float)
    g = np.asarray(mat.gravity)
    return -float(np.sum(state.masses * ((state.positions - ref) @ g)))


def shadow_energy(
    state: ParticleState, mesh: Optional[TriMesh], mat: MaterialParams, dt: float, reference=None
) -> float:
    """Energy consistent with the staggered velocities of semi-implicit Euler.

    The kinetic term pairs the incoming velocity with the outgoing one,
    ``0.5*m*v_k . v_{k+1}``; for piecewise-quadratic potentials this quantity
    is exactly conserved by the undamped integrator.
    """
    nxt = dem_step(state, mesh, mat, dt)
    kin = 0.5 * float(np.sum(state.masses * np.sum(state.velocities * nxt.velocities, axis=1)))
    return kin + potential_energy(state, mat, reference) + elastic_energy(state, mesh, mat)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Frames stored as stacked arrays; ``dt`` is the spacing between frames."""

    positions: np.ndarray
    velocities: np.ndarray
    times: np.ndarray
    radii: np.ndarray
    masses: np.ndarray
    dt: float
    scene: Optional[SceneConfig] = None
    mesh_angles: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(len(self.times), len(self.radii), 3)
        self.velocities = np.asarray(self.velocities, dtype=float).reshape(self.positions.shape)
        self.radii = np.asarray(self.radii, dtype=float)
        self.masses = np.asarray(self.masses, dtype=float)
        if len(self.times) != len(self.positions):
            raise ValueError("frame count mismatch between times and positions")
        if self.mesh_angles is not None:
            self.mesh_angles = np.asarray(self.mesh_angles, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_particles(self) -> int:
        return len(self.radii)

    def frame(self, k: int) -> ParticleState:
        return ParticleState(self.positions[k], self.velocities[k], self.radii, self.masses, float(self.times[k]))

    @property
    def frames(self) -> list[ParticleState]:
        return [self.frame(k) for k in range(len(self))]

    def scene_geometry(self) -> Optional[Scene]:
        return Scene.from_config(self.scene) if self.scene is not None else None

    def mesh_at_time(self, time: float) -> TriMesh:
        scene = self.scene_geometry()
        if scene is None:
            return TriMesh(np.zeros((0, 3, 3)))
        return scene.mesh_at(scene.step_of(time))

    def subsampled(self, stride: int, start: int = 0, stop: Optional[int] = None) -> "Trajectory":
        sl = slice(start, stop, stride)
        return replace(
            self,
            positions=self.positions[sl],
            velocities=self.velocities[sl],
            times=self.times[sl],
            dt=self.dt * stride,
            mesh_angles=None if self.mesh_angles is None else self.mesh_angles[sl],
        )


def simulate(
    cfg: SceneConfig,
    mat: Optional[MaterialParams] = None,
    initial: Optional[ParticleState] = None,
    progress: Optional[Callable[[int], None]] = None,
) -> Trajectory:
    """Run a scene for ``cfg.n_steps`` steps, keeping every ``cfg.stride``-th frame."""
    mat = mat or MaterialParams()
    if initial is None:
        scene, state = build_scene(cfg, mat)
    else:
        scene, state = Scene.from_config(cfg), initial.copy()
    check_stability(state, mat, cfg.dt)
    cell = 2.0 * float(state.radii.max()) if len(state) else 1.0
    pos, vel, times, angles = [state.positions], [state.velocities], [0.0], [scene.angle_at(0)]
    state = ParticleState(state.positions, state.velocities, state.radii, state.masses, 0.0)
    for s in range(cfg.n_steps):
        mesh = scene.mesh_at(s)
        wall_v = scene.wall_velocity if scene.omega else None
        state = dem_step(state, mesh, mat, cfg.dt, wall_v, cell)
        state.time = (s + 1) * cfg.dt
        if (s + 1) % cfg.stride == 0:
            pos.append(state.positions)
            vel.append(state.velocities)
            times.append(state.time)
            angles.append(scene.angle_at(s + 1))
        if progress is not None:
            progress(s)
    return Trajectory(
        np.array(pos),
        np.array(vel),
        np.array(times),
        state.radii,
        state.masses,
        cfg.dt * cfg.stride,
        scene=cfg,
        mesh_angles=np.array(angles),
        meta={"material": {**asdict(mat), "gravity": list(mat.gravity)}},  # JSON-stable
    )
