"""Point-triangle proximity, normal canonicalization and rigid mesh motion.

Triangles are parameterized as ``T(u, v) = B + u*E0 + v*E1`` over the closed
set ``u >= 0, v >= 0, u + v <= 1``.  Closest-point queries minimize the squared
distance ``Q(u, v) = |T(u, v) - P|^2`` over that set and label the minimizer
with one of seven regions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEGENERATE_TOL = 1e-12
ZERO_TOL = 1e-12


class GeometryError(ValueError):
    pass


class Region(enum.IntEnum):
    INTERIOR = 0
    EDGE_U0 = 1
    EDGE_V0 = 2
    EDGE_HYP = 3
    CORNER_B = 4
    CORNER_E0 = 5
    CORNER_E1 = 6


@dataclass(frozen=True)
class Triangle:
    base: np.ndarray
    e0: np.ndarray
    e1: np.ndarray

    @classmethod
    def from_vertices(cls, a, b, c) -> "Triangle":
        a, b, c = (np.asarray(x, dtype=float) for x in (a, b, c))
        return cls(a, b - a, c - a)

    def at(self, u: float, v: float) -> np.ndarray:
        return self.base + (u * self.e0 + v * self.e1)


@dataclass(frozen=True)
class ClosestPoint:
    point: np.ndarray
    u: float
    v: float
    region: Region
    sq_dist: float


@dataclass(frozen=True)
class OrientedNormalPair:
    first: np.ndarray
    second: np.ndarray
    keys: tuple[int, int]


def _check_triangles(base, e0, e1):
    cross = np.cross(e0, e1)
    area2 = np.linalg.norm(cross, axis=-1)
    finite = np.isfinite(base).all(-1) & np.isfinite(e0).all(-1) & np.isfinite(e1).all(-1)
    bad = np.flatnonzero(~finite | ~(area2 > DEGENERATE_TOL))
    if bad.size:
        raise GeometryError(f"degenerate or non-finite triangle at index {int(bad[0])}")


@dataclass(frozen=True)
class TriMesh:
    """Triangle soup stored as an (T, 3, 3) vertex array.

    ``base``/``e0``/``e1`` follow the stored corner order.  Proximity queries use
    a winding-independent vertex order (``canonical``) so that flipping a
    triangle's orientation changes nothing but the sign of its normal.
    """

    vertices: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float).reshape(-1, 3, 3)
        object.__setattr__(self, "vertices", verts)
        if len(verts):
            _check_triangles(self.base, self.e0, self.e1)

    def __len__(self) -> int:
        return len(self.vertices)

    @classmethod
    def from_triangles(cls, triangles, name="mesh") -> "TriMesh":
        verts = [np.stack([t.base, t.base + t.e0, t.base + t.e1]) for t in triangles]
        return cls(np.array(verts).reshape(-1, 3, 3), name=name)

    @property
    def base(self) -> np.ndarray:
        return self.vertices[:, 0]

    @property
    def e0(self) -> np.ndarray:
        return self.vertices[:, 1] - self.vertices[:, 0]

    @property
    def e1(self) -> np.ndarray:
        return self.vertices[:, 2] - self.vertices[:, 0]

    def triangle(self, i: int) -> Triangle:
        return Triangle(self.base[i].copy(), self.e0[i].copy(), self.e1[i].copy())

    @cached_property
    def canonical(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        verts = self.vertices
        # lexicographic sort of the three corners of every triangle
        order = np.lexsort((verts[:, :, 2], verts[:, :, 1], verts[:, :, 0]), axis=1)
        sv = np.take_along_axis(verts, order[:, :, None], axis=1)
        return sv[:, 0], sv[:, 1] - sv[:, 0], sv[:, 2] - sv[:, 0]

    @cached_property
    def normals(self) -> np.ndarray:
        _, ce0, ce1 = self.canonical
        cn = np.cross(ce0, ce1)
        cn = cn / np.linalg.norm(cn, axis=1, keepdims=True)
        sign = np.sign(np.einsum("ij,ij->i", np.cross(self.e0, self.e1), cn))
        return cn * sign[:, None]

    @cached_property
    def canonical_normal_pairs(self) -> np.ndarray:
        """(T, 6) array: both orientations of each normal, smaller key first."""
        if not len(self):
            return np.zeros((0, 6))
        return np.array([np.concatenate(_sorted_pair(n)[:2]) for n in self.normals])

    @cached_property
    def triangle_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=1), self.vertices.max(axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.vertices.reshape(-1, 3)
        return pts.min(axis=0), pts.max(axis=0)

    def flipped(self, which=None) -> "TriMesh":
        """Swap two corners of the selected triangles (all by default)."""
        verts = self.vertices.copy()
        idx = np.arange(len(self)) if which is None else np.asarray(which)
        verts[idx, 1], verts[idx, 2] = self.vertices[idx, 2], self.vertices[idx, 1]
        return TriMesh(verts, name=self.name)

    def transformed(self, rotation: np.ndarray, center=None) -> "TriMesh":
        c = np.zeros(3) if center is None else np.asarray(center, dtype=float)
        verts = (self.vertices - c) @ np.asarray(rotation).T + c
        return TriMesh(verts, name=self.name)

    def subset(self, keep) -> "TriMesh":
        return TriMesh(self.vertices[np.asarray(keep)], name=self.name)

    def merged(self, other: "TriMesh", name=None) -> "TriMesh":
        return TriMesh(np.concatenate([self.vertices, other.vertices]), name=name or self.name)


def _dot(x, y):
    # fixed summation order, independent of memory layout
    return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] + x[..., 2] * y[..., 2]


def closest_point_kernel(P, base, e0, e1):
    """Elementwise closest points for broadcast-compatible (..., 3) arrays.

    Returns ``(u, v, closest, sq_dist, region)``.
    """
    D = base - P
    a = _dot(e0, e0)
    b = _dot(e0, e1)
    c = _dot(e1, e1)
    d = _dot(D, e0)
    e = _dot(D, e1)
    det = a * c - b * b

    with np.errstate(divide="ignore", invalid="ignore"):
        u_in = (b * e - c * d) / det
        v_in = (b * d - a * e) / det
        interior = (u_in > 0) & (v_in > 0) & (u_in + v_in < 1)
        f = e1 - e0
        g = _dot(D + e0, f)
        t_u0 = np.clip(-e / c, 0.0, 1.0)
        t_v0 = np.clip(-d / a, 0.0, 1.0)
        t_hyp = np.clip(-g / _dot(f, f), 0.0, 1.0)

    shape = np.broadcast_shapes(d.shape, np.shape(a))
    zero = np.zeros(shape)
    cand_u = np.stack(np.broadcast_arrays(u_in, zero, t_v0, 1.0 - t_hyp))
    cand_v = np.stack(np.broadcast_arrays(v_in, t_u0, zero, t_hyp))
    pts = base + (cand_u[..., None] * e0 + cand_v[..., None] * e1)
    r = pts - P
    sq = _dot(r, r)

    # boundary candidates in tie-break order u=0, v=0, u+v=1 (strict < keeps the earlier)
    best = np.ones(shape, dtype=np.int64)
    best_sq = sq[1].copy()
    for k in (2, 3):
        better = sq[k] < best_sq
        best[better] = k
        best_sq[better] = sq[k][better]
    choice = np.where(interior, 0, best)

    idx = choice[None]
    u = np.take_along_axis(cand_u, idx, 0)[0]
    v = np.take_along_axis(cand_v, idx, 0)[0]
    closest = np.take_along_axis(pts, idx[..., None], 0)[0]
    sq_dist = np.take_along_axis(sq, idx, 0)[0]

    t_sel = np.select([choice == 1, choice == 2, choice == 3], np.broadcast_arrays(t_u0, t_v0, t_hyp), 0.5)
    at0, at1 = t_sel == 0.0, t_sel == 1.0
    region = np.select(
        [
            (choice == 1) & at0, (choice == 1) & at1,
            (choice == 2) & at0, (choice == 2) & at1,
            (choice == 3) & at0, (choice == 3) & at1,
        ],
        [Region.CORNER_B, Region.CORNER_E1, Region.CORNER_B, Region.CORNER_E0, Region.CORNER_E0, Region.CORNER_E1],
        choice,
    ).astype(np.int8)
    return u, v, closest, sq_dist, region


def closest_points(points, base, e0, e1):
    """Closest points of every query point (N, 3) on every triangle (T, 3).

    Outputs have leading shape (N, T).
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    return closest_point_kernel(P[:, None, :], base[None], e0[None], e1[None])


def nearby_triangle_pairs(points, mesh: "TriMesh", radius) -> tuple[np.ndarray, np.ndarray]:
    """(point, triangle) index pairs whose triangle AABB is within ``radius``.

    A conservative prefilter: every pair with true distance < radius survives.
    ``radius`` may be a scalar or one value per point.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(mesh) == 0 or len(P) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    lo, hi = mesh.triangle_bounds
    r = np.broadcast_to(np.asarray(radius, dtype=float), (len(P),))[:, None, None]
    inside = np.all((P[:, None, :] > lo[None] - r) & (P[:, None, :] < hi[None] + r), axis=-1)
    pi, ti = np.nonzero(inside)
    return pi, ti


def triangle_closest_point(p, tri: Triangle, index: int = 0) -> ClosestPoint:
    p = np.asarray(p, dtype=float)
    if not np.isfinite(p).all():
        raise GeometryError("query point is not finite")
    base, e0, e1 = (np.asarray(x, dtype=float)[None] for x in (tri.base, tri.e0, tri.e1))
    try:
        _check_triangles(base, e0, e1)
    except GeometryError:
        raise GeometryError(f"degenerate triangle at index {index}") from None
    u, v, pt, sq, region = closest_points(p[None], base, e0, e1)
    return ClosestPoint(pt[0, 0], float(u[0, 0]), float(v[0, 0]), Region(int(region[0, 0])), float(sq[0, 0]))


def mesh_min_distance(p, mesh: TriMesh) -> tuple[int, ClosestPoint]:
    if len(mesh) == 0:
        raise GeometryError("mesh has no triangles")
    p = np.asarray(p, dtype=float)
    u, v, pt, sq, region = closest_points(p[None], mesh.base, mesh.e0, mesh.e1)
    i = int(np.argmin(sq[0]))
    return i, ClosestPoint(pt[0, i], float(u[0, i]), float(v[0, i]), Region(int(region[0, i])), float(sq[0, i]))


def partial_order_key(n) -> int:
    """Base-3 key of the component signs: sum_i 3**i * (sgn(n_i) + 1)."""
    n = np.asarray(n, dtype=float)
    signs = np.where(np.abs(n) < ZERO_TOL, 0, np.sign(n)).astype(int)
    return int(signs[0] + 1 + 3 * (signs[1] + 1) + 9 * (signs[2] + 1))


def _sorted_pair(n):
    norm = float(np.linalg.norm(n))
    if not norm > ZERO_TOL or not math.isfinite(norm):
        raise GeometryError("cannot canonicalize a (near-)zero normal")
    unit = np.asarray(n, dtype=float) / norm
    neg = -unit
    k_pos, k_neg = partial_order_key(unit), partial_order_key(neg)
    if k_pos <= k_neg:
        return unit, neg, (k_pos, k_neg)
    return neg, unit, (k_neg, k_pos)


def canonicalize_normal(n) -> OrientedNormalPair:
    first, second, keys = _sorted_pair(np.asarray(n, dtype=float))
    return OrientedNormalPair(first, second, keys)


def reflect(v, n) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    nn = float(n @ n)
    if not nn > ZERO_TOL**2:
        raise GeometryError("reflection normal is (near-)zero")
    return v - 2.0 * (v @ n) / nn * n


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotate_mesh_y(mesh: TriMesh, angle: float, center=None) -> TriMesh:
    if not math.isfinite(angle):
        raise GeometryError("rotation angle must be finite")
    if angle == 0.0:
        return mesh
    return mesh.transformed(rotation_y(angle), center)


# 27 neighbor-cell offsets of a uniform grid
_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def cell_list_candidates(positions, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """All pairs i < j whose particles sit in the same or adjacent grid cells.

    Any pair closer than ``cell_size`` is guaranteed to be among the candidates.
    Output is sorted lexicographically by (i, j).
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if not cell_size > 0:
        raise GeometryError("cell size must be positive")
    cells = np.floor((pos - pos.min(axis=0)) / cell_size).astype(np.int64)
    dims = cells.max(axis=0) + 3
    if float(dims[0]) * float(dims[1]) * float(dims[2]) > 2.0**62:
        # pathological spread; all-pairs is still exact
        i, j = np.triu_indices(n, 1)
        return i.astype(np.int64), j.astype(np.int64)
    cells += 1
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    stride = np.array([dims[1] * dims[2], dims[2], 1], dtype=np.int64)
    # all 27 neighbor cells of every particle in one vectorized lookup
    nk = (keys[:, None] + (_OFFSETS @ stride)[None, :]).ravel()
    lo = np.searchsorted(sorted_keys, nk, "left")
    cnt = np.searchsorted(sorted_keys, nk, "right") - lo
    total = int(cnt.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    i = np.repeat(np.repeat(np.arange(n), len(_OFFSETS)), cnt)
    within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    j = order[np.repeat(lo, cnt) + within]
    keep = i < j
    i, j = i[keep], j[keep]
    srt = np.lexsort((j, i))
    return i[srt], j[srt]


def all_pairs_within(positions, cutoff=None, radii=None) -> tuple[np.ndarray, np.ndarray]:
    """O(n^2) reference: pairs i < j closer than ``cutoff`` (or r_i + r_j)."""
    pos = np.asarray(positions, dtype=float)
    i, j = np.triu_indices(len(pos), 1)
    dist = np.sqrt(np.sum((pos[i] - pos[j]) ** 2, axis=1))
    lim = cutoff if radii is None else np.asarray(radii)[i] + np.asarray(radii)[j]
    keep = dist < lim
    return i[keep], j[keep]
