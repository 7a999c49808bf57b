"""File formats: ASCII STL meshes, LIGGGHTS/LAMMPS text dumps, and binary
containers for trajectories, datasets and checkpoints.

Binary container layout (all integers and floats little-endian)::

    offset  size  field
    0       4     magic (b"GFT1" trajectory, b"GFD1" dataset, b"GFC1" checkpoint)
    4       4     uint32 format version (currently 1)
    8       8     uint64 header length H in bytes
    16      H     UTF-8 JSON header; its "arrays" entry lists, in payload
                  order, {"name", "dtype" ("<f8" or "<i8"), "shape"}
    16+H    ...   raw C-ordered array payloads, back to back

The file length must equal ``16 + H`` plus the payload sizes exactly.
Trajectory payloads are radii, masses, times, positions (F, N, 3),
velocities (F, N, 3) and, if present, per-frame mesh angles.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .dem import SceneConfig, Trajectory
from .geometry import GeometryError, TriMesh
from .graph import FeatureConfig, GraphSample, NormalizerStats
from .learner.nn import GnnParams

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
TRAJECTORY_MAGIC = b"GFT1"
DATASET_MAGIC = b"GFD1"
CHECKPOINT_MAGIC = b"GFC1"

PathLike = Union[str, os.PathLike]


class ParseError(ValueError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# atomic writes and the binary container


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def pack_container(magic: bytes, header: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> bytes:
    entries, chunks = [], []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f8"
        arr = np.ascontiguousarray(arr, dtype=dtype)
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    head = json.dumps({**header, "arrays": entries}, sort_keys=True, default=_json_default).encode()
    return _PREFIX.pack(magic, FORMAT_VERSION, len(head)) + head + b"".join(chunks)


def unpack_container(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for a header")
    got, version, hlen = _PREFIX.unpack_from(data)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    start = _PREFIX.size
    if start + hlen > len(data):
        raise FormatError("truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode())
        entries = header.pop("arrays")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    pos = start + hlen
    arrays = {}
    try:
        for entry in entries:
            dtype = np.dtype(entry["dtype"])
            if dtype.str not in ("<f8", "<i8"):
                raise FormatError(f"unsupported dtype {entry['dtype']}")
            shape = tuple(int(s) for s in entry["shape"])
            if any(s < 0 for s in shape):
                raise FormatError("negative array dimension")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"truncated payload in array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(data, dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt array table: {exc}") from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after payload")
    return header, arrays


def _read(path: PathLike) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# trajectories


def trajectory_to_bytes(traj: Trajectory) -> bytes:
    header = {
        "n_particles": traj.n_particles,
        "n_frames": len(traj),
        "dt": traj.dt,
        "scene": None if traj.scene is None else traj.scene.to_dict(),
        "meta": traj.meta,
    }
    arrays = [
        ("radii", traj.radii),
        ("masses", traj.masses),
        ("times", traj.times),
        ("positions", traj.positions),
        ("velocities", traj.velocities),
    ]
    if traj.mesh_angles is not None:
        arrays.append(("mesh_angles", traj.mesh_angles))
    return pack_container(TRAJECTORY_MAGIC, header, arrays)


def trajectory_from_bytes(data: bytes) -> Trajectory:
    header, arrays = unpack_container(data, TRAJECTORY_MAGIC)
    try:
        n, f = int(header["n_particles"]), int(header["n_frames"])
        pos, vel = arrays["positions"], arrays["velocities"]
        if pos.shape != (f, n, 3) or vel.shape != (f, n, 3) or arrays["times"].shape != (f,):
            raise FormatError("declared frame/particle counts do not match the payload")
        if arrays["radii"].shape != (n,) or arrays["masses"].shape != (n,):
            raise FormatError("per-particle arrays do not match the particle count")
        scene = None if header["scene"] is None else scene_config_from_dict(header["scene"])
        return Trajectory(
            pos, vel, arrays["times"], arrays["radii"], arrays["masses"], float(header["dt"]),
            scene=scene, mesh_angles=arrays.get("mesh_angles"), meta=dict(header.get("meta") or {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"incomplete trajectory header: {exc}") from None


def write_trajectory(path: PathLike, traj: Trajectory) -> None:
    atomic_write_bytes(path, trajectory_to_bytes(traj))


def read_trajectory(path: PathLike) -> Trajectory:
    return trajectory_from_bytes(_read(path))


def scene_config_from_dict(d: dict) -> SceneConfig:
    known = {f.name for f in fields(SceneConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    d = dict(d)
    if "box_size" in d:
        d["box_size"] = tuple(d["box_size"])
    return SceneConfig(**d)


# ---------------------------------------------------------------------------
# datasets


def dataset_to_bytes(samples: Sequence[GraphSample], cfg: FeatureConfig, stats: NormalizerStats) -> bytes:
    header = {"features": asdict(cfg), "stats": stats.to_dict(), "samples": []}
    arrays = []
    for i, s in enumerate(samples):
        header["samples"].append({"n_real": s.n_real, "frame_index": s.frame_index, "has_targets": s.targets is not None})
        arrays += [
            (f"{i}/node_features", s.node_features),
            (f"{i}/edges", s.edges.astype(np.int64).reshape(-1, 2)),
            (f"{i}/edge_features", s.edge_features.reshape(len(s.edges), -1)),
        ]
        if s.targets is not None:
            arrays.append((f"{i}/targets", s.targets))
    return pack_container(DATASET_MAGIC, header, arrays)


def dataset_from_bytes(data: bytes) -> tuple[list[GraphSample], FeatureConfig, NormalizerStats]:
    header, arrays = unpack_container(data, DATASET_MAGIC)
    try:
        cfg = FeatureConfig(**header["features"])
        stats = NormalizerStats.from_dict(header["stats"])
        samples = []
        for i, meta in enumerate(header["samples"]):
            samples.append(
                GraphSample(
                    arrays[f"{i}/node_features"],
                    arrays[f"{i}/edges"],
                    arrays[f"{i}/edge_features"],
                    int(meta["n_real"]),
                    arrays[f"{i}/targets"] if meta["has_targets"] else None,
                    int(meta["frame_index"]),
                )
            )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"incomplete dataset: {exc}") from None
    return samples, cfg, stats


def write_dataset(path: PathLike, samples, cfg: FeatureConfig, stats: NormalizerStats) -> None:
    atomic_write_bytes(path, dataset_to_bytes(samples, cfg, stats))


def read_dataset(path: PathLike):
    return dataset_from_bytes(_read(path))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: GnnParams
    features: FeatureConfig
    stats: NormalizerStats
    meta: dict = field(default_factory=dict)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "model": ckpt.params.config(),
        "model_meta": ckpt.params.meta,
        "features": asdict(ckpt.features),
        "stats": ckpt.stats.to_dict(),
        "meta": ckpt.meta,
    }
    arrays = [(k, ckpt.params.tensors[k]) for k in sorted(ckpt.params.tensors)]
    return pack_container(CHECKPOINT_MAGIC, header, arrays)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    header, arrays = unpack_container(data, CHECKPOINT_MAGIC)
    try:
        params = GnnParams(arrays, meta=dict(header.get("model_meta") or {}), **header["model"])
        return Checkpoint(
            params,
            FeatureConfig(**header["features"]),
            NormalizerStats.from_dict(header["stats"]),
            dict(header.get("meta") or {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise FormatError(f"incomplete checkpoint: {exc}") from None


def write_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ckpt))


def read_checkpoint(path: PathLike) -> Checkpoint:
    return checkpoint_from_bytes(_read(path))


# ---------------------------------------------------------------------------
# CSV


def write_csv(path: PathLike, rows: Iterable[dict], columns: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns))
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path: PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# ASCII STL


def _as_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        try:
            return bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not UTF-8 text (byte {exc.start})") from None
    return data


def _finite_floats(tokens, lineno, what) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in tokens])
    except ValueError:
        raise ParseError(f"line {lineno}: malformed {what} coordinates") from None
    if not np.isfinite(vals).all():
        raise ParseError(f"line {lineno}: non-finite {what} coordinates")
    return vals


def parse_stl(data, name: str = "", normal_tol: float = 1e-3) -> TriMesh:
    """Parse an ASCII STL solid into a mesh.

    Facet normals in the file are ignored; normals come from the vertex
    winding.  A file normal disagreeing with the winding by more than
    ``normal_tol`` (in unit-vector distance) triggers a warning.
    """
    text = _as_text(data)
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, toks) for n, toks in lines if toks]
    it = iter(lines)

    def expect(keyword_count, *keywords):
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise ParseError(f"unexpected end of input, expected {' '.join(keywords)!r}") from None
        if [t.lower() for t in toks[:keyword_count]] != list(keywords):
            raise ParseError(f"line {lineno}: expected {' '.join(keywords)!r}, found {' '.join(toks[:3])!r}")
        return lineno, toks

    lineno, toks = expect(1, "solid")
    solid_name = " ".join(toks[1:])
    tris, file_normals = [], []
    while True:
        try:
            lineno, toks = next(it)
        except StopIteration:
            raise ParseError("unexpected end of input, expected 'facet' or 'endsolid'") from None
        head = toks[0].lower()
        if head == "endsolid":
            break
        if head != "facet" or len(toks) != 5 or toks[1].lower() != "normal":
            raise ParseError(f"line {lineno}: expected 'facet normal nx ny nz'")
        file_normals.append(_finite_floats(toks[2:], lineno, "normal"))
        expect(2, "outer", "loop")
        verts = []
        for _ in range(3):
            lineno, toks = expect(1, "vertex")
            if len(toks) != 4:
                raise ParseError(f"line {lineno}: vertex needs three coordinates")
            verts.append(_finite_floats(toks[1:], lineno, "vertex"))
        expect(1, "endloop")
        expect(1, "endfacet")
        tris.append(verts)
    for lineno, toks in it:
        raise ParseError(f"line {lineno}: content after 'endsolid'")

    vertices = np.array(tris, dtype=float).reshape(-1, 3, 3)
    try:
        mesh = TriMesh(vertices, name=name or solid_name)
    except GeometryError as exc:
        idx = str(exc).rsplit(" ", 1)[-1]
        raise ParseError(f"degenerate facet {idx}") from None
    if len(mesh):
        stored = np.array(file_normals)
        lengths = np.linalg.norm(stored, axis=1)
        given = lengths > 0
        unit = stored[given] / lengths[given, None]
        bad = np.linalg.norm(unit - mesh.normals[given], axis=1) > normal_tol
        if bad.any():
            first = int(np.flatnonzero(given)[np.argmax(bad)])
            warnings.warn(
                f"{int(bad.sum())} facet normal(s) disagree with the vertex winding (first: facet {first}); using the winding",
                stacklevel=2,
            )
    return mesh


def format_stl(mesh: TriMesh, name: str = "mesh") -> str:
    out = [f"solid {name}"]
    for tri, n in zip(mesh.vertices, mesh.normals):
        out.append("  facet normal " + " ".join(repr(float(c)) for c in n))
        out.append("    outer loop")
        for v in tri:
            out.append("      vertex " + " ".join(repr(float(c)) for c in v))
        out.append("    endloop")
        out.append("  endfacet")
    out.append(f"endsolid {name}")
    return "\n".join(out) + "\n"


def read_stl(path: PathLike) -> TriMesh:
    return parse_stl(_read(path), name=Path(path).stem)


# ---------------------------------------------------------------------------
# LIGGGHTS / LAMMPS dumps

REQUIRED_COLUMNS = ("id", "x", "y", "z")


@dataclass
class DumpFrame:
    timestep: int
    box: np.ndarray  # (3, 2) lo/hi
    ids: np.ndarray
    positions: np.ndarray
    velocities: Optional[np.ndarray] = None
    radii: Optional[np.ndarray] = None
    types: Optional[np.ndarray] = None
    columns: tuple = ()

    def __len__(self) -> int:
        return len(self.ids)


def parse_liggghts_dump(data) -> list[DumpFrame]:
    """Parse a text dump into frames with atoms sorted by id."""
    text = _as_text(data)
    lines = text.splitlines()
    frames = []
    i = 0

    def need(i, what):
        if i >= len(lines):
            raise ParseError(f"unexpected end of input, expected {what}")
        return lines[i].strip()

    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        line = need(i, "ITEM: TIMESTEP")
        if line != "ITEM: TIMESTEP":
            raise ParseError(f"line {i + 1}: expected 'ITEM: TIMESTEP'")
        try:
            timestep = int(need(i + 1, "timestep value"))
        except ValueError:
            raise ParseError(f"line {i + 2}: malformed timestep") from None
        if need(i + 2, "ITEM: NUMBER OF ATOMS") != "ITEM: NUMBER OF ATOMS":
            raise ParseError(f"line {i + 3}: expected 'ITEM: NUMBER OF ATOMS'")
        try:
            n_atoms = int(need(i + 3, "atom count"))
        except ValueError:
            raise ParseError(f"line {i + 4}: malformed atom count") from None
        if n_atoms < 0:
            raise ParseError(f"line {i + 4}: negative atom count")
        if not need(i + 4, "ITEM: BOX BOUNDS").startswith("ITEM: BOX BOUNDS"):
            raise ParseError(f"line {i + 5}: expected 'ITEM: BOX BOUNDS'")
        box = np.zeros((3, 2))
        for a in range(3):
            toks = need(i + 5 + a, "box bounds").split()
            if len(toks) < 2:
                raise ParseError(f"line {i + 6 + a}: box bounds need lo and hi")
            box[a] = _finite_floats(toks[:2], i + 6 + a, "box")
        header = need(i + 8, "ITEM: ATOMS")
        if not header.startswith("ITEM: ATOMS"):
            raise ParseError(f"line {i + 9}: expected 'ITEM: ATOMS <columns>'")
        columns = tuple(header.split()[2:])
        for col in REQUIRED_COLUMNS:
            if col not in columns:
                raise ParseError(f"timestep {timestep}: required column {col!r} missing")
        if len(set(columns)) != len(columns):
            raise ParseError(f"timestep {timestep}: duplicate column names")
        start = i + 9
        rows = []
        for k in range(n_atoms):
            j = start + k
            if j >= len(lines) or lines[j].startswith("ITEM:"):
                raise ParseError(f"timestep {timestep}: expected {n_atoms} atoms, found {k}")
            toks = lines[j].split()
            if len(toks) != len(columns):
                raise ParseError(f"line {j + 1}: expected {len(columns)} values, found {len(toks)}")
            rows.append(toks)
        i = start + n_atoms
        if i < len(lines) and lines[i].strip() and not lines[i].startswith("ITEM:"):
            raise ParseError(f"timestep {timestep}: more atom rows than the declared {n_atoms}")
        frames.append(_frame_from_rows(timestep, box, columns, rows, start))
    return frames


def _frame_from_rows(timestep, box, columns, rows, first_line) -> DumpFrame:
    col = {c: k for k, c in enumerate(columns)}
    table = np.array(rows, dtype=object).reshape(len(rows), len(columns))
    try:
        ids = np.array([int(v) for v in table[:, col["id"]]], dtype=np.int64)
    except ValueError:
        raise ParseError(f"timestep {timestep}: non-integer atom id") from None
    if len(np.unique(ids)) != len(ids):
        raise ParseError(f"timestep {timestep}: duplicate atom ids")

    def floats(names):
        try:
            vals = table[:, [col[c] for c in names]].astype(float)
        except ValueError:
            raise ParseError(f"timestep {timestep}: malformed numeric value in columns {list(names)}") from None
        if not np.isfinite(vals).all():
            raise ParseError(f"timestep {timestep}: non-finite value in columns {list(names)}")
        return vals

    order = np.argsort(ids, kind="stable")
    pos = floats(("x", "y", "z"))[order]
    vel = floats(("vx", "vy", "vz"))[order] if all(c in col for c in ("vx", "vy", "vz")) else None
    rad = floats(("radius",))[order, 0] if "radius" in col else None
    types = None
    if "type" in col:
        try:
            types = np.array([int(v) for v in table[:, col["type"]]], dtype=np.int64)[order]
        except ValueError:
            raise ParseError(f"timestep {timestep}: non-integer atom type") from None
    return DumpFrame(timestep, box, ids[order], pos, vel, rad, types, columns)


def dump_to_trajectory(
    frames: Sequence[DumpFrame],
    timestep_size: float = 1.0,
    radius: float = 0.01,
    density: float = 2500.0,
) -> Trajectory:
    """Stack dump frames into a trajectory.

    Frame spacing is ``timestep_size`` times the (uniform) timestep gap.
    Missing velocities are rebuilt by forward differences of the positions
    (backward difference for the last frame) and flagged in ``meta``.
    """
    if not frames:
        raise ParseError("dump holds no frames")
    ids = frames[0].ids
    for f in frames[1:]:
        if len(f.ids) != len(ids) or not np.array_equal(f.ids, ids):
            raise ParseError(f"timestep {f.timestep}: atom ids differ from the first frame")
    steps = np.array([f.timestep for f in frames], dtype=np.int64)
    gaps = np.diff(steps)
    if len(gaps) and (np.any(gaps <= 0) or np.any(gaps != gaps[0])):
        raise ParseError("timesteps must increase uniformly")
    dt = float(gaps[0]) * timestep_size if len(gaps) else timestep_size
    pos = np.array([f.positions for f in frames]).reshape(len(frames), len(ids), 3)
    meta = {"source": "dump", "timesteps": steps.tolist(), "ids": ids.tolist()}
    if all(f.velocities is not None for f in frames):
        vel = np.array([f.velocities for f in frames]).reshape(pos.shape)
        meta["velocities_reconstructed"] = False
    else:
        vel = np.zeros_like(pos)
        if len(frames) > 1:
            vel[:-1] = np.diff(pos, axis=0) / dt
            vel[-1] = vel[-2]
        meta["velocities_reconstructed"] = True
    radii = frames[0].radii if frames[0].radii is not None else np.full(len(ids), radius)
    masses = density * 4.0 / 3.0 * math.pi * radii**3
    return Trajectory(pos, vel, (steps - steps[0]) * timestep_size, radii, masses, dt, meta=meta)


def format_dump(traj: Trajectory, timestep_stride: int = 1, velocities: bool = True) -> str:
    out = []
    lo = traj.positions.reshape(-1, 3).min(axis=0) if traj.n_particles and len(traj) else np.zeros(3)
    hi = traj.positions.reshape(-1, 3).max(axis=0) if traj.n_particles and len(traj) else np.ones(3)
    cols = "id type x y z" + (" vx vy vz" if velocities else "") + " radius"
    for k in range(len(traj)):
        out += ["ITEM: TIMESTEP", str(k * timestep_stride), "ITEM: NUMBER OF ATOMS", str(traj.n_particles)]
        out.append("ITEM: BOX BOUNDS ff ff ff")
        out += [f"{float(lo[a])!r} {float(hi[a])!r}" for a in range(3)]
        out.append(f"ITEM: ATOMS {cols}")
        for i in range(traj.n_particles):
            row = [str(i + 1), "1", *(repr(float(c)) for c in traj.positions[k, i])]
            if velocities:
                row += [repr(float(c)) for c in traj.velocities[k, i]]
            row.append(repr(float(traj.radii[i])))
            out.append(" ".join(row))
    return "\n".join(out) + "\n"


def read_dump(path: PathLike) -> list[DumpFrame]:
    return parse_liggghts_dump(_read(path))
