"""Trajectory comparison: mixing entropy, flow profiles, EMD and the paired
Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .dem import Trajectory

LN2 = math.log(2.0)
EXACT_WILCOXON_MAX_N = 20
ALTERNATIVES = ("less", "greater", "two_sided")


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# mixing entropy


@dataclass(frozen=True)
class GridSpec:
    origin: np.ndarray
    cell: np.ndarray
    counts: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "cell", np.asarray(self.cell, dtype=float).reshape(3))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) != 3 or min(self.counts) < 1 or not np.all(self.cell > 0):
            raise AnalysisError("grid needs positive cell sizes and counts")

    @classmethod
    def covering(cls, lo, hi, counts) -> "GridSpec":
        """Grid spanning the box [lo, hi], slightly padded so hi is inside."""
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        span = np.maximum(hi - lo, 1e-12) * (1 + 1e-9)
        return cls(lo, span / np.asarray(counts), counts)

    def flat_index(self, points) -> np.ndarray:
        idx = np.floor((np.asarray(points, dtype=float) - self.origin) / self.cell).astype(np.int64)
        counts = np.asarray(self.counts)
        outside = np.any((idx < 0) | (idx >= counts), axis=1)
        if outside.any():
            raise AnalysisError(f"particle {int(np.argmax(outside))} lies outside the entropy grid")
        return (idx[:, 0] * counts[1] + idx[:, 1]) * counts[2] + idx[:, 2]


@dataclass
class EntropyCurve:
    times: np.ndarray
    values: np.ndarray
    t0: int
    axis: int
    threshold: float

    def moving_average(self, window: int = 10) -> np.ndarray:
        if len(self.values) < window:
            return np.array([])
        return np.convolve(self.values, np.ones(window) / window, mode="valid")

    def rows(self):
        return [{"step": self.t0 + i, "time": t, "S": s} for i, (t, s) in enumerate(zip(self.times, self.values))]


def cell_entropy(n_plus, n_minus) -> np.ndarray:
    """Two-class entropy in nats per cell, with 0 log 0 = 0."""
    n_plus = np.asarray(n_plus, dtype=float)
    n_minus = np.asarray(n_minus, dtype=float)
    total = n_plus + n_minus
    out = np.zeros(np.broadcast(n_plus, n_minus).shape)
    for n in (n_plus, n_minus):
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(total > 0, n / np.where(total > 0, total, 1), 0.0)
            out -= np.where(f > 0, f * np.log(np.where(f > 0, f, 1.0)), 0.0)
    return out


def entropy_of_frame(points, labels, grid: GridSpec) -> float:
    """Count-weighted mean of per-cell entropies; ``labels`` are +1 / -1."""
    cells = grid.flat_index(points)
    size = int(np.prod(grid.counts))
    plus = np.bincount(cells[labels > 0], minlength=size)
    minus = np.bincount(cells[labels < 0], minlength=size)
    total = plus + minus
    if total.sum() == 0:
        return 0.0
    s = cell_entropy(plus, minus)
    return float(np.sum(total * s) / total.sum())


def split_labels(points, axis: int, threshold: float) -> np.ndarray:
    """Class -1 where ``coordinate <= threshold``, +1 otherwise."""
    return np.where(np.asarray(points)[:, axis] <= threshold, -1, 1)


def mixing_entropy(
    traj: Trajectory,
    grid: GridSpec,
    t0: int = 0,
    split: tuple = (0, 0.0),
) -> EntropyCurve:
    """Mixing entropy of two classes fixed at frame ``t0`` for frames t0..end."""
    if not 0 <= t0 < len(traj):
        raise AnalysisError(f"t0={t0} outside the trajectory's {len(traj)} frames")
    axis, threshold = int(split[0]), float(split[1])
    labels = split_labels(traj.positions[t0], axis, threshold)
    if np.all(labels > 0) or np.all(labels < 0):
        raise AnalysisError("split leaves one class empty at t0")
    values = np.array([entropy_of_frame(traj.positions[k], labels, grid) for k in range(t0, len(traj))])
    return EntropyCurve(traj.times[t0:].copy(), values, t0, axis, threshold)


# ---------------------------------------------------------------------------
# flow profiles


@dataclass
class FlowProfile:
    mode: str
    centers: np.ndarray
    mean_velocity: np.ndarray  # NaN rows where count == 0
    counts: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.counts > 0

    def rows(self):
        return [
            {"bin": c, "vx": v[0], "vy": v[1], "vz": v[2], "count": int(n)}
            for c, v, n in zip(self.centers, self.mean_velocity, self.counts)
        ]


def flow_profile(
    traj: Trajectory,
    mode: str = "per_time",
    bins: int = 10,
    window: Optional[tuple] = None,
    z_range: Optional[tuple] = None,
) -> FlowProfile:
    """Mean particle velocity per frame (``per_time``) or per z-bin (``per_z``).

    ``window`` is a half-open frame range ``(start, stop)``; the default is
    the whole trajectory.  Empty bins have count 0 and NaN mean.
    """
    start, stop = window if window is not None else (0, len(traj))
    start, stop = max(int(start), 0), min(int(stop), len(traj))
    if stop <= start or traj.n_particles == 0:
        raise AnalysisError("empty frame window")
    vel = traj.velocities[start:stop]
    if mode == "per_time":
        counts = np.full(stop - start, traj.n_particles)
        return FlowProfile(mode, traj.times[start:stop].copy(), vel.mean(axis=1), counts)
    if mode != "per_z":
        raise AnalysisError(f"unknown profile mode {mode!r}")
    if bins < 1:
        raise AnalysisError("bins must be >= 1")
    z = traj.positions[start:stop, :, 2].ravel()
    v = vel.reshape(-1, 3)
    lo, hi = z_range if z_range is not None else (float(z.min()), float(z.max()))
    if not hi > lo:
        hi = lo + 1e-12
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, bins - 1)
    inside = (z >= lo) & (z <= hi)
    counts = np.bincount(idx[inside], minlength=bins)
    sums = np.stack([np.bincount(idx[inside], weights=v[inside, c], minlength=bins) for c in range(3)], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], np.nan)
    return FlowProfile(mode, 0.5 * (edges[1:] + edges[:-1]), mean, counts)


# ---------------------------------------------------------------------------
# earth mover's distance


def emd(a, b) -> float:
    """Mean Euclidean transport cost between equal-size uniform point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise AnalysisError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if len(a) == 0:
        return 0.0
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of ranks of positive differences
    pvalue: float
    n: int  # nonzero differences
    exact: bool
    alternative: str

    def __float__(self) -> float:
        return self.pvalue


def _ranks(a) -> np.ndarray:
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(a, kind="stable")
    s = a[order]
    ranks = np.empty(len(a))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_null(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Counts of each doubled positive-rank sum over all 2^n sign patterns."""
    total = int(sum(doubled_ranks))
    dist = np.zeros(total + 1, dtype=object)
    dist[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: len(dist) - r]
        dist = dist + shifted
    return dist


def wilcoxon_signed_rank(x, y=None, alternative: str = "two_sided") -> WilcoxonResult:
    """Paired signed-rank test of ``x - y``.

    ``greater`` tests whether the differences tend to be positive.  Zero
    differences are dropped, ties get average ranks.  Up to 20 nonzero
    differences the null distribution is enumerated exactly; above that a
    normal approximation with tie and continuity correction is used.
    """
    if alternative not in ALTERNATIVES:
        raise AnalysisError(f"alternative must be one of {ALTERNATIVES}")
    x = np.asarray(x, dtype=float)
    if y is not None and np.shape(x) != np.shape(y):
        raise AnalysisError("paired samples differ in length")
    d = x if y is None else x - np.asarray(y, dtype=float)
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise AnalysisError("all differences are zero")
    if n < 5:
        raise AnalysisError(f"need at least 5 nonzero differences, got {n}")
    ranks = _ranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        dist = signed_rank_null(doubled)
        w2 = int(round(2 * w))
        total = 2**n
        p_ge = float(sum(dist[w2:])) / total
        p_le = float(sum(dist[: w2 + 1])) / total
        exact = True
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
        sd = math.sqrt(var)
        p_ge = float(norm.sf((w - mean - 0.5) / sd))
        p_le = float(norm.cdf((w - mean + 0.5) / sd))
        exact = False
    if alternative == "greater":
        p = p_ge
    elif alternative == "less":
        p = p_le
    else:
        p = min(1.0, 2.0 * min(p_ge, p_le))
    return WilcoxonResult(w, p, n, exact, alternative)


# ---------------------------------------------------------------------------
# trajectory comparison


def dyadic_steps(n_frames: int, max_power: int = 16) -> np.ndarray:
    """Steps 1, 2, 4, ... 2**max_power that fall inside ``n_frames`` frames."""
    steps = [2**p for p in range(max_power + 1) if 2**p < n_frames]
    return np.array(steps, dtype=int)


@dataclass
class EmdReport:
    steps: np.ndarray
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if len(self.values) else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.values)) if len(self.values) else 0.0

    def rows(self):
        return [{"step": int(s), "emd": float(v)} for s, v in zip(self.steps, self.values)]


@dataclass
class Comparison:
    emd: EmdReport
    ground_profile: FlowProfile
    pred_profile: FlowProfile
    ground_entropy: Optional[EntropyCurve] = None
    pred_entropy: Optional[EntropyCurve] = None


def compare_trajectories(
    ground: Trajectory,
    pred: Trajectory,
    offset: Optional[int] = None,
    grid: Optional[GridSpec] = None,
    split: Optional[tuple] = None,
    max_power: int = 16,
) -> Comparison:
    """EMD at dyadic steps after the first predicted frame, plus profiles.

    ``pred`` frame ``i`` is compared with ``ground`` frame ``offset + i``;
    ``offset`` defaults to the rollout start recorded in ``pred.meta``.
    Entropy curves are added when both ``grid`` and ``split`` are given.
    """
    if offset is None:
        offset = int(pred.meta.get("rollout_start", 0))
    if ground.n_particles != pred.n_particles:
        raise AnalysisError(f"particle counts differ: {ground.n_particles} vs {pred.n_particles}")
    if not math.isclose(ground.dt, pred.dt, rel_tol=1e-9):
        raise AnalysisError(f"frame spacings differ: {ground.dt} vs {pred.dt}")
    if offset < 0 or offset + len(pred) > len(ground):
        raise AnalysisError("predicted frames extend beyond the ground-truth trajectory")
    g = ground.subsampled(1, offset, offset + len(pred))
    steps = dyadic_steps(len(pred), max_power)
    values = np.array([emd(g.positions[s], pred.positions[s]) for s in steps])
    comp = Comparison(EmdReport(steps, values), flow_profile(g), flow_profile(pred))
    if grid is not None and split is not None:
        comp.ground_entropy = mixing_entropy(g, grid, 0, split)
        comp.pred_entropy = mixing_entropy(pred, grid, 0, split)
    return comp


@dataclass
class VersionRow:
    version: str
    split: str
    n: int
    mean: float
    std: float
    statistic: float = float("nan")
    pvalue: float = float("nan")

    def row(self) -> dict:
        return {
            "version": self.version,
            "split": self.split,
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "statistic": self.statistic,
            "p": self.pvalue,
        }


def version_table(
    emds: Mapping[str, Mapping[str, Sequence[Sequence[float]]]],
    reference: str = "V3",
) -> list[VersionRow]:
    """Mean/std of EMD per model version and split, with paired p-values.

    ``emds[version][split]`` is a list of per-trajectory EMD sequences (one
    value per evaluation step).  Sequences are concatenated across
    trajectories; for every version other than ``reference`` the one-sided
    test asks whether the reference has smaller EMD than that version.
    """
    if reference not in emds:
        raise AnalysisError(f"reference version {reference!r} missing")
    rows = []
    for version in sorted(emds):
        for split in sorted(emds[version]):
            vals = np.concatenate([np.asarray(v, dtype=float) for v in emds[version][split]])
            row = VersionRow(version, split, len(vals), float(vals.mean()), float(vals.std()))
            if version != reference:
                ref = np.concatenate([np.asarray(v, dtype=float) for v in emds[reference][split]])
                res = wilcoxon_signed_rank(ref, vals, "less")
                row.statistic, row.pvalue = res.statistic, res.pvalue
            rows.append(row)
    return rows
