"""Reflection toy problem: learn ``Ref_n(v)`` for rays hitting four walls.

Each representation encodes the wall normal differently; the network sees
the normal features plus the incoming velocity.  Evaluation on the same rays
with inverted normals probes whether the encoding generalizes to the
opposite orientation of the same wall.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import canonicalize_normal
from .nn import MlpParams, mlp_forward, mlp_loss_grad
from .optim import Adam

REPRESENTATIONS = ("R1", "R2", "R3", "R4")

# top, bottom, left, right; outward-pointing
WALL_NORMALS = np.array(
    [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
)


def normal_features(n, rep: str) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    if rep == "R1":
        return n.copy()
    if rep == "R2":
        return np.concatenate([n, -n])
    pair = canonicalize_normal(n)
    if rep == "R3":
        return pair.first.copy()
    if rep == "R4":
        return np.concatenate([pair.first, pair.second])
    raise ValueError(f"unknown representation {rep!r}; expected one of {REPRESENTATIONS}")


def input_width(rep: str) -> int:
    return len(normal_features(WALL_NORMALS[0], rep)) + 3


def reflection_rays(n_per_wall: int, rng: np.random.Generator):
    """Unit-box rays heading into each wall: (velocities, normals, targets)."""
    vs, ns = [], []
    for n in WALL_NORMALS:
        v = rng.uniform(-1.0, 1.0, size=(n_per_wall, 3))
        along = v @ n
        v = v - np.outer(along, n) + np.outer(np.abs(along), n)  # force v . n >= 0
        vs.append(v)
        ns.append(np.tile(n, (n_per_wall, 1)))
    v, n = np.concatenate(vs), np.concatenate(ns)
    nn = np.sum(n * n, axis=1)
    target = v - 2.0 * (np.sum(v * n, axis=1) / nn)[:, None] * n
    return v, n, target


def encode(v, n, rep: str) -> np.ndarray:
    return np.array([np.concatenate([normal_features(ni, rep), vi]) for vi, ni in zip(v, n)])


@dataclass
class ToyReport:
    representation: str
    seed: int
    train_mse: float
    same_mse: float
    inverted_mse: float
    epochs: int

    @property
    def ratio(self) -> float:
        return self.inverted_mse / self.same_mse if self.same_mse > 0 else float("inf")

    def row(self) -> dict:
        return {
            "representation": self.representation,
            "seed": self.seed,
            "train_mse": self.train_mse,
            "same_mse": self.same_mse,
            "inverted_mse": self.inverted_mse,
            "ratio": self.ratio,
        }


def toy_reflection(
    rep: str,
    seed: int = 0,
    n_train: int = 512,
    n_eval: int = 512,
    epochs: int = 3000,
    hidden: tuple = (64, 64),
    lr: float = 3e-3,
) -> tuple[MlpParams, ToyReport]:
    """Train on outward normals (full batch Adam); evaluate on n and -n."""
    if rep not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {rep!r}; expected one of {REPRESENTATIONS}")
    rng = np.random.default_rng(seed)
    v, n, y = reflection_rays(n_train // len(WALL_NORMALS), rng)
    x = encode(v, n, rep)
    params = MlpParams.init([x.shape[1], *hidden, 3], seed=seed)
    opt = Adam(lr=lr)
    loss = float("nan")
    for epoch in range(epochs):
        step_lr = lr * 0.5 ** min(3 * epoch // max(epochs, 1), 2)
        loss, grads = mlp_loss_grad(params, x, y)
        opt.step(params.tensors, grads, step_lr)

    ve, ne, ye = reflection_rays(n_eval // len(WALL_NORMALS), rng)
    same = float(np.mean((mlp_forward(params, encode(ve, ne, rep)) - ye) ** 2))
    # the reflection is unchanged by flipping the normal, so the targets are too
    inverted = float(np.mean((mlp_forward(params, encode(ve, -ne, rep)) - ye) ** 2))
    train_mse = float(np.mean((mlp_forward(params, x) - y) ** 2))
    return params, ToyReport(rep, seed, train_mse, same, inverted, epochs)
