"""Dense layers and an encode-process-decode message-passing network in numpy.

Parameters live in flat ``{name: array}`` dicts so optimizers, gradient
checks and checkpoints can treat every tensor the same way.  Gradients are
computed by hand-written reverse mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Tensors = dict[str, np.ndarray]
RESIDUAL_INIT_SCALE = 0.1


def init_mlp(
    rng: np.random.Generator,
    sizes: Sequence[int],
    prefix: str,
    out: Optional[Tensors] = None,
    out_scale: float = 1.0,
) -> Tensors:
    """He-normal weights, zero biases; ``out_scale`` shrinks the last layer."""
    out = {} if out is None else out
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        std = np.sqrt(2.0 / fan_in) * (out_scale if i == last else 1.0)
        out[f"{prefix}/{i}/W"] = rng.normal(0.0, std, size=(fan_in, fan_out))
        out[f"{prefix}/{i}/b"] = np.zeros(fan_out)
    return out


def n_layers(tensors: Tensors, prefix: str) -> int:
    k = 0
    while f"{prefix}/{k}/W" in tensors:
        k += 1
    return k


def dense(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``x @ W`` with a per-row summation order independent of the row count.

    BLAS kernels handle leftover rows with different code paths, so a node's
    output could depend on its position in the batch by an ulp; the plain
    einsum loop keeps forward passes exactly permutation-equivariant.
    """
    return np.einsum("ij,jk->ik", x, W, optimize=False)


def mlp_apply(tensors: Tensors, prefix: str, x: np.ndarray):
    """ReLU on hidden layers, identity on the last.  Returns (y, cache)."""
    depth = n_layers(tensors, prefix)
    cache = []
    h = x
    for i in range(depth):
        W, b = tensors[f"{prefix}/{i}/W"], tensors[f"{prefix}/{i}/b"]
        if h.shape[-1] != W.shape[0]:
            raise ValueError(f"{prefix}: input width {h.shape[-1]} does not match layer width {W.shape[0]}")
        z = dense(h, W) + b
        if i < depth - 1:
            mask = z > 0
            cache.append((h, mask))
            h = np.where(mask, z, 0.0)
        else:
            cache.append((h, None))
            h = z
    return h, cache


def mlp_backward(tensors: Tensors, prefix: str, cache, dy: np.ndarray, grads: Tensors) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return d(input)."""
    g = dy
    for i in range(len(cache) - 1, -1, -1):
        h, mask = cache[i]
        if mask is not None:
            g = np.where(mask, g, 0.0)
        W = tensors[f"{prefix}/{i}/W"]
        gW, gb = h.T @ g, g.sum(axis=0)
        kW, kb = f"{prefix}/{i}/W", f"{prefix}/{i}/b"
        grads[kW] = grads[kW] + gW if kW in grads else gW
        grads[kb] = grads[kb] + gb if kb in grads else gb
        g = g @ W.T
    return g


# ---------------------------------------------------------------------------
# plain MLP


@dataclass
class MlpParams:
    tensors: Tensors

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0) -> "MlpParams":
        return cls(init_mlp(np.random.default_rng(seed), sizes, "mlp"))

    @property
    def sizes(self) -> list[int]:
        depth = n_layers(self.tensors, "mlp")
        ws = [self.tensors[f"mlp/{i}/W"] for i in range(depth)]
        return [ws[0].shape[0]] + [w.shape[1] for w in ws]

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.tensors.items()})


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    y, _ = mlp_apply(params.tensors, "mlp", np.atleast_2d(x))
    return y[0] if single else y


def mlp_loss_grad(params: MlpParams, x, y) -> tuple[float, Tensors]:
    pred, cache = mlp_apply(params.tensors, "mlp", x)
    diff = pred - y
    loss = float(np.mean(diff**2))
    grads: Tensors = {}
    mlp_backward(params.tensors, "mlp", cache, 2.0 * diff / diff.size, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# graph network


@dataclass
class GnnParams:
    tensors: Tensors
    node_dim: int
    edge_dim: int
    latent: int = 64
    n_blocks: int = 5
    hidden_layers: int = 2
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(
        cls,
        node_dim: int,
        edge_dim: int = 4,
        latent: int = 64,
        n_blocks: int = 5,
        hidden_layers: int = 2,
        seed: int = 0,
    ) -> "GnnParams":
        rng = np.random.default_rng(seed)
        hid = [latent] * hidden_layers
        t: Tensors = {}
        init_mlp(rng, [node_dim, *hid, latent], "node_enc", t)
        init_mlp(rng, [edge_dim, *hid, latent], "edge_enc", t)
        # residual branches start small: summed messages would otherwise grow
        # the latents by roughly the node degree in every block
        for m in range(n_blocks):
            init_mlp(rng, [3 * latent, *hid, latent], f"block{m}/edge", t, RESIDUAL_INIT_SCALE)
            init_mlp(rng, [2 * latent, *hid, latent], f"block{m}/node", t, RESIDUAL_INIT_SCALE)
        init_mlp(rng, [latent, *hid, 3], "decoder", t)
        return cls(t, node_dim, edge_dim, latent, n_blocks, hidden_layers)

    def copy(self) -> "GnnParams":
        return GnnParams(
            {k: v.copy() for k, v in self.tensors.items()},
            self.node_dim, self.edge_dim, self.latent, self.n_blocks, self.hidden_layers, dict(self.meta),
        )

    def config(self) -> dict:
        return {
            "node_dim": self.node_dim,
            "edge_dim": self.edge_dim,
            "latent": self.latent,
            "n_blocks": self.n_blocks,
            "hidden_layers": self.hidden_layers,
        }


@dataclass
class Batch:
    """Disjoint union of graph samples; edges stay sorted by receiver."""

    node_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray
    real_index: np.ndarray
    targets: Optional[np.ndarray] = None


def as_batch(samples) -> Batch:
    if not isinstance(samples, (list, tuple)):
        samples = [samples]
    if not samples:
        raise ValueError("empty batch")
    feats, edges, efeats, real, tgts = [], [], [], [], []
    offset = 0
    for s in samples:
        feats.append(s.node_features)
        edges.append(s.edges + offset)
        efeats.append(s.edge_features)
        real.append(offset + np.arange(s.n_real))
        if s.targets is not None:
            tgts.append(s.targets)
        offset += s.n_nodes
    return Batch(
        np.concatenate(feats),
        np.concatenate(edges).reshape(-1, 2),
        np.concatenate(efeats),
        np.concatenate(real),
        np.concatenate(tgts) if len(tgts) == len(samples) else None,
    )


def _aggregate(messages, receivers, n):
    """Sum incoming messages per node, in stored edge order."""
    out = np.zeros((n, messages.shape[1]))
    if not len(receivers):
        return out
    if np.all(receivers[1:] >= receivers[:-1]):
        counts = np.bincount(receivers, minlength=n)
        nonempty = counts > 0
        starts = (np.cumsum(counts) - counts)[nonempty]
        out[nonempty] = np.add.reduceat(messages, starts, axis=0)
    else:
        np.add.at(out, receivers, messages)
    return out


def gnn_apply(params: GnnParams, batch: Batch):
    T = params.tensors
    x, ef = batch.node_features, batch.edge_features
    if x.shape[1] != params.node_dim or (len(ef) and ef.shape[1] != params.edge_dim):
        raise ValueError(
            f"feature widths ({x.shape[1]}, {ef.shape[1] if len(ef) else params.edge_dim}) "
            f"do not match the network ({params.node_dim}, {params.edge_dim})"
        )
    src, dst = batch.edges[:, 0], batch.edges[:, 1]
    n = len(x)
    h, c_node = mlp_apply(T, "node_enc", x)
    e, c_edge = mlp_apply(T, "edge_enc", ef.reshape(-1, params.edge_dim))
    blocks = []
    for m in range(params.n_blocks):
        de, c_e = mlp_apply(T, f"block{m}/edge", np.concatenate([e, h[src], h[dst]], axis=1))
        e = e + de
        agg = _aggregate(e, dst, n)
        dh, c_n = mlp_apply(T, f"block{m}/node", np.concatenate([h, agg], axis=1))
        h = h + dh
        blocks.append((c_e, c_n))
    out, c_dec = mlp_apply(T, "decoder", h[batch.real_index])
    return out, (c_node, c_edge, blocks, c_dec)


def gnn_forward(params: GnnParams, sample) -> np.ndarray:
    """Normalized accelerations for the real particles of a sample or batch."""
    batch = sample if isinstance(sample, Batch) else as_batch(sample)
    out, _ = gnn_apply(params, batch)
    return out


def gnn_backward(params: GnnParams, batch: Batch, cache, d_out) -> Tensors:
    T = params.tensors
    L = params.latent
    c_node, c_edge, blocks, c_dec = cache
    src, dst = batch.edges[:, 0], batch.edges[:, 1]
    n = len(batch.node_features)
    grads: Tensors = {}
    dh = np.zeros((n, L))
    dh[batch.real_index] = mlp_backward(T, "decoder", c_dec, d_out, grads)
    de = np.zeros((len(src), L))
    for m in range(params.n_blocks - 1, -1, -1):
        c_e, c_n = blocks[m]
        dxn = mlp_backward(T, f"block{m}/node", c_n, dh, grads)
        dh = dh + dxn[:, :L]
        de = de + dxn[:, L:][dst]
        dxe = mlp_backward(T, f"block{m}/edge", c_e, de, grads)
        de = de + dxe[:, :L]
        np.add.at(dh, src, dxe[:, L : 2 * L])
        np.add.at(dh, dst, dxe[:, 2 * L :])
    mlp_backward(T, "edge_enc", c_edge, de, grads)
    mlp_backward(T, "node_enc", c_node, dh, grads)
    for k, v in T.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return grads


class NonFiniteLoss(FloatingPointError):
    pass


def loss_grad(params: GnnParams, samples) -> tuple[float, Tensors]:
    """Mean squared error over all real-node target components, and its gradient."""
    batch = samples if isinstance(samples, Batch) else as_batch(samples)
    if batch.targets is None:
        raise ValueError("batch has no targets")
    pred, cache = gnn_apply(params, batch)
    diff = pred - batch.targets
    loss = float(np.mean(diff**2)) if diff.size else 0.0
    if not np.isfinite(loss):
        raise NonFiniteLoss("loss is not finite")
    d_out = 2.0 * diff / max(diff.size, 1)
    return loss, gnn_backward(params, batch, cache, d_out)
