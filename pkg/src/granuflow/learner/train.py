from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import GnnParams, NonFiniteLoss, as_batch, gnn_forward, loss_grad
from .optim import Adam, clip_by_global_norm

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_halvings: int = 2
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at(self, epoch: int) -> float:
        """Step size halved ``lr_halvings`` times at evenly spaced epochs."""
        if self.epochs == 0:
            return self.lr
        phase = min(epoch * (self.lr_halvings + 1) // self.epochs, self.lr_halvings)
        return self.lr * 0.5**phase


def train(
    params: GnnParams,
    dataset: Sequence,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> tuple[GnnParams, list[float]]:
    """Minibatch Adam on the normalized-acceleration MSE.

    Returns trained parameters (the input is left untouched) and the mean
    training loss of each epoch.
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        lr = cfg.lr_at(epoch)
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = as_batch([dataset[i] for i in order[start : start + cfg.batch_size]])
            try:
                loss, grads = loss_grad(params, batch)
            except NonFiniteLoss:
                raise NonFiniteLoss(f"training diverged in epoch {epoch}") from None
            grads = clip_by_global_norm(grads, cfg.clip_norm)
            opt.step(params.tensors, grads, lr)
            n = len(batch.real_index)
            total += loss * n
            count += n
        curve.append(total / count)
        log.info("epoch %d loss %.6g lr %.3g", epoch, curve[-1], lr)
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return params, curve


def evaluate_mse(params: GnnParams, dataset: Sequence, batch_size: int = 8) -> float:
    """One-step MSE on normalized targets over a dataset."""
    se, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        batch = as_batch(list(dataset[start : start + batch_size]))
        pred = gnn_forward(params, batch)
        se += float(np.sum((pred - batch.targets) ** 2))
        count += pred.size
    return se / count
