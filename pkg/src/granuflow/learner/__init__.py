"""Learned simulator: numpy message-passing network, training and rollout."""
from .nn import (
    Batch,
    GnnParams,
    MlpParams,
    NonFiniteLoss,
    as_batch,
    gnn_forward,
    loss_grad,
    mlp_forward,
    mlp_loss_grad,
)
from .optim import Adam, clip_by_global_norm, global_norm
from .rollout import RolloutError, rollout
from .toy import REPRESENTATIONS, ToyReport, toy_reflection
from .train import TrainConfig, evaluate_mse, train

__all__ = [
    "Adam",
    "Batch",
    "GnnParams",
    "MlpParams",
    "NonFiniteLoss",
    "REPRESENTATIONS",
    "RolloutError",
    "ToyReport",
    "TrainConfig",
    "as_batch",
    "clip_by_global_norm",
    "evaluate_mse",
    "global_norm",
    "gnn_forward",
    "loss_grad",
    "mlp_forward",
    "mlp_loss_grad",
    "rollout",
    "toy_reflection",
    "train",
]
