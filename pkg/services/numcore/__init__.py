"""Minimal reverse-mode differentiable compute kernel."""

from services.numcore.losses import (
    PROB_FLOOR,
    ProbCrossEntropy,
    cross_entropy,
    cross_entropy_from_probs,
    kd_loss,
    softmax,
    stable_log_softmax,
    stable_softmax,
)
from services.numcore.optim import AdamState, adam_step, lr_schedule
from services.numcore.tensor import (
    ComputeGraph,
    Tensor,
    add,
    as_tensor,
    backward,
    dense_forward,
    matmul,
    mul,
    relu,
    tensor_mean,
    tensor_sum,
)

__all__ = [
    "PROB_FLOOR",
    "AdamState",
    "ComputeGraph",
    "ProbCrossEntropy",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "cross_entropy",
    "cross_entropy_from_probs",
    "dense_forward",
    "kd_loss",
    "lr_schedule",
    "matmul",
    "mul",
    "relu",
    "softmax",
    "stable_log_softmax",
    "stable_softmax",
    "tensor_mean",
    "tensor_sum",
]
