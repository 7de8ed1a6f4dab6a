"""Adam with classic L2 weight decay, and the step learning-rate schedule."""

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence

import numpy as np

from services.numcore.tensor import Tensor


@dataclass
class AdamState:
    lr: float
    weight_decay: float = 0.0
    eps: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    step_count: int = 0
    moment_steps: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset_moments(self) -> None:
        self.first_moment.clear()
        self.second_moment.clear()
        self.moment_steps = 0


def _key(param: Tensor) -> str:
    return param.name or f"#{id(param)}"


def adam_step(state: AdamState, params: Iterable[Tensor]) -> None:
    """Apply one Adam update in place and zero the gradients.

    Weight decay is added to the gradient (L2), not decoupled. Frozen
    parameters and parameters without a gradient are skipped.
    """
    state.step_count += 1
    state.moment_steps += 1
    t = state.moment_steps
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        key = _key(p)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[key] = m
        state.second_moment[key] = v
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.grad = np.zeros_like(p.data)


def lr_schedule(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """base_lr * gamma ** (number of milestones <= epoch)."""
    return base_lr * gamma ** bisect_right(list(milestones), epoch)
