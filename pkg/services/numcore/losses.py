"""Softmax, cross-entropy and distillation losses."""

from dataclasses import dataclass
from typing import Union

import numpy as np
from loguru import logger

from services.errors import GraphError, ShapeError
from services.numcore.tensor import Tensor, as_tensor

PROB_FLOOR = 1e-12


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def stable_log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_labels(labels: np.ndarray, batch: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if batch and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def softmax(logits: Union[Tensor, np.ndarray]) -> Tensor:
    """Row-wise softmax of [batch, k] logits, stabilized by the row max."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2 or logits.shape[1] < 1:
        raise ShapeError(f"softmax: expected [batch, k>=1], got {logits.shape}")
    s = stable_softmax(logits.data, axis=1)

    def grad_fn(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (logits,), grad_fn, "softmax")


def cross_entropy(logits: Union[Tensor, np.ndarray], labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, k] logits, got {logits.shape}")
    batch, k = logits.shape
    labels = _check_labels(labels, batch, k)
    logp = stable_log_softmax(logits.data, axis=1)
    rows = np.arange(batch)
    value = -logp[rows, labels].mean()

    def grad_fn(g: np.ndarray):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / batch),)

    return Tensor._from_op(np.array(value), (logits,), grad_fn, "cross_entropy")


@dataclass(frozen=True)
class ProbCrossEntropy:
    value: float
    clamped: int


def cross_entropy_from_probs(probs: np.ndarray, labels: np.ndarray) -> ProbCrossEntropy:
    """Cross-entropy on already-normalized probabilities.

    True-class probabilities at or below zero are clamped to 1e-12 and
    counted; a non-zero count usually means degenerate ensemble weights.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy_from_probs: expected [batch, k], got {probs.shape}")
    batch, k = probs.shape
    labels = _check_labels(labels, batch, k)
    p_true = probs[np.arange(batch), labels]
    clamped = int(np.count_nonzero(p_true <= PROB_FLOOR))
    if clamped:
        logger.warning(f"cross_entropy_from_probs clamped {clamped}/{batch} true-class probabilities")
    value = float(-np.log(np.maximum(p_true, PROB_FLOOR)).mean()) if batch else 0.0
    return ProbCrossEntropy(value=value, clamped=clamped)


def kd_loss(
    student_logits: Union[Tensor, np.ndarray],
    teacher_logits: Union[Tensor, np.ndarray],
    temperature: float = 1.0,
) -> Tensor:
    """T^2 * mean KL(softmax(teacher/T) || softmax(student/T)).

    The teacher is a constant: no gradient flows back into it.
    """
    if temperature <= 0:
        raise GraphError(f"kd_loss: temperature must be > 0, got {temperature}")
    student = as_tensor(student_logits)
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if student.shape != teacher.shape or student.data.ndim != 2:
        raise ShapeError(f"kd_loss: student {student.shape} and teacher {teacher.shape} must match as [batch, k]")
    batch = student.shape[0]
    t2 = temperature * temperature
    log_pt = stable_log_softmax(teacher / temperature, axis=1)
    log_ps = stable_log_softmax(student.data / temperature, axis=1)
    pt = np.exp(log_pt)
    kl = (pt * (log_pt - log_ps)).sum(axis=1).mean()
    value = max(float(t2 * kl), 0.0)

    def grad_fn(g: np.ndarray):
        ps = np.exp(log_ps)
        return ((ps - pt) * (float(g) * temperature / batch),)

    return Tensor._from_op(np.array(value), (student,), grad_fn, "kd_loss")
