"""Lateral ensemble combination and fitting of the WISE scaling factors."""

from typing import Tuple

import numpy as np
from loguru import logger

from services.errors import WiseError
from services.numcore import PROB_FLOOR, cross_entropy_from_probs, stable_softmax
from services.wise.base import WiseWeights

MAX_FIT_ITERATIONS = 5000
GRAD_TOLERANCE = 1e-8
ARMIJO_C = 1e-4
MIN_STEP = 1e-30


def combine_batch(probs: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Weighted sum of ``probs`` [L, n, k] over L, renormalized per sample."""
    beta = np.asarray(beta, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[0] != beta.shape[0]:
        raise WiseError(f"need [L, n, k] probabilities for {beta.shape[0]} weights, got {probs.shape}")
    if np.any(beta < 0) or not np.any(beta > 0):
        raise WiseError(f"ensemble weights must be >= 0 and not all zero, got {beta.tolist()}")
    combined = np.einsum("l,lnk->nk", beta, probs)
    return combined / combined.sum(axis=1, keepdims=True)


def ensemble_combine(ic_probs: np.ndarray, beta: np.ndarray) -> Tuple[np.ndarray, float]:
    """Combine L softmaxed rows [L, k] with weights beta; returns (distribution, confidence)."""
    ic_probs = np.asarray(ic_probs, dtype=np.float64)
    if ic_probs.ndim != 2:
        raise WiseError(f"expected [L, k] probabilities, got {ic_probs.shape}")
    dist = combine_batch(ic_probs[:, None, :], beta)[0]
    return dist, float(dist.max())


def _true_class_matrix(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # [n, L]: probability each exit assigns to the true class
    return probs[:, np.arange(probs.shape[1]), labels].T


def _mixture_loss(beta: np.ndarray, p_true: np.ndarray) -> Tuple[float, np.ndarray]:
    q = np.maximum(p_true @ beta, PROB_FLOOR)
    loss = float(-np.log(q).mean())
    grad_beta = -(p_true / q[:, None]).mean(axis=0)
    return loss, grad_beta


def wise_loss(probs: np.ndarray, labels: np.ndarray, beta: np.ndarray) -> float:
    """Mean CE of the renormalized ensemble of ``probs`` [L, n, k]."""
    return cross_entropy_from_probs(combine_batch(probs, beta), labels).value


def _fit_position(p_true: np.ndarray) -> np.ndarray:
    L = p_true.shape[1]
    theta = np.zeros(L)
    beta = stable_softmax(theta)
    loss, grad_beta = _mixture_loss(beta, p_true)
    step = 1.0
    for iteration in range(MAX_FIT_ITERATIONS):
        if not np.isfinite(loss):
            raise WiseError(f"non-finite WISE loss at position {L}, iteration {iteration}")
        grad = beta * (grad_beta - beta @ grad_beta)
        norm2 = float(grad @ grad)
        if np.sqrt(norm2) < GRAD_TOLERANCE:
            break
        step = min(step * 2.0, 1e8)
        while step > MIN_STEP:
            candidate = theta - step * grad
            cand_beta = stable_softmax(candidate)
            cand_loss, cand_grad = _mixture_loss(cand_beta, p_true)
            if cand_loss <= loss - ARMIJO_C * step * norm2:
                break
            step *= 0.5
        else:
            break
        theta, beta, loss, grad_beta = candidate, cand_beta, cand_loss, cand_grad
    return beta


def fit_wise(probs: np.ndarray, labels: np.ndarray) -> WiseWeights:
    """Fit simplex weights for every chain position.

    Args:
        probs: [E, n, k] softmax outputs of every exit, in chain order
        labels: true classes of the n samples

    Returns:
        WiseWeights with one row per chain position

    Raises:
        WiseError: If probabilities are malformed or the loss is non-finite
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 3 or probs.shape[1] != labels.shape[0] or probs.shape[1] == 0:
        raise WiseError(f"need [E, n, k] probabilities for {labels.shape[0]} labels, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise WiseError("exit probabilities contain non-finite values")

    p_true = _true_class_matrix(probs, labels)
    rows = []
    for L in range(1, probs.shape[0] + 1):
        if L == 1:
            rows.append((1.0,))
            continue
        beta = _fit_position(p_true[:, :L])
        rows.append(tuple(float(b) for b in beta))
        fitted, _ = _mixture_loss(beta, p_true[:, :L])
        uniform, _ = _mixture_loss(np.full(L, 1.0 / L), p_true[:, :L])
        logger.debug(f"WISE position {L}: loss {fitted:.5f} (uniform {uniform:.5f})")
    return WiseWeights(tuple(rows))
