"""Stateless numerical helpers: softmax, cross-entropy, sigmoid, clamped logs."""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError, ValidationError

PROB_FLOOR = 1e-12


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValidationError(f"label outside range [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(probs: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy ``-y^T log p`` over rows and its gradient wrt ``probs``.

    ``probs`` are clamped to ``PROB_FLOOR`` before the log. ``target`` is a
    one-hot matrix of the same shape.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if probs.shape != target.shape:
        raise ValidationError(f"probability shape {probs.shape} != label shape {target.shape}")
    n = probs.shape[0]
    clamped = np.maximum(probs, PROB_FLOOR)
    loss = float(-np.sum(target * np.log(clamped)) / n)
    grad = -target / clamped / n
    grad[probs < PROB_FLOOR] = 0.0
    return loss, grad


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Fused softmax + mean cross-entropy on integer labels.

    Returns ``(loss, probs, dlogits)`` where ``dlogits = (p - y) / n``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    y = one_hot(labels, k)
    probs = softmax(logits, axis=1)
    logp = log_softmax(logits, axis=1)
    loss = float(-np.sum(y * np.maximum(logp, np.log(PROB_FLOOR))) / n)
    return loss, probs, (probs - y) / n


def clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))
