"""KL-divergence training loss against soft labels, plus accuracy."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, log_softmax, xlogx

ROW_SUM_TOL = 1e-9


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], class_count))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def check_distribution(probs: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    """Raise ValueError unless every row is a probability vector."""
    probs = np.asarray(probs)
    if probs.ndim != 2:
        raise ValueError(f"label distribution must be 2-D, got shape {probs.shape}")
    if np.any(probs < 0):
        raise ValueError("label distribution has negative entries")
    sums = probs.sum(axis=1)
    bad = np.abs(sums - 1.0) > tol
    if np.any(bad):
        row = int(np.argmax(bad))
        raise ValueError(f"label distribution row {row} sums to {sums[row]!r}, expected 1")


def as_distribution(y, class_count: int) -> np.ndarray:
    """Hard class indices become one-hot rows; 2-D inputs are validated."""
    y = np.asarray(y)
    if y.ndim == 1:
        return one_hot(y, class_count)
    check_distribution(y)
    return y.astype(float, copy=False)


def kl_loss(logits: Tensor, target) -> Tensor:
    """Batch mean of KL(target || softmax(logits)).

    ``target`` may be an array or a Tensor on the tape (e.g. labels mixed with
    a differentiable ratio); gradients then flow into it as well.
    """
    logits = as_tensor(logits)
    target = as_tensor(target)
    if logits.ndim != 2 or target.shape != logits.shape:
        raise ValueError(f"kl_loss: logits {logits.shape} and target {target.shape} must match")
    check_distribution(target.values)
    n = logits.shape[0]
    per_row = (xlogx(target) - target * log_softmax(logits)).sum()
    return per_row * (1.0 / n)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of hard labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n = logits.shape[0]
    mask = one_hot(labels, logits.shape[1])
    return -(log_softmax(logits) * mask).sum() * (1.0 / n)


def kl_per_example(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row KL divergence, computed off the tape."""
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    pos = target > 0
    ent = np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0)
    return (ent - target * logp).sum(axis=1)


def predict(logits) -> np.ndarray:
    # np.argmax resolves ties to the lowest class index
    values = logits.values if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(values, axis=1)


def accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(logits) == labels))
