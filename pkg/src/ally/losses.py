"""Per-sample losses with gradients w.r.t. model outputs.

Per-sample values are the primitive because the constrained training
objective bounds every sample individually; batch means are taken by the
callers. Both supported losses are nonnegative and convex in the outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericError, ShapeError

LOSS_KINDS = ("cross_entropy", "mse")


@dataclass
class PerSampleLoss:
    """values[i] is sample i's loss; grads[i] is d values[i] / d outputs[i]."""

    values: np.ndarray
    grads: np.ndarray


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> PerSampleLoss:
    """Softmax cross-entropy from raw logits, stabilized with log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D (batch, classes)")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("labels must be a vector with one entry per row of logits")
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("cross-entropy requires integer labels")
    n, n_classes = logits.shape
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    values = log_z - shifted[rows, labels]
    probs = np.exp(shifted - log_z[:, None])
    grads = probs
    grads[rows, labels] -= 1.0
    return PerSampleLoss(values, grads)


def mse(preds: np.ndarray, targets: np.ndarray) -> PerSampleLoss:
    """Mean over output dimensions of the squared error, per sample."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ShapeError(f"shape mismatch: preds {preds.shape} vs targets {targets.shape}")
    if preds.ndim != 2:
        raise ShapeError("preds must be 2-D (batch, outputs)")
    diff = preds - targets
    dim = preds.shape[1]
    values = (diff**2).mean(axis=1)
    grads = 2.0 * diff / dim
    return PerSampleLoss(values, grads)


def dual_head_fit_loss(
    predicted: np.ndarray, lambda_targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean squared error between predicted and optimal dual variables.

    Returns the scalar loss and its gradient w.r.t. the predictions.
    Targets must be nonnegative; duals are nonnegative by construction.
    """
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    lambda_targets = np.asarray(lambda_targets, dtype=np.float64).reshape(-1)
    if predicted.shape != lambda_targets.shape:
        raise ShapeError("predicted and target vectors differ in length")
    if predicted.size == 0:
        raise ValueError("empty input")
    if (lambda_targets < 0).any():
        raise ValueError("dual targets must be nonnegative")
    diff = predicted - lambda_targets
    value = float((diff**2).mean())
    grads = 2.0 * diff / predicted.size
    return value, grads


def per_sample_loss(kind: str, outputs: np.ndarray, labels: np.ndarray) -> PerSampleLoss:
    if kind == "cross_entropy":
        return cross_entropy(outputs, labels)
    if kind == "mse":
        targets = np.asarray(labels, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        return mse(outputs, targets)
    raise ValueError(f"unknown loss kind {kind!r}")


def infer_loss_kind(labels: np.ndarray) -> str:
    """Integer labels mean classification; real labels mean regression."""
    labels = np.asarray(labels)
    return "cross_entropy" if np.issubdtype(labels.dtype, np.integer) else "mse"
