"""Dual regression head: predict a sample's dual variable from its embedding.

The head is a small relu MLP with a softplus output, trained by full-batch
gradient descent on the mean squared error against the dual variables of
the labeled samples. The backbone embeddings are inputs only and are never
modified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .losses import dual_head_fit_loss
from .numerics import DenseLayer, ShapeError


@dataclass
class DualHeadConfig:
    hidden_dims: tuple[int, ...] = (64, 32, 16)
    lr: float = 0.01
    epochs: int = 400
    rng_seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden dims must be >= 1")
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("lr must be positive and epochs >= 1")


def init_head(embedding_dim: int, config: DualHeadConfig) -> list[DenseLayer]:
    rng = np.random.default_rng(config.rng_seed)
    dims = (embedding_dim, *config.hidden_dims, 1)
    return numerics._init_stack(rng, dims, "relu")


def _head_forward(head: list[DenseLayer], embeddings: np.ndarray):
    out, cache = numerics.stack_forward(head, embeddings, "relu", "softplus")
    return out[:, 0], cache


def predict_duals(head: list[DenseLayer], embeddings: np.ndarray) -> np.ndarray:
    """One nonnegative score per embedding row."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[1] != head[0].in_dim:
        raise ShapeError(
            f"expected embeddings of shape (n, {head[0].in_dim}), got {embeddings.shape}"
        )
    preds, _ = _head_forward(head, embeddings)
    return preds


def head_loss(head: list[DenseLayer], embeddings: np.ndarray, lambdas: np.ndarray) -> float:
    value, _ = dual_head_fit_loss(predict_duals(head, embeddings), lambdas)
    return value


def train_dual_head(
    embeddings_labeled: np.ndarray, lambdas: np.ndarray, config: DualHeadConfig
) -> list[DenseLayer]:
    """Fit the head to the labeled samples' dual variables.

    Full-batch adam; labeled sets are small enough that batching would only
    add noise. The embeddings themselves are read-only inputs.
    """
    embeddings = np.asarray(embeddings_labeled, dtype=np.float64)
    lambdas = np.asarray(lambdas, dtype=np.float64).reshape(-1)
    if embeddings.ndim != 2 or len(embeddings) == 0:
        raise ValueError("embeddings must be a non-empty 2-D array")
    if len(embeddings) != len(lambdas):
        raise ShapeError("one dual target per embedding row is required")
    if (lambdas < 0).any():
        raise ValueError("dual targets must be nonnegative")

    head = init_head(embeddings.shape[1], config)
    opt = numerics.init_optimizer("adam", head, config.lr)
    for _ in range(config.epochs):
        preds, cache = _head_forward(head, embeddings)
        _, grad_preds = dual_head_fit_loss(preds, lambdas)
        grads, _ = numerics.stack_backward(head, cache, grad_preds[:, None])
        head, opt = numerics.optimizer_step(opt, head, grads)
    return head
