"""Primal-dual constrained learning.

Alternates minibatch primal descent on the empirical Lagrangian

    L(theta, lambda) = mean_i [ loss_i + lambda_i * (loss'_i - eps_i) ]

with projected dual ascent on the per-sample constraint slacks
s_i = loss'_i - eps_i, so each dual variable accumulates its sample's
slack history and stays nonnegative. The secondary loss equals the primary
loss (cross-entropy for integer labels, MSE otherwise).

RNG protocol (fixed so runs are exactly reproducible): parameter init uses
the bare seed, the validation split uses default_rng([seed, VAL_STREAM])
and minibatch shuffling uses default_rng([seed, SHUFFLE_STREAM]).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics
from .losses import infer_loss_kind, per_sample_loss
from .numerics import MLPArchitecture, ModelParams, NumericError, ShapeError

VAL_STREAM = 11
SHUFFLE_STREAM = 13


@dataclass
class DualState:
    """Per-sample dual variables, constraint bounds, and latest slacks."""

    lambdas: np.ndarray
    epsilons: np.ndarray
    slacks: np.ndarray | None = None

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        self.epsilons = np.asarray(self.epsilons, dtype=np.float64)
        if self.lambdas.shape != self.epsilons.shape:
            raise ShapeError("lambdas and epsilons differ in length")
        if (self.lambdas < 0).any():
            raise ValueError("dual variables must be nonnegative")


@dataclass
class PDCLConfig:
    """Training hyperparameters; defaults follow the experimental protocol."""

    eta_p: float = 0.005
    eta_d: float = 0.05
    T: int = 200
    T_p: int = 1
    epsilon: float | np.ndarray = 0.2
    patience: int = 6
    validation_fraction: float = 0.1
    batch_size: int = 64
    primal_optimizer: str = "adam"
    record_history: bool = False

    def __post_init__(self):
        if self.eta_p <= 0 or self.eta_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.T < 1 or self.T_p < 1:
            raise ValueError("T and T_p must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class TrainReport:
    """Traces and convergence metadata from one training run."""

    objective_trace: list[float] = field(default_factory=list)
    lagrangian_trace: list[float] = field(default_factory=list)
    final_slacks: np.ndarray | None = None
    violation_fraction: float | None = None
    stopped_epoch: int | None = None
    dual: DualState | None = None
    n_train: int = 0
    n_val: int = 0
    diverged: bool = False
    history: dict | None = None

    def to_json(self) -> str:
        d = {
            "objective_trace": list(map(float, self.objective_trace)),
            "lagrangian_trace": list(map(float, self.lagrangian_trace)),
            "final_slacks": None if self.final_slacks is None else self.final_slacks.tolist(),
            "violation_fraction": self.violation_fraction,
            "stopped_epoch": self.stopped_epoch,
            "lambdas": None if self.dual is None else self.dual.lambdas.tolist(),
            "epsilons": None if self.dual is None else self.dual.epsilons.tolist(),
            "n_train": self.n_train,
            "n_val": self.n_val,
            "diverged": self.diverged,
        }
        return json.dumps(d)


class PDCLDivergenceError(NumericError):
    """Raised when the Lagrangian turns non-finite; carries the partial report."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


def broadcast_epsilon(epsilon, n: int) -> np.ndarray:
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.ndim == 0:
        return np.full(n, float(eps))
    if eps.shape != (n,):
        raise ShapeError(f"epsilon vector has length {eps.shape}, expected {n}")
    return eps.copy()


def empirical_lagrangian(
    params: ModelParams, x: np.ndarray, y: np.ndarray, dual: DualState
) -> float:
    """mean_i [ loss_i + lambda_i * (loss'_i - eps_i) ] over the given samples."""
    if len(dual.lambdas) != len(x):
        raise ShapeError("dual state length does not match sample count")
    kind = infer_loss_kind(y)
    _, outputs, _ = numerics.forward(params, x)
    losses = per_sample_loss(kind, outputs, y)
    return float(np.mean(losses.values + dual.lambdas * (losses.values - dual.epsilons)))


def compute_slacks(
    params: ModelParams, x: np.ndarray, y: np.ndarray, epsilons
) -> np.ndarray:
    """s_i = secondary loss on sample i minus its bound; positive means violated."""
    eps = broadcast_epsilon(epsilons, len(x))
    kind = infer_loss_kind(y)
    _, outputs, _ = numerics.forward(params, x)
    losses = per_sample_loss(kind, outputs, y)
    return losses.values - eps


def dual_step(dual: DualState, slacks: np.ndarray, eta_d: float) -> DualState:
    """Projected ascent: lambda_i <- max(0, lambda_i + eta_d * s_i)."""
    slacks = np.asarray(slacks, dtype=np.float64)
    if slacks.shape != dual.lambdas.shape:
        raise ShapeError("slack vector length does not match dual state")
    new_lambdas = np.maximum(dual.lambdas + eta_d * slacks, 0.0)
    return DualState(new_lambdas, dual.epsilons.copy(), slacks.copy())


def _minibatches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start : start + batch_size]


def pdcl_train(
    x: np.ndarray,
    y: np.ndarray,
    arch: MLPArchitecture,
    config: PDCLConfig,
    rng_seed: int,
) -> tuple[ModelParams, DualState, TrainReport]:
    """Train under per-sample constraints and return params, duals, report.

    Duals start at zero and are updated once per outer iteration from a
    full-pool slack evaluation. A held-out validation slice (excluded from
    the primal minibatches, still tracked by the duals) drives early
    stopping on the primary loss. Returned duals are the values at the
    stopping point.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("labeled pool is empty")
    if len(x) != len(y):
        raise ShapeError("features and labels differ in length")
    n = len(x)
    kind = infer_loss_kind(np.asarray(y))
    eps = broadcast_epsilon(config.epsilon, n)

    params = numerics.init_params(arch, rng_seed)
    layers = numerics.trainable_layers(params)
    opt = numerics.init_optimizer(config.primal_optimizer, layers, config.eta_p)
    dual = DualState(np.zeros(n), eps)

    n_val = int(round(config.validation_fraction * n))
    if n_val >= n:
        n_val = n - 1
    if n_val > 0:
        val_rng = np.random.default_rng([rng_seed, VAL_STREAM])
        val_idx = np.sort(val_rng.choice(n, size=n_val, replace=False))
        train_mask = np.ones(n, dtype=bool)
        train_mask[val_idx] = False
        train_idx = np.flatnonzero(train_mask)
    else:
        val_idx = np.empty(0, dtype=int)
        train_idx = np.arange(n)

    report = TrainReport(n_train=len(train_idx), n_val=len(val_idx))
    if config.record_history:
        report.history = {"slacks": [], "lambdas": [], "val_loss": []}

    shuffle_rng = np.random.default_rng([rng_seed, SHUFFLE_STREAM])
    best_val = np.inf
    epochs_since_best = 0

    for t in range(1, config.T + 1):
        try:
            for _ in range(config.T_p):
                perm = shuffle_rng.permutation(train_idx)
                for batch in _minibatches(perm, config.batch_size):
                    xb, yb = x[batch], np.asarray(y)[batch]
                    _, outputs, cache = numerics.forward(params, xb)
                    losses = per_sample_loss(kind, outputs, yb)
                    weights = (1.0 + dual.lambdas[batch]) / len(batch)
                    grad_out = losses.grads * weights[:, None]
                    grads = numerics.backward_lagrangian(params, cache, grad_out)
                    layers, opt = numerics.optimizer_step(
                        opt, layers, numerics.grads_as_layers(grads)
                    )
                    params = numerics.with_trainable_layers(params, layers)

            _, outputs, _ = numerics.forward(params, x)
            losses = per_sample_loss(kind, outputs, np.asarray(y))
        except NumericError as exc:
            report.final_slacks = dual.slacks
            report.violation_fraction = (
                None if dual.slacks is None else float(np.mean(dual.slacks > 0))
            )
            report.stopped_epoch = len(report.objective_trace)
            report.dual = dual
            report.diverged = True
            raise PDCLDivergenceError(
                f"training diverged at iteration {t}: {exc}", report
            ) from exc
        with np.errstate(over="ignore", invalid="ignore"):
            slacks = losses.values - eps
            dual = dual_step(dual, slacks, config.eta_d)
            objective = float(losses.values.mean())
            lagrangian = float(
                np.mean(losses.values + dual.lambdas * (losses.values - eps))
            )
        report.objective_trace.append(objective)
        report.lagrangian_trace.append(lagrangian)
        if config.record_history:
            report.history["slacks"].append(slacks.copy())
            report.history["lambdas"].append(dual.lambdas.copy())

        if not (np.isfinite(objective) and np.isfinite(lagrangian)):
            report.final_slacks = slacks
            report.violation_fraction = float(np.mean(slacks > 0))
            report.stopped_epoch = t
            report.dual = dual
            report.diverged = True
            raise PDCLDivergenceError(
                f"non-finite Lagrangian at iteration {t}", report
            )

        if n_val > 0:
            val_loss = float(losses.values[val_idx].mean())
            if config.record_history:
                report.history["val_loss"].append(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= config.patience > 0:
                    break

    report.final_slacks = dual.slacks
    report.violation_fraction = float(np.mean(dual.slacks > 0))
    report.stopped_epoch = len(report.objective_trace)
    report.dual = dual
    return params, dual, report
