"""Dense MLP substrate: initialization, forward/backward passes, optimizers.

All arithmetic is float64 numpy. A model is three stacks of dense layers:
a backbone mapping inputs to embeddings, a prediction head mapping
embeddings to outputs (logits or regression values), and a dual head
mapping embeddings to a single nonnegative score through a softplus.
Every public operation is a pure function of its inputs; given the same
seed the results are bitwise reproducible on one platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch, rejected before any computation runs."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class StaleCacheError(RuntimeError):
    """Forward cache does not belong to the supplied parameters."""


ACTIVATIONS = ("relu", "identity", "softplus")


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) without overflow for large |z|
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return relu(z)
    if name == "identity":
        return z
    if name == "softplus":
        return softplus(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its pre-activation z."""
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "identity":
        return np.ones_like(z)
    if name == "softplus":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MLPArchitecture:
    """Shape of a multilayer perceptron; hidden list may be empty (affine map)."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"activation must be 'relu' or 'identity', got {self.activation!r}")


@dataclass
class DenseLayer:
    """One affine layer. weight is (out, in); bias is (out,)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError("weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != output dim {self.weight.shape[0]}"
            )

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy())


@dataclass
class ModelParams:
    """Parameters split into backbone, prediction head and dual head stacks."""

    backbone: list[DenseLayer]
    pred_head: list[DenseLayer]
    dual_head: list[DenseLayer]
    activation: str = "relu"

    def __post_init__(self):
        _check_chain(self.backbone, "backbone")
        _check_chain(self.pred_head, "pred_head")
        _check_chain(self.dual_head, "dual_head")
        if self.backbone and self.pred_head:
            if self.backbone[-1].out_dim != self.pred_head[0].in_dim:
                raise ShapeError("backbone output dim does not match prediction head input dim")
        if self.dual_head:
            if self.dual_head[-1].out_dim != 1:
                raise ShapeError("dual head must produce a single score")
            if self.dual_head[0].in_dim != self.embedding_dim:
                raise ShapeError("dual head input dim does not match embedding dim")

    @property
    def input_dim(self) -> int:
        stack = self.backbone or self.pred_head
        return stack[0].in_dim

    @property
    def embedding_dim(self) -> int:
        if self.backbone:
            return self.backbone[-1].out_dim
        return self.pred_head[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.pred_head[-1].out_dim

    def copy(self) -> "ModelParams":
        return ModelParams(
            [l.copy() for l in self.backbone],
            [l.copy() for l in self.pred_head],
            [l.copy() for l in self.dual_head],
            self.activation,
        )


def _check_chain(layers: list[DenseLayer], name: str) -> None:
    for prev, nxt in zip(layers, layers[1:]):
        if prev.out_dim != nxt.in_dim:
            raise ShapeError(
                f"{name}: layer output dim {prev.out_dim} does not chain into "
                f"next input dim {nxt.in_dim}"
            )


@dataclass
class StackCache:
    """Pre/post activations of one layer stack, enough for an exact backward."""

    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    hidden_activation: str
    output_activation: str


@dataclass
class ForwardCache:
    params: ModelParams
    backbone: StackCache
    head: StackCache


@dataclass
class ParamGrads:
    """Gradients mirroring the trainable (backbone + prediction head) layers."""

    backbone: list[DenseLayer]
    pred_head: list[DenseLayer]


DUAL_HEAD_HIDDEN = (64, 32, 16)


def _init_layer(rng: np.random.Generator, out_dim: int, in_dim: int, kind: str) -> DenseLayer:
    # Kaiming-uniform fan-in scaling for relu, Xavier-uniform for linear outputs
    if kind == "relu":
        bound = np.sqrt(6.0 / in_dim)
    else:
        bound = np.sqrt(6.0 / (in_dim + out_dim))
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return DenseLayer(weight, np.zeros(out_dim))


def _init_stack(rng, dims: tuple[int, ...], hidden_kind: str) -> list[DenseLayer]:
    """Layers for dims[0] -> ... -> dims[-1]; last layer gets linear init."""
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(_init_layer(rng, d_out, d_in, "linear" if last else hidden_kind))
    return layers


def init_params(
    arch: MLPArchitecture,
    rng_seed: int,
    dual_head_dims: tuple[int, ...] = DUAL_HEAD_HIDDEN,
) -> ModelParams:
    """Initialize all three stacks deterministically from the seed.

    Backbone layers are the hidden layers of the architecture (the embedding
    is the last hidden activation); the prediction head is the final affine
    layer. With no hidden layers the backbone is empty and the embedding is
    the raw input. Biases start at zero.
    """
    rng = np.random.default_rng(rng_seed)
    hidden_kind = arch.activation if arch.activation == "relu" else "linear"
    backbone = []
    d_in = arch.input_dim
    for h in arch.hidden_dims:
        backbone.append(_init_layer(rng, h, d_in, hidden_kind))
        d_in = h
    pred_head = [_init_layer(rng, arch.output_dim, d_in, "linear")]
    dual_head = _init_stack(rng, (d_in, *dual_head_dims, 1), "relu")
    return ModelParams(backbone, pred_head, dual_head, arch.activation)


def stack_forward(
    layers: list[DenseLayer],
    x: np.ndarray,
    hidden_activation: str,
    output_activation: str,
) -> tuple[np.ndarray, StackCache]:
    """Run x through a layer stack. Empty stack is the identity map."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got ndim={x.ndim}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite values in input batch")
    if layers and x.shape[1] != layers[0].in_dim:
        raise ShapeError(f"input has {x.shape[1]} features, layer expects {layers[0].in_dim}")
    pre, post = [], []
    h = x
    for i, layer in enumerate(layers):
        z = h @ layer.weight.T + layer.bias
        act = output_activation if i == len(layers) - 1 else hidden_activation
        h = _activate(act, z)
        pre.append(z)
        post.append(h)
    return h, StackCache(x, pre, post, hidden_activation, output_activation)


def stack_backward(
    layers: list[DenseLayer],
    cache: StackCache,
    grad_out: np.ndarray,
) -> tuple[list[DenseLayer], np.ndarray]:
    """Exact gradients for a stack given d(scalar)/d(stack output).

    Returns per-layer gradients (same shapes as the layers) and the
    gradient w.r.t. the stack input.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if not layers:
        return [], grad_out
    if grad_out.shape != cache.post[-1].shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != stack output shape {cache.post[-1].shape}"
        )
    grads: list[DenseLayer] = [None] * len(layers)  # type: ignore[list-item]
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        act = cache.output_activation if i == len(layers) - 1 else cache.hidden_activation
        gz = g * _activation_grad(act, cache.pre[i])
        layer_in = cache.post[i - 1] if i > 0 else cache.x
        grads[i] = DenseLayer(gz.T @ layer_in, gz.sum(axis=0))
        g = gz @ layers[i].weight
    return grads, g


def forward(
    params: ModelParams, x_batch: np.ndarray
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Compute embeddings and outputs with a cache for the backward pass."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != params.input_dim:
        raise ShapeError(
            f"expected batch of shape (n, {params.input_dim}), got {x_batch.shape}"
        )
    act = params.activation
    embeddings, bcache = stack_forward(params.backbone, x_batch, act, act)
    outputs, hcache = stack_forward(params.pred_head, embeddings, act, "identity")
    return embeddings, outputs, ForwardCache(params, bcache, hcache)


def backward_lagrangian(
    params: ModelParams, cache: ForwardCache, grad_outputs: np.ndarray
) -> ParamGrads:
    """Gradients of any scalar whose output-gradient is supplied.

    The result is linear in grad_outputs, so the caller can fold per-sample
    loss weights (including dual variables) into grad_outputs directly.
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced by a different forward call")
    grad_outputs = np.asarray(grad_outputs, dtype=np.float64)
    head_grads, g_emb = stack_backward(params.pred_head, cache.head, grad_outputs)
    backbone_grads, _ = stack_backward(params.backbone, cache.backbone, g_emb)
    return ParamGrads(backbone_grads, head_grads)


@dataclass
class OptimizerState:
    """First-order optimizer state over an ordered list of dense layers."""

    kind: str
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list[DenseLayer] = field(default_factory=list)
    v: list[DenseLayer] = field(default_factory=list)


def init_optimizer(kind: str, layers: list[DenseLayer], learning_rate: float) -> OptimizerState:
    if kind not in ("adam", "sgd"):
        raise ValueError(f"optimizer kind must be 'adam' or 'sgd', got {kind!r}")
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    zeros = lambda: [DenseLayer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in layers]
    if kind == "adam":
        return OptimizerState("adam", learning_rate, m=zeros(), v=zeros())
    return OptimizerState("sgd", learning_rate)


def optimizer_step(
    state: OptimizerState, layers: list[DenseLayer], grads: list[DenseLayer]
) -> tuple[list[DenseLayer], OptimizerState]:
    """One update. Raises on non-finite gradients with the state unchanged."""
    if len(layers) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(layers, grads):
        if p.weight.shape != g.weight.shape or p.bias.shape != g.bias.shape:
            raise ShapeError("gradient shapes do not mirror parameter shapes")
        if not (np.isfinite(g.weight).all() and np.isfinite(g.bias).all()):
            raise NumericError("non-finite gradient")
    lr = state.learning_rate
    if state.kind == "sgd":
        new_layers = [
            DenseLayer(p.weight - lr * g.weight, p.bias - lr * g.bias)
            for p, g in zip(layers, grads)
        ]
        return new_layers, replace(state, step_count=state.step_count + 1)

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_layers, new_m, new_v = [], [], []
    for p, g, m, v in zip(layers, grads, state.m, state.v):
        mw = b1 * m.weight + (1 - b1) * g.weight
        mb = b1 * m.bias + (1 - b1) * g.bias
        vw = b2 * v.weight + (1 - b2) * g.weight**2
        vb = b2 * v.bias + (1 - b2) * g.bias**2
        mw_hat, mb_hat = mw / (1 - b1**t), mb / (1 - b1**t)
        vw_hat, vb_hat = vw / (1 - b2**t), vb / (1 - b2**t)
        new_layers.append(
            DenseLayer(
                p.weight - lr * mw_hat / (np.sqrt(vw_hat) + eps),
                p.bias - lr * mb_hat / (np.sqrt(vb_hat) + eps),
            )
        )
        new_m.append(DenseLayer(mw, mb))
        new_v.append(DenseLayer(vw, vb))
    return new_layers, replace(state, step_count=t, m=new_m, v=new_v)


def trainable_layers(params: ModelParams) -> list[DenseLayer]:
    """The layers PDCL updates: backbone followed by prediction head."""
    return list(params.backbone) + list(params.pred_head)


def with_trainable_layers(params: ModelParams, layers: list[DenseLayer]) -> ModelParams:
    """Rebuild params from an updated trainable-layer list (dual head kept)."""
    nb = len(params.backbone)
    if len(layers) != nb + len(params.pred_head):
        raise ShapeError("layer list length does not match the model")
    return ModelParams(layers[:nb], layers[nb:], params.dual_head, params.activation)


def grads_as_layers(grads: ParamGrads) -> list[DenseLayer]:
    return list(grads.backbone) + list(grads.pred_head)
