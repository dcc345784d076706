"""Shared test helpers: independent re-implementations and finite
differences used as oracles."""
from __future__ import annotations

import numpy as np

from ally import numerics as nm


def rel_err(a, b, floor=1e-6) -> float:
    """Worst-case relative error with a floor for near-zero entries."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def naive_forward(params: nm.ModelParams, x: np.ndarray):
    """Loop-based re-implementation of the batched forward pass."""

    def act(name, z):
        return np.maximum(z, 0.0) if name == "relu" else z

    embs, outs = [], []
    for row in np.asarray(x, dtype=np.float64):
        h = row.copy()
        for layer in params.backbone:
            z = np.array([layer.weight[i] @ h + layer.bias[i]
                          for i in range(layer.out_dim)])
            h = act(params.activation, z)
        embs.append(h.copy())
        for j, layer in enumerate(params.pred_head):
            z = np.array([layer.weight[i] @ h + layer.bias[i]
                          for i in range(layer.out_dim)])
            h = z if j == len(params.pred_head) - 1 else act(params.activation, z)
        outs.append(h)
    return np.array(embs), np.array(outs)


def finite_diff_layers(fn, layers, step=1e-5):
    """Central-difference gradients of the scalar fn() w.r.t. every entry
    of the given layers. fn must read the layer arrays it was handed."""
    grads = []
    for layer in layers:
        gw = np.zeros_like(layer.weight)
        gb = np.zeros_like(layer.bias)
        for arr, g in ((layer.weight, gw), (layer.bias, gb)):
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + step
                fp = fn()
                arr[idx] = old - step
                fm = fn()
                arr[idx] = old
                g[idx] = (fp - fm) / (2.0 * step)
        grads.append(nm.DenseLayer(gw, gb))
    return grads


def finite_diff_vector(fn, x, step=1e-5):
    """Central-difference gradient of fn(x) w.r.t. a 1-D vector x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return g


def kink_margin(params, x) -> float:
    """Smallest |pre-activation| over all relu layers for this batch."""
    if params.activation != "relu" or not params.backbone:
        return np.inf
    _, _, cache = nm.forward(params, x)
    return min(float(np.abs(pre).min()) for pre in cache.backbone.pre)


def random_small_net(rng: np.random.Generator, min_kink_margin=1e-3):
    """A random architecture with at most 3 layers of at most 32 units,
    plus a matching input batch.

    Central differences are meaningless within a step of a relu kink, so
    draws whose pre-activations sit closer than min_kink_margin to zero
    are rejected and redrawn.
    """
    while True:
        depth = int(rng.integers(0, 3))
        hidden = tuple(int(rng.integers(2, 33)) for _ in range(depth))
        arch = nm.MLPArchitecture(
            int(rng.integers(2, 9)), hidden, int(rng.integers(1, 6)),
            activation="relu" if rng.random() < 0.8 else "identity",
        )
        params = nm.init_params(arch, int(rng.integers(0, 2**31)),
                                dual_head_dims=(8, 4))
        x = rng.normal(size=(int(rng.integers(2, 7)), arch.input_dim))
        if kink_margin(params, x) > min_kink_margin:
            return arch, params, x


def layer_grads_allclose(got, want, tol, floor=1e-6):
    worst = 0.0
    for g, w in zip(got, want):
        worst = max(worst, rel_err(g.weight, w.weight, floor),
                    rel_err(g.bias, w.bias, floor))
    return worst <= tol, worst
