import numpy as np
import numpy.testing as npt
import pytest

from ally import numerics as nm
from ally.losses import per_sample_loss

from util import finite_diff_layers, layer_grads_allclose, naive_forward, rel_err


def test_affine_arch_is_single_layer_with_zero_bias():
    params = nm.init_params(nm.MLPArchitecture(2, (), 1), rng_seed=7)
    assert params.backbone == []
    assert len(params.pred_head) == 1
    assert params.pred_head[0].weight.shape == (1, 2)
    npt.assert_array_equal(params.pred_head[0].bias, 0.0)


def test_init_is_deterministic_given_seed():
    arch = nm.MLPArchitecture(5, (4, 3), 2)
    a = nm.init_params(arch, rng_seed=7)
    b = nm.init_params(arch, rng_seed=7)
    for la, lb in zip(nm.trainable_layers(a), nm.trainable_layers(b)):
        npt.assert_array_equal(la.weight, lb.weight)
        npt.assert_array_equal(la.bias, lb.bias)
    c = nm.init_params(arch, rng_seed=8)
    assert not np.array_equal(a.backbone[0].weight, c.backbone[0].weight)


def test_init_shapes_chain():
    params = nm.init_params(nm.MLPArchitecture(4, (3,), 2), rng_seed=1)
    assert params.backbone[0].weight.shape == (3, 4)
    assert params.pred_head[0].weight.shape == (2, 3)


def test_invalid_architecture_rejected():
    with pytest.raises(nm.ShapeError):
        nm.MLPArchitecture(0, (), 1)
    with pytest.raises(nm.ShapeError):
        nm.MLPArchitecture(2, (0,), 1)
    with pytest.raises(ValueError):
        nm.MLPArchitecture(2, (), 1, activation="softmax")


def test_forward_zero_input_gives_bias():
    params = nm.init_params(nm.MLPArchitecture(3, (), 2), rng_seed=0)
    emb, out, _ = nm.forward(params, np.zeros((4, 3)))
    npt.assert_array_equal(out, 0.0)
    npt.assert_array_equal(emb, np.zeros((4, 3)))


def test_relu_kills_all_negative_preactivations():
    layer = nm.DenseLayer(-np.eye(3), np.full(3, -1.0))
    head = nm.DenseLayer(np.ones((1, 3)), np.zeros(1))
    params = nm.ModelParams([layer], [head], [], activation="relu")
    emb, out, _ = nm.forward(params, np.abs(np.random.default_rng(0).normal(size=(5, 3))))
    npt.assert_array_equal(emb, 0.0)
    npt.assert_array_equal(out, 0.0)


def test_forward_matches_naive_reimplementation():
    rng = np.random.default_rng(42)
    for seed in range(5):
        arch = nm.MLPArchitecture(4, (6, 5), 3)
        params = nm.init_params(arch, seed)
        x = rng.normal(size=(7, 4))
        emb, out, _ = nm.forward(params, x)
        emb_ref, out_ref = naive_forward(params, x)
        npt.assert_allclose(emb, emb_ref, rtol=0, atol=1e-12)
        npt.assert_allclose(out, out_ref, rtol=0, atol=1e-12)


def test_forward_shape_mismatch_rejected():
    params = nm.init_params(nm.MLPArchitecture(4, (3,), 2), rng_seed=0)
    with pytest.raises(nm.ShapeError):
        nm.forward(params, np.zeros((5, 3)))
    with pytest.raises(nm.ShapeError):
        nm.forward(params, np.zeros(4))


def test_backward_zero_grad_outputs_gives_zero_grads():
    params = nm.init_params(nm.MLPArchitecture(3, (4,), 2), rng_seed=0)
    _, out, cache = nm.forward(params, np.random.default_rng(1).normal(size=(5, 3)))
    grads = nm.backward_lagrangian(params, cache, np.zeros_like(out))
    for g in nm.grads_as_layers(grads):
        npt.assert_array_equal(g.weight, 0.0)
        npt.assert_array_equal(g.bias, 0.0)


def test_backward_is_linear_in_grad_outputs():
    params = nm.init_params(nm.MLPArchitecture(3, (4,), 2), rng_seed=3)
    rng = np.random.default_rng(5)
    _, out, cache = nm.forward(params, rng.normal(size=(6, 3)))
    go = rng.normal(size=out.shape)
    g1 = nm.grads_as_layers(nm.backward_lagrangian(params, cache, go))
    g2 = nm.grads_as_layers(nm.backward_lagrangian(params, cache, 2.0 * go))
    for a, b in zip(g1, g2):
        npt.assert_allclose(2.0 * a.weight, b.weight, rtol=0, atol=1e-14)
        npt.assert_allclose(2.0 * a.bias, b.bias, rtol=0, atol=1e-14)


def test_square_loss_gradient_matches_finite_differences():
    params = nm.init_params(nm.MLPArchitecture(3, (), 1), rng_seed=9)
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 3))
    target = rng.normal(size=(4, 1))

    def loss():
        _, out, _ = nm.forward(params, x)
        return float(((out - target) ** 2).sum())

    _, out, cache = nm.forward(params, x)
    analytic = nm.grads_as_layers(
        nm.backward_lagrangian(params, cache, 2.0 * (out - target))
    )
    numeric = finite_diff_layers(loss, nm.trainable_layers(params), step=1e-5)
    ok, worst = layer_grads_allclose(analytic, numeric, 1e-6)
    assert ok, f"worst relative error {worst}"


def test_stale_cache_rejected():
    params = nm.init_params(nm.MLPArchitecture(3, (4,), 2), rng_seed=0)
    _, out, cache = nm.forward(params, np.zeros((2, 3)))
    other = params.copy()
    with pytest.raises(nm.StaleCacheError):
        nm.backward_lagrangian(other, cache, np.zeros_like(out))


def test_grad_outputs_shape_mismatch_rejected():
    params = nm.init_params(nm.MLPArchitecture(3, (4,), 2), rng_seed=0)
    _, out, cache = nm.forward(params, np.zeros((2, 3)))
    with pytest.raises(nm.ShapeError):
        nm.backward_lagrangian(params, cache, np.zeros((2, 3)))


def test_gradient_check_lagrangian_on_random_small_nets():
    # weighted per-sample loss, the exact quantity the training loop descends
    from util import random_small_net

    rng = np.random.default_rng(2024)
    for _ in range(8):
        arch, params, x = random_small_net(rng)
        if arch.output_dim >= 2:
            y = rng.integers(0, arch.output_dim, size=len(x))
            kind = "cross_entropy"
        else:
            y = rng.normal(size=(len(x), arch.output_dim))
            kind = "mse"
        lam = rng.uniform(0.0, 2.0, size=len(x))
        eps = rng.uniform(0.05, 0.5, size=len(x))

        def lagrangian():
            _, out, _ = nm.forward(params, x)
            ell = per_sample_loss(kind, out, y)
            return float(np.mean(ell.values + lam * (ell.values - eps)))

        _, out, cache = nm.forward(params, x)
        ell = per_sample_loss(kind, out, y)
        go = ell.grads * ((1.0 + lam) / len(x))[:, None]
        analytic = nm.grads_as_layers(nm.backward_lagrangian(params, cache, go))
        numeric = finite_diff_layers(lagrangian, nm.trainable_layers(params), step=1e-5)
        ok, worst = layer_grads_allclose(analytic, numeric, 1e-4)
        assert ok, f"worst relative error {worst}"


def test_sgd_step_value():
    layer = [nm.DenseLayer(np.array([[1.0]]), np.zeros(1))]
    state = nm.init_optimizer("sgd", layer, 0.1)
    grads = [nm.DenseLayer(np.array([[2.0]]), np.zeros(1))]
    new, state = nm.optimizer_step(state, layer, grads)
    npt.assert_allclose(new[0].weight, [[0.8]], rtol=0, atol=1e-15)
    assert state.step_count == 1


def test_adam_zero_grads_leave_params_unchanged():
    layers = [nm.DenseLayer(np.array([[1.0, -2.0]]), np.array([0.5]))]
    state = nm.init_optimizer("adam", layers, 0.01)
    zero = [nm.DenseLayer(np.zeros((1, 2)), np.zeros(1))]
    for _ in range(20):
        layers, state = nm.optimizer_step(state, layers, zero)
    npt.assert_array_equal(layers[0].weight, [[1.0, -2.0]])
    npt.assert_array_equal(layers[0].bias, [0.5])


def test_adam_first_step_matches_hand_formula():
    lr, b1, b2, eps = 0.005, 0.9, 0.999, 1e-8
    g = 0.37
    layers = [nm.DenseLayer(np.array([[1.0]]), np.zeros(1))]
    state = nm.init_optimizer("adam", layers, lr)
    grads = [nm.DenseLayer(np.array([[g]]), np.zeros(1))]
    new, _ = nm.optimizer_step(state, layers, grads)
    m_hat = ((1 - b1) * g) / (1 - b1)
    v_hat = ((1 - b2) * g * g) / (1 - b2)
    expected = 1.0 - lr * m_hat / (np.sqrt(v_hat) + eps)
    npt.assert_allclose(new[0].weight[0, 0], expected, rtol=0, atol=1e-15)
    assert abs(1.0 - new[0].weight[0, 0]) == pytest.approx(lr, rel=1e-6)


def test_non_finite_grads_raise_and_leave_state_unchanged():
    layers = [nm.DenseLayer(np.array([[1.0]]), np.zeros(1))]
    state = nm.init_optimizer("adam", layers, 0.01)
    bad = [nm.DenseLayer(np.array([[np.nan]]), np.zeros(1))]
    with pytest.raises(nm.NumericError):
        nm.optimizer_step(state, layers, bad)
    assert state.step_count == 0
    npt.assert_array_equal(state.m[0].weight, 0.0)


def test_optimizer_shape_mismatch_rejected():
    layers = [nm.DenseLayer(np.ones((2, 2)), np.zeros(2))]
    state = nm.init_optimizer("sgd", layers, 0.1)
    with pytest.raises(nm.ShapeError):
        nm.optimizer_step(state, layers, [nm.DenseLayer(np.ones((1, 2)), np.zeros(1))])


def test_forward_backward_bitwise_deterministic():
    arch = nm.MLPArchitecture(6, (8, 8), 3)
    x = np.random.default_rng(0).normal(size=(9, 6))

    def run():
        params = nm.init_params(arch, 123)
        _, out, cache = nm.forward(params, x)
        grads = nm.backward_lagrangian(params, cache, np.ones_like(out))
        return out, nm.grads_as_layers(grads)

    out1, g1 = run()
    out2, g2 = run()
    npt.assert_array_equal(out1, out2)
    for a, b in zip(g1, g2):
        npt.assert_array_equal(a.weight, b.weight)
        npt.assert_array_equal(a.bias, b.bias)
