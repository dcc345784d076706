import numpy as np
import numpy.testing as npt
import pytest

from ally import numerics as nm
from ally import pdcl
from ally.losses import per_sample_loss
from ally.numerics import MLPArchitecture, ShapeError


def toy_classification(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(-1.0, 0.15, size=(n // 2, 1)),
                        rng.normal(+1.0, 0.15, size=(n // 2, 1))])
    y = np.concatenate([np.zeros(n // 2, dtype=np.int64),
                        np.ones(n // 2, dtype=np.int64)])
    return x, y


def small_params(seed=0):
    return nm.init_params(MLPArchitecture(2, (4,), 3), seed)


def test_empirical_lagrangian_reduces_to_objective_at_zero_duals():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2))
    y = rng.integers(0, 3, size=6)
    params = small_params()
    dual = pdcl.DualState(np.zeros(6), np.full(6, 0.2))
    value = pdcl.empirical_lagrangian(params, x, y, dual)
    _, out, _ = nm.forward(params, x)
    expected = per_sample_loss("cross_entropy", out, y).values.mean()
    assert abs(value - expected) <= 1e-14


def test_empirical_lagrangian_single_sample_formula():
    # single sample with loss exactly 1, slack 0.3, lambda 2 -> 1 + 2*0.3 = 1.6
    a = -np.log(np.e - 1.0)  # two-class logits (a, 0) give loss log(1 + e^-a) = 1
    layer = nm.DenseLayer(np.zeros((2, 1)), np.array([a, 0.0]))
    params = nm.ModelParams([], [layer], [], activation="identity")
    x = np.zeros((1, 1))
    y = np.array([0])
    dual = pdcl.DualState(np.array([2.0]), np.array([0.7]))
    value = pdcl.empirical_lagrangian(params, x, y, dual)
    assert value == pytest.approx(1.6, abs=1e-12)


def test_empirical_lagrangian_matches_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 2))
    y = rng.integers(0, 3, size=9)
    params = small_params(3)
    lam = rng.uniform(0, 2, size=9)
    eps = rng.uniform(0.1, 0.4, size=9)
    dual = pdcl.DualState(lam, eps)
    value = pdcl.empirical_lagrangian(params, x, y, dual)
    _, out, _ = nm.forward(params, x)
    ell = per_sample_loss("cross_entropy", out, y).values
    expected = sum(ell[i] + lam[i] * (ell[i] - eps[i]) for i in range(9)) / 9
    assert abs(value - expected) <= 1e-12


def test_compute_slacks_examples():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 2))
    y = rng.integers(0, 3, size=5)
    params = small_params(5)
    _, out, _ = nm.forward(params, x)
    ell = per_sample_loss("cross_entropy", out, y).values
    slacks = pdcl.compute_slacks(params, x, y, ell)  # eps = loss -> zeros
    npt.assert_allclose(slacks, 0.0, rtol=0, atol=1e-14)
    slacks = pdcl.compute_slacks(params, x, y, 0.2)
    npt.assert_allclose(slacks, ell - 0.2, rtol=0, atol=1e-14)
    expected = [ell[i] - 0.2 for i in range(5)]
    npt.assert_allclose(slacks, expected, rtol=0, atol=1e-12)


def test_dual_step_formula_and_projection():
    dual = pdcl.DualState(np.array([0.3]), np.array([0.2]))
    stepped = pdcl.dual_step(dual, np.array([-0.1]), 0.05)
    npt.assert_allclose(stepped.lambdas, [0.295], rtol=0, atol=1e-15)
    dual = pdcl.DualState(np.array([0.01]), np.array([0.2]))
    stepped = pdcl.dual_step(dual, np.array([-1.0]), 0.05)
    npt.assert_array_equal(stepped.lambdas, [0.0])
    dual = pdcl.DualState(np.array([0.7]), np.array([0.2]))
    stepped = pdcl.dual_step(dual, np.array([0.0]), 0.05)
    npt.assert_array_equal(stepped.lambdas, [0.7])


def test_dual_state_rejects_negative_lambdas():
    with pytest.raises(ValueError):
        pdcl.DualState(np.array([-0.1]), np.array([0.2]))


def erm_reference(x, y, arch, config, seed):
    """Plain unconstrained training with the same rng protocol."""
    from ally.losses import infer_loss_kind

    kind = infer_loss_kind(np.asarray(y))
    params = nm.init_params(arch, seed)
    layers = nm.trainable_layers(params)
    opt = nm.init_optimizer("adam", layers, config.eta_p)
    train_idx = np.arange(len(x))
    shuffle_rng = np.random.default_rng([seed, pdcl.SHUFFLE_STREAM])
    for _ in range(config.T):
        for _ in range(config.T_p):
            perm = shuffle_rng.permutation(train_idx)
            for start in range(0, len(perm), config.batch_size):
                batch = perm[start : start + config.batch_size]
                _, out, cache = nm.forward(params, x[batch])
                ell = per_sample_loss(kind, out, np.asarray(y)[batch])
                go = ell.grads / len(batch)
                grads = nm.backward_lagrangian(params, cache, go)
                layers, opt = nm.optimizer_step(opt, layers, nm.grads_as_layers(grads))
                params = nm.with_trainable_layers(params, layers)
    return params


def test_unconstrained_limit_matches_erm_bitwise():
    # with a huge eps every slack is negative and lambdas stay clamped at 0,
    # so the parameter trajectory must equal plain risk minimization
    x, y = toy_classification(seed=8)
    arch = MLPArchitecture(1, (6,), 2)
    config = pdcl.PDCLConfig(T=12, epsilon=1e9, validation_fraction=0.0,
                             batch_size=16)
    params, dual, report = pdcl.pdcl_train(x, y, arch, config, rng_seed=21)
    npt.assert_array_equal(dual.lambdas, 0.0)
    reference = erm_reference(x, y, arch, config, seed=21)
    for a, b in zip(nm.trainable_layers(params), nm.trainable_layers(reference)):
        npt.assert_array_equal(a.weight, b.weight)
        npt.assert_array_equal(a.bias, b.bias)


def test_separable_toy_reaches_feasibility():
    x, y = toy_classification(n=60, seed=11)
    arch = MLPArchitecture(1, (8,), 2)
    config = pdcl.PDCLConfig(T=300, epsilon=0.2, validation_fraction=0.0,
                             batch_size=16)
    _, _, report = pdcl.pdcl_train(x, y, arch, config, rng_seed=0)
    assert report.violation_fraction <= 0.05


def test_training_is_deterministic():
    x, y = toy_classification(seed=3)
    arch = MLPArchitecture(1, (5,), 2)
    config = pdcl.PDCLConfig(T=15, epsilon=0.3)
    run1 = pdcl.pdcl_train(x, y, arch, config, rng_seed=5)
    run2 = pdcl.pdcl_train(x, y, arch, config, rng_seed=5)
    assert run1[2].objective_trace == run2[2].objective_trace
    assert run1[2].lagrangian_trace == run2[2].lagrangian_trace
    npt.assert_array_equal(run1[1].lambdas, run2[1].lambdas)
    assert run1[2].stopped_epoch == run2[2].stopped_epoch


def test_lambdas_nonnegative_every_iteration_and_accumulate_slacks():
    x, y = toy_classification(n=30, seed=2)
    arch = MLPArchitecture(1, (4,), 2)
    # eps = 0 keeps every slack positive, so the projection never bites and
    # lambda_t must equal eta_d times the running slack sum
    config = pdcl.PDCLConfig(T=25, epsilon=0.0, eta_d=0.05,
                             validation_fraction=0.0, record_history=True)
    _, dual, report = pdcl.pdcl_train(x, y, arch, config, rng_seed=1)
    slack_hist = np.array(report.history["slacks"])
    lambda_hist = np.array(report.history["lambdas"])
    assert (lambda_hist >= 0).all()
    assert (slack_hist > 0).all()
    running = 0.05 * np.cumsum(slack_hist, axis=0)
    npt.assert_allclose(lambda_hist, running, rtol=0, atol=1e-10)
    npt.assert_allclose(dual.lambdas, running[-1], rtol=0, atol=1e-10)


def test_lagrangian_is_affine_in_lambda():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(7, 2))
    y = rng.integers(0, 3, size=7)
    params = small_params(9)
    eps = np.full(7, 0.2)
    lam0 = rng.uniform(0, 1, size=7)
    direction = rng.uniform(0, 1, size=7)
    at = lambda lam: pdcl.empirical_lagrangian(params, x, y, pdcl.DualState(lam, eps))
    base, bumped = at(lam0), at(lam0 + direction)
    for t in (0.25, 0.5, 2.0):
        expected = base + t * (bumped - base)
        assert abs(at(lam0 + t * direction) - expected) <= 1e-12


def test_divergence_aborts_with_partial_report():
    # plain gradient steps with an absurd rate blow up exponentially
    x, _ = toy_classification(seed=1)
    y = (3.0 * x[:, 0])[:, None]
    arch = MLPArchitecture(1, (4,), 1)
    config = pdcl.PDCLConfig(T=50, eta_p=50.0, epsilon=0.1, batch_size=16,
                             validation_fraction=0.0, primal_optimizer="sgd")
    with pytest.raises(pdcl.PDCLDivergenceError) as excinfo:
        pdcl.pdcl_train(x, y, arch, config, rng_seed=0)
    report = excinfo.value.report
    assert report.diverged
    assert len(report.objective_trace) >= 1


def test_early_stopping_respects_patience():
    # overlapping classes put a floor under the validation loss, so the
    # patience counter runs out long before T
    rng = np.random.default_rng(9)
    x = np.concatenate([rng.normal(-0.3, 0.6, size=(25, 1)),
                        rng.normal(+0.3, 0.6, size=(25, 1))])
    y = np.concatenate([np.zeros(25, dtype=np.int64), np.ones(25, dtype=np.int64)])
    arch = MLPArchitecture(1, (6,), 2)
    config = pdcl.PDCLConfig(T=400, eta_p=0.05, epsilon=0.2, patience=4,
                             validation_fraction=0.2)
    _, _, report = pdcl.pdcl_train(x, y, arch, config, rng_seed=2)
    assert report.stopped_epoch < 400
    assert len(report.objective_trace) == report.stopped_epoch
    assert report.n_val == 10
    assert report.n_train == 40


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        pdcl.pdcl_train(np.empty((0, 2)), np.empty(0, dtype=np.int64),
                        MLPArchitecture(2, (), 2), pdcl.PDCLConfig(), 0)


def test_epsilon_vector_must_match_length():
    x, y = toy_classification(n=10, seed=0)
    config = pdcl.PDCLConfig(T=2, epsilon=np.full(7, 0.2))
    with pytest.raises(ShapeError):
        pdcl.pdcl_train(x, y, MLPArchitecture(1, (), 2), config, 0)


def test_report_serializes_to_json():
    import json

    x, y = toy_classification(n=20, seed=4)
    config = pdcl.PDCLConfig(T=5, epsilon=0.2, validation_fraction=0.0)
    _, _, report = pdcl.pdcl_train(x, y, MLPArchitecture(1, (4,), 2), config, 1)
    payload = json.loads(report.to_json())
    assert len(payload["objective_trace"]) == report.stopped_epoch
    assert payload["violation_fraction"] == report.violation_fraction
    assert len(payload["lambdas"]) == 20
