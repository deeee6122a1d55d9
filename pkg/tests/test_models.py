import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from influx.data import Dataset
from influx.errors import CapExceededError, ConvergenceError, DimensionError, NumericalError
from influx.models import (ModelSpec, ParamVector, exact_hessian, fisher, grad, hvp, loss,
                           objective, objective_grad, predict_proba)
from influx.synthetic import gaussian_blobs
from influx.training import TrainConfig, train


def random_instance(seed):
    """Random model, dataset and parameter point; alternates the two families."""
    rng = np.random.default_rng(seed)
    d, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    if seed % 2:
        spec = ModelSpec("mlp-1hidden", d, c, hidden=int(rng.integers(2, 6)), l2=0.01)
    else:
        spec = ModelSpec("softmax-regression", d, c, bias=bool(seed % 4), l2=0.01)
    ds = Dataset(rng.standard_normal((15, d)), rng.integers(0, c, 15), c)
    theta = ParamVector(0.5 * rng.standard_normal(spec.n_params), spec)
    return spec, ds, theta


def fd_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestDerivatives:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_finite_differences(self, seed):
        spec, ds, theta = random_instance(seed)
        z = ds.example(0)
        fd = fd_grad(lambda v: loss(ParamVector(v, spec), z), theta.values.copy())
        g = grad(theta, z)
        assert np.max(np.abs(g - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    @pytest.mark.parametrize("seed", range(20))
    def test_hvp_matches_finite_differences(self, seed):
        spec, ds, theta = random_instance(seed)
        v = np.random.default_rng(100 + seed).standard_normal(spec.n_params)
        h = 1e-5
        gp = objective_grad(ParamVector(theta.values + h * v, spec), ds)
        gm = objective_grad(ParamVector(theta.values - h * v, spec), ds)
        fd = (gp - gm) / (2 * h)
        hv = hvp(theta, ds, v)
        assert np.max(np.abs(hv - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd)))

    @pytest.mark.parametrize("seed", range(6))
    def test_hessian_columns_equal_hvps(self, seed):
        spec, ds, theta = random_instance(seed)
        H = exact_hessian(theta, ds)
        for j in range(spec.n_params):
            e = np.zeros(spec.n_params)
            e[j] = 1.0
            np.testing.assert_allclose(H[:, j], hvp(theta, ds, e), rtol=0, atol=1e-10)

    def test_objective_gradient_matches_finite_differences(self):
        spec, ds, theta = random_instance(3)
        fd = fd_grad(lambda v: objective(ParamVector(v, spec), ds), theta.values.copy())
        np.testing.assert_allclose(objective_grad(theta, ds), fd, atol=1e-7)


class TestFisher:
    @pytest.mark.parametrize("seed", range(5))
    def test_model_fisher_equals_hessian_for_softmax(self, seed):
        spec, ds, theta = random_instance(2 * seed)
        H = exact_hessian(theta, ds)
        F = fisher(theta, ds, "model") + spec.l2 * np.eye(spec.n_params)
        assert np.linalg.norm(F - H) / np.linalg.norm(H) <= 1e-8

    def test_empirical_fisher_is_gradient_second_moment(self):
        spec, ds, theta = random_instance(1)
        G = np.stack([grad(theta, ds.example(i)) for i in range(ds.n)])
        np.testing.assert_allclose(fisher(theta, ds, "empirical"), G.T @ G / ds.n, atol=1e-12)

    def test_mlp_model_fisher_is_psd_and_symmetric(self):
        spec, ds, theta = random_instance(5)
        F = fisher(theta, ds, "model")
        np.testing.assert_allclose(F, F.T, atol=1e-12)
        assert np.linalg.eigvalsh(F).min() > -1e-10

    def test_unknown_kind(self):
        spec, ds, theta = random_instance(0)
        with pytest.raises(ValueError):
            fisher(theta, ds, "observed")


class TestClosedForms:
    def test_zero_parameters_give_uniform_loss_and_known_gradient(self):
        spec = ModelSpec("softmax-regression", 2, 3)
        theta = ParamVector.zeros(spec)
        x, y = np.array([0.5, -2.0]), 1
        assert loss(theta, (x, y)) == pytest.approx(np.log(3), abs=1e-15)
        expected = np.outer(np.full(3, 1 / 3) - np.eye(3)[y], np.r_[x, 1.0]).ravel()
        np.testing.assert_allclose(grad(theta, (x, y)), expected, atol=1e-15)

    def test_bias_only_optimum_matches_bisection(self):
        # one example at x = 0: only the biases move, b = (beta, -beta) with
        # 1 - sigmoid(2 beta) = l2 * beta
        l2 = 0.1
        f = lambda b: 1.0 - 1.0 / (1.0 + np.exp(-2 * b)) - l2 * b
        lo, hi = 0.0, 20.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if f(mid) > 0 else (lo, mid)
        beta = 0.5 * (lo + hi)
        spec = ModelSpec("softmax-regression", 1, 2, l2=l2)
        theta = train(Dataset(np.zeros((1, 1)), np.array([0]), 2), spec)
        W = theta.values.reshape(2, 2)
        np.testing.assert_allclose(W[:, 0], 0.0, atol=1e-12)
        np.testing.assert_allclose(W[:, 1], [beta, -beta], atol=1e-9)

    def test_symmetric_dataset_has_zero_bias(self):
        spec = ModelSpec("softmax-regression", 1, 2, l2=0.1)
        ds = Dataset(np.array([[1.0], [-1.0]]), np.array([1, 0]), 2)
        W = train(ds, spec).values.reshape(2, 2)
        np.testing.assert_allclose(W[:, 1], 0.0, atol=1e-10)
        assert W[1, 0] > 0 > W[0, 0]

    def test_probabilities_of_known_logits(self):
        spec = ModelSpec("softmax-regression", 1, 2, bias=False)
        theta = ParamVector(np.array([0.0, np.log(3.0)]), spec)
        np.testing.assert_allclose(predict_proba(theta, np.array([1.0])), [0.25, 0.75])


class TestTraining:
    def test_converges_and_is_deterministic(self, blobs, sr_spec):
        a = train(blobs[0], sr_spec, TrainConfig(seed=7))
        b = train(blobs[0], sr_spec, TrainConfig(seed=7))
        assert a.digest == b.digest
        assert np.linalg.norm(objective_grad(a, blobs[0])) <= 1e-8

    @pytest.mark.parametrize("opt", ["lbfgs", "gd"])
    def test_optimizers_agree_on_convex_problem(self, blobs, sr_spec, sr_theta, opt):
        cfg = TrainConfig(optimizer=opt, max_iters=20000, grad_tol=1e-8)
        other = train(blobs[0], sr_spec, cfg)
        np.testing.assert_allclose(other.values, sr_theta.values, atol=1e-6)

    def test_mlp_reaches_stationary_point(self, blobs, mlp_theta):
        assert np.linalg.norm(objective_grad(mlp_theta, blobs[0])) <= 1e-8

    def test_nonconvergence_raises(self, blobs, sr_spec):
        with pytest.raises(ConvergenceError) as info:
            train(blobs[0], sr_spec, TrainConfig(optimizer="gd", max_iters=3))
        assert info.value.grad_norm > 1e-8

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TrainConfig(weights=(0.5, 0.6))

    def test_dimension_mismatch(self, blobs):
        with pytest.raises(DimensionError):
            train(blobs[0], ModelSpec("softmax-regression", 7, 3))


class TestErrors:
    def test_dense_cap(self, blobs, sr_theta):
        with pytest.raises(CapExceededError, match="hvp"):
            exact_hessian(sr_theta, blobs[0], cap=10)
        with pytest.raises(CapExceededError):
            fisher(sr_theta, blobs[0], cap=10)

    def test_hvp_shape(self, blobs, sr_theta):
        with pytest.raises(DimensionError):
            hvp(sr_theta, blobs[0], np.ones(3))

    def test_nonfinite_logits(self):
        spec = ModelSpec("softmax-regression", 1, 2)
        theta = ParamVector(np.array([1e308, 0.0, -1e308, 0.0]), spec)
        with pytest.raises(NumericalError):
            loss(theta, (np.array([10.0]), 0))

    def test_param_vector_is_read_only_and_hashed(self, sr_theta):
        with pytest.raises(ValueError):
            sr_theta.values[0] = 1.0
        assert len(sr_theta.digest) == 32
        assert sr_theta.params_hash == sr_theta.digest.hex()

    def test_param_vector_length_checked(self, sr_spec):
        with pytest.raises(DimensionError):
            ParamVector(np.zeros(3), sr_spec)

    def test_mlp_needs_hidden(self):
        with pytest.raises(ValueError):
            ModelSpec("mlp-1hidden", 3, 2)


finite = st.floats(-3, 3, allow_nan=False)


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_probabilities_and_losses_are_valid(self, seed):
        spec, ds, theta = random_instance(seed)
        p = predict_proba(theta, ds.features)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(p >= 0)
        assert all(loss(theta, ds.example(i)) >= 0 for i in range(3))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), finite, finite)
    def test_hvp_is_linear(self, seed, a, b):
        spec, ds, theta = random_instance(seed)
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal((2, spec.n_params))
        np.testing.assert_allclose(hvp(theta, ds, a * u + b * v),
                                   a * hvp(theta, ds, u) + b * hvp(theta, ds, v), atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_softmax_hessian_is_symmetric_psd(self, seed):
        spec, ds, theta = random_instance(2 * seed)
        H = exact_hessian(theta, ds)
        np.testing.assert_allclose(H, H.T, atol=1e-12)
        assert np.linalg.eigvalsh(H).min() >= spec.l2 - 1e-10

    def test_blobs_are_deterministic(self):
        a, b = gaussian_blobs(20, 3, 2, seed=5), gaussian_blobs(20, 3, 2, seed=5)
        np.testing.assert_array_equal(a.features, b.features)
