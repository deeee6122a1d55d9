import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_spd
from influx.errors import LissaDivergenceError, NotPositiveDefiniteError, SolverError
from influx.models import exact_hessian, grad
from influx.solvers import (CurvatureOperator, SolverOptions, estimate_scale, s_test, solve,
                            solve_many)


def op_of(M, damping=0.0):
    return CurvatureOperator.from_matrix(np.asarray(M, dtype=float), damping)


class TestDirect:
    def test_diagonal(self):
        x, rep = solve(op_of(np.diag([2.0, 4.0])), np.array([2.0, 4.0]), "direct")
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-15)
        assert rep.converged and rep.residual_norm <= 1e-10

    def test_damping_is_added(self):
        x, _ = solve(op_of(np.diag([1.0, 3.0]), damping=1.0), np.array([2.0, 4.0]), "direct")
        np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-15)

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefiniteError, match="damping"):
            solve(op_of(np.diag([1.0, -1.0])), np.ones(2), "direct")

    def test_needs_matrix(self):
        op = CurvatureOperator(kind="hvp-closure", damping=0.0, dim=2, closure=lambda v: v)
        with pytest.raises(SolverError):
            solve(op, np.ones(2), "direct")

    def test_zero_rhs(self):
        x, rep = solve(op_of(np.eye(3)), np.zeros(3), "cg")
        np.testing.assert_array_equal(x, 0.0)
        assert rep.converged

    def test_nonfinite_rhs(self):
        with pytest.raises(SolverError):
            solve(op_of(np.eye(2)), np.array([np.inf, 0.0]))

    def test_many_matches_single(self):
        rng = np.random.default_rng(2)
        op = op_of(random_spd(rng, 8), 1e-3)
        V = rng.standard_normal((5, 8))
        V[2] = 0.0
        X, reps = solve_many(op, V)
        for k in range(5):
            np.testing.assert_allclose(X[k], solve(op, V[k])[0], atol=1e-12)
        assert len(reps) == 5 and reps[2].iterations == 0


class TestCG:
    def test_matches_direct_on_random_spd(self):
        rng = np.random.default_rng(0)
        M = random_spd(rng, 20, cond=50.0)
        v = rng.standard_normal(20)
        oracle = scipy.linalg.solve(M, v, assume_a="pos")
        x, rep = solve(op_of(M), v, "cg", tol=1e-10)
        assert np.max(np.abs(x - oracle)) <= 1e-8
        assert rep.converged and rep.residual_norm <= 1e-10

    def test_history_is_non_increasing(self):
        rng = np.random.default_rng(1)
        M = random_spd(rng, 30, cond=1e4)
        _, rep = solve(op_of(M), rng.standard_normal(30), "cg", tol=1e-12)
        h = np.array(rep.history)
        assert np.all(np.diff(h) <= 0)

    def test_negative_curvature(self):
        with pytest.raises(NotPositiveDefiniteError):
            solve(op_of(np.diag([1.0, -2.0])), np.ones(2), "cg")

    def test_maxiter_reports_not_converged(self):
        rng = np.random.default_rng(3)
        M = random_spd(rng, 40, cond=1e6)
        _, rep = solve(op_of(M), rng.standard_normal(40), "cg", tol=1e-14, maxiter=3)
        assert rep.iterations == 3 and not rep.converged


class TestLissa:
    def test_half_identity_converges_geometrically(self):
        v = np.array([1.0, -2.0, 0.5])
        x, rep = solve(op_of(0.5 * np.eye(3)), v, "lissa", lissa_scale=1.0, lissa_iters=60)
        np.testing.assert_allclose(x, 2 * v, rtol=1e-8)
        assert rep.converged and rep.iterations <= 60
        h = np.array(rep.history)
        np.testing.assert_allclose(h[1:] / h[:-1], 0.5, rtol=1e-9)

    def test_linear_rate_with_estimated_scale(self):
        rng = np.random.default_rng(4)
        M = random_spd(rng, 15, cond=20.0)
        _, rep = solve(op_of(M), rng.standard_normal(15), "lissa", tol=1e-10)
        assert rep.converged
        h = np.array(rep.history)
        ratios = h[50:] / h[49:-1]
        # constant factor per step once the slowest eigen-direction dominates
        assert ratios.max() < 1.0
        assert np.ptp(ratios[-20:]) < 1e-3

    def test_divergence(self):
        with pytest.raises(LissaDivergenceError, match="scale"):
            solve(op_of(np.diag([1.0, 10.0])), np.ones(2), "lissa", lissa_scale=2.0)

    def test_minibatch_mode_is_seeded(self, blobs, sr_theta):
        op = CurvatureOperator.from_model(sr_theta, blobs[0], 1e-2)
        g = grad(sr_theta, blobs[1].example(0))
        kw = dict(lissa_iters=300, batch_size=20, repeats=2, seed=5, lissa_scale=5.0)
        a, _ = solve(op, g, "lissa", **kw)
        b, _ = solve(op, g, "lissa", **kw)
        np.testing.assert_array_equal(a, b)
        exact, _ = solve(CurvatureOperator.from_model(sr_theta, blobs[0], 1e-2, dense=True), g)
        assert np.corrcoef(a, exact)[0, 1] > 0.9


class TestEstimateScale:
    def test_two_by_two(self):
        assert estimate_scale(op_of(np.diag([1.0, 3.0])), 50) == pytest.approx(3.3, rel=0.05)

    @pytest.mark.parametrize("lam", [0.0, 0.1, 2.0])
    def test_identity(self, lam):
        assert estimate_scale(op_of(np.eye(4), lam)) == pytest.approx(1.1 * (1 + lam), rel=1e-12)

    def test_zero_matrix(self):
        assert estimate_scale(op_of(np.zeros((3, 3)), 0.1)) == pytest.approx(0.11, rel=1e-12)

    def test_iters_checked(self):
        with pytest.raises(ValueError):
            estimate_scale(op_of(np.eye(2)), 0)


class TestSTest:
    def test_identity_operator_returns_gradient(self, blobs, sr_theta):
        op = op_of(np.zeros((sr_theta.spec.n_params,) * 2), 1.0)
        z = blobs[1].example(2)
        s = s_test(sr_theta, blobs[0], z, op=op)
        np.testing.assert_allclose(s.values, grad(sr_theta, z), atol=1e-15)

    @pytest.mark.parametrize("method", ["direct", "cg", "lissa"])
    def test_matches_direct_oracle(self, blobs, sr_theta, method):
        z = blobs[1].example(0)
        H = exact_hessian(sr_theta, blobs[0])
        oracle = scipy.linalg.solve(H + 1e-3 * np.eye(len(H)), grad(sr_theta, z), assume_a="pos")
        s = s_test(sr_theta, blobs[0], z, method, damping=1e-3,
                   opts=SolverOptions(tol=1e-12, lissa_iters=200_000))
        np.testing.assert_allclose(s.values, oracle, rtol=0, atol=1e-8 * np.abs(oracle).max())
        assert s.params_hash == sr_theta.digest and s.damping == 1e-3

    def test_equal_gradients_give_identical_vectors(self, blobs, sr_theta):
        x, y = blobs[1].example(1)
        a = s_test(sr_theta, blobs[0], (x, y), "cg")
        b = s_test(sr_theta, blobs[0], (x.copy(), y), "cg")
        np.testing.assert_array_equal(a.values, b.values)

    def test_fisher_basis_equals_hessian_for_softmax(self, blobs, sr_theta):
        z = blobs[1].example(3)
        h = s_test(sr_theta, blobs[0], z, "cg", basis="hessian", opts=SolverOptions(tol=1e-12))
        f = s_test(sr_theta, blobs[0], z, "cg", basis="fisher", opts=SolverOptions(tol=1e-12))
        np.testing.assert_allclose(f.values, h.values, atol=1e-9 * np.abs(h.values).max())

    def test_mlp_closure_matches_dense(self, blobs, mlp_theta):
        z = blobs[1].example(0)
        dense = s_test(mlp_theta, blobs[0], z, "direct")
        cg = s_test(mlp_theta, blobs[0], z, "cg", opts=SolverOptions(tol=1e-12))
        np.testing.assert_allclose(cg.values, dense.values, atol=1e-8 * np.abs(dense.values).max())
        assert dense.damping == 0.1


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 12))
    def test_symmetry_through_the_solve(self, seed, p):
        rng = np.random.default_rng(seed)
        op = op_of(random_spd(rng, p, cond=100.0), 1e-3)
        a, b = rng.standard_normal((2, p))
        assert a @ solve(op, b)[0] == pytest.approx(b @ solve(op, a)[0], abs=1e-8)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 20))
    def test_solvers_agree_when_converged(self, seed, p):
        rng = np.random.default_rng(seed)
        op = op_of(random_spd(rng, p, cond=30.0), 1e-3)
        v = rng.standard_normal(p)
        xs = {}
        for m in ("direct", "cg", "lissa"):
            x, rep = solve(op, v, m, tol=1e-10)
            assert rep.converged and rep.residual_norm <= 1e-10
            xs[m] = x
        for m in ("cg", "lissa"):
            assert np.linalg.norm(xs[m] - xs["direct"]) <= 1e-6 * np.linalg.norm(xs["direct"])
