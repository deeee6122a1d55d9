import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from influx.data import Dataset
from influx.evaluation import (approximation_metrics, compare_scores, influence_set_stats,
                               knn_indices, knn_overlap, loo_many, loo_retrain, ndcg_at_k,
                               predicted_removal_delta, worker_count)
from influx.gradcache import build_grad_cache
from influx.influence import ExplanationSet, influence_all
from influx.models import ModelSpec, ParamVector, loss
from influx.solvers import CurvatureOperator, s_test
from influx.synthetic import gaussian_blobs
from influx.training import TrainConfig, train


def explanation(indices, k=1):
    idx = np.asarray(indices)
    return ExplanationSet(None, idx, np.zeros(len(idx)), k, "positive")


class TestMetrics:
    def test_identical_scores(self):
        x = np.array([0.3, -1.0, 2.0, 0.1])
        rep = approximation_metrics(x, x, ks=(2, 4), self_influence=True)
        assert rep.pearson == pytest.approx(1.0) and rep.spearman == pytest.approx(1.0)
        assert rep.ndcg_at_k == {2: 1.0, 4: 1.0} and rep.self_mse == 0.0 and rep.n_scored == 4

    def test_reversed_order_hand_evaluated(self):
        l3 = np.log2(3.0)
        want = (1 + 2 / l3 + 3 / 2) / (3 + 2 / l3 + 1 / 2)
        got = ndcg_at_k(np.array([1.0, 2.0, 3.0]), np.array([3.0, 2.0, 1.0]), 3)
        assert got == pytest.approx(want, rel=1e-14)
        assert got == pytest.approx(0.7900, abs=1e-4)

    def test_affine_approximation(self):
        exact = np.array([1.0, -2.0, 0.5, 4.0])
        rep = approximation_metrics(2 * exact + 5, exact, self_influence=True, ks=(3,))
        assert rep.pearson == pytest.approx(1.0, abs=1e-15)
        assert rep.self_mse == pytest.approx(np.mean((exact + 5) ** 2), rel=1e-15)

    def test_matches_scipy_definitions(self):
        rng = np.random.default_rng(0)
        a, e = rng.standard_normal((2, 30))
        rep = approximation_metrics(a, e)
        assert rep.pearson == pytest.approx(stats.pearsonr(a, e).statistic, abs=1e-12)
        assert rep.spearman == pytest.approx(stats.spearmanr(a, e).statistic, abs=1e-12)
        assert rep.self_mse is None

    def test_spearman_matches_rank_formula(self):
        # no ties: rho = 1 - 6 sum d^2 / (n (n^2 - 1))
        rng = np.random.default_rng(1)
        a, e = rng.standard_normal((2, 40))
        d = np.argsort(np.argsort(a)) - np.argsort(np.argsort(e))
        rho = 1 - 6 * np.sum(d ** 2) / (40 * (40 ** 2 - 1))
        assert approximation_metrics(a, e).spearman == pytest.approx(rho, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError, match="constant"):
            approximation_metrics(np.array([1.0, 2.0]), np.array([3.0, 3.0]))
        with pytest.raises(ValueError):
            approximation_metrics(np.array([1.0]), np.array([1.0]))
        with pytest.raises(ValueError):
            ndcg_at_k(np.ones(3), np.arange(3.0), 4)

    def test_compare_scores_adds_self_mse(self):
        rep = compare_scores(np.array([1.0, 2.0]), np.array([1.0, 3.0]), [1.0, 1.0], [0.0, 1.0], ks=(2,))
        assert rep.self_mse == 0.5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3), st.integers(1, 20))
    def test_invariances(self, seed, scale, k):
        rng = np.random.default_rng(seed)
        exact = rng.standard_normal(20)
        approx = exact + 0.3 * rng.standard_normal(20)
        assert ndcg_at_k(scale * approx, exact, k) == pytest.approx(ndcg_at_k(approx, exact, k))
        base = approximation_metrics(approx, exact).spearman
        mono = approximation_metrics(np.exp(approx) * scale - 3.0, exact).spearman
        assert mono == pytest.approx(base, abs=1e-12)
        rep = approximation_metrics(approx, exact, ks=(k,))
        assert -1 <= rep.pearson <= 1 and -1 <= rep.spearman <= 1 and 0 <= rep.ndcg_at_k[k] <= 1


def convex_instance(seed=1, n=200):
    ds = gaussian_blobs(n, 10, 3, seed=seed, sep=1.0)
    z = gaussian_blobs(10, 10, 3, seed=seed + 100, sep=1.0).example(0)
    spec = ModelSpec("softmax-regression", 10, 3, l2=1e-3)
    theta = train(ds, spec)
    op = CurvatureOperator.from_model(theta, ds, 1e-3, dense=True)
    sc = influence_all(s_test(theta, ds, z, op=op), build_grad_cache(theta, ds))
    return ds, spec, theta, z, sc


class TestLOO:
    def test_zero_gradient_point_leaves_parameters(self):
        rng = np.random.default_rng(2)
        X = np.vstack([rng.standard_normal((20, 2)), np.zeros((1, 2))])
        ds = Dataset(X, np.r_[rng.integers(0, 2, 20), 0], 2)
        spec = ModelSpec("softmax-regression", 2, 2, bias=False, l2=0.1)
        cfg = TrainConfig()
        theta = train(ds, spec, cfg)
        res = loo_retrain(ds, spec, cfg, 20, ds.example(0), theta_star=theta)
        assert res.delta_param_norm <= 10 * cfg.grad_tol

    def test_fields_follow_definitions(self):
        ds, spec, theta, z, sc = convex_instance(n=60)
        res = loo_retrain(ds, spec, TrainConfig(), 5, z, sc, theta)
        w = np.full(ds.n, 1 / ds.n)
        w[5] = 0.0
        theta_i = train(ds, spec, init=theta, weights=w)
        assert res.delta_test_loss == pytest.approx(loss(theta_i, z) - loss(theta, z), abs=1e-12)
        assert res.delta_param_norm == pytest.approx(np.linalg.norm(theta_i.values - theta.values))
        assert res.predicted_delta == sc.scores[5] / ds.n
        assert res.ratio_param == pytest.approx(res.delta_test_loss / res.delta_param_norm)
        assert res.ratio_rss == pytest.approx(res.delta_test_loss / res.rss_delta_loss)

    def test_predicted_removal_sign(self):
        # removing a helpful point (positive score) raises the test loss
        assert predicted_removal_delta(2.0, 4) == 0.5

    def test_random_removals_correlate(self):
        ds, spec, theta, z, sc = convex_instance()
        idx = np.random.default_rng(3).choice(ds.n, 50, replace=False)
        res = loo_many(ds, spec, TrainConfig(), idx, z, sc, theta)
        pred = [r.predicted_delta for r in res]
        act = [r.delta_test_loss for r in res]
        assert np.corrcoef(pred, act)[0, 1] >= 0.9

    def test_sign_agreement_on_top_points(self):
        ds, spec, theta, z, sc = convex_instance(seed=4)
        idx = np.argsort(-np.abs(sc.scores), kind="stable")[:20]
        res = loo_many(ds, spec, TrainConfig(), idx, z, sc, theta)
        agree = np.mean([np.sign(r.predicted_delta) == np.sign(r.delta_test_loss) for r in res])
        assert agree >= 0.9

    def test_threads_do_not_change_results(self):
        ds, spec, theta, z, sc = convex_instance(n=60)
        a = loo_many(ds, spec, TrainConfig(), [1, 2, 3, 4], z, sc, theta, threads=1)
        b = loo_many(ds, spec, TrainConfig(), [1, 2, 3, 4], z, sc, theta, threads=3)
        assert a == b

    def test_worker_count_env(self, monkeypatch):
        monkeypatch.setenv("INFLUX_THREADS", "3")
        assert worker_count() == 3


class TestSetStats:
    def test_cardinality(self, blobs, sr_theta):
        ds = blobs[0]
        unique = [explanation([i]) for i in range(50)]
        assert influence_set_stats(unique, sr_theta, ds).cardinality == 50
        same = [explanation([7]) for _ in range(100)]
        st_ = influence_set_stats(same, sr_theta, ds)
        p = np.exp(-loss(sr_theta, ds.example(7)))
        assert st_.cardinality == 1 and st_.mean_prob == pytest.approx(p, rel=1e-12)
        assert st_.std_prob == 0.0 and st_.dispersion == "std"

    def test_errors(self, blobs, sr_theta):
        with pytest.raises(ValueError):
            influence_set_stats([], sr_theta, blobs[0])
        with pytest.raises(ValueError, match="k"):
            influence_set_stats([explanation([1]), explanation([1, 2], k=2)], sr_theta, blobs[0])


class TestKNN:
    def test_known_neighbours_and_ties(self):
        ds = Dataset(np.array([[0.0], [1.0], [-1.0], [3.0]]), [0, 0, 1, 1])
        np.testing.assert_array_equal(knn_indices(ds, [0.1], 3), [0, 1, 2])
        np.testing.assert_array_equal(knn_indices(ds, [0.0], 3), [0, 1, 2])

    def test_overlap_extremes(self):
        ds = Dataset(np.arange(10.0)[:, None], np.zeros(10, dtype=int), 2)
        nn, full = knn_overlap(ds, [0.0], 3, explanation([2, 0, 1], k=3))
        assert full == 1.0
        _, none = knn_overlap(ds, [0.0], 3, explanation([7, 8, 9], k=3))
        assert none == 0.0

    def test_k_checked(self):
        ds = Dataset(np.zeros((2, 1)), [0, 1])
        with pytest.raises(ValueError):
            knn_indices(ds, [0.0], 3)
