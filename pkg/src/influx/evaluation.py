"""Approximation metrics, leave-one-out retraining, influence-set statistics, k-NN baseline."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .data import Dataset
from .influence import ExplanationSet, InfluenceScores
from .models import ModelSpec, ParamVector, loss, per_example_losses, predict_proba
from .training import TrainConfig, train


@dataclass(frozen=True)
class MetricReport:
    pearson: float
    spearman: float
    ndcg_at_k: dict
    self_mse: float | None
    n_scored: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ndcg_at_k"] = {str(k): v for k, v in self.ndcg_at_k.items()}
        return d


def ndcg_at_k(approx, exact, k: int) -> float:
    """NDCG@k of the ranking by ``|approx|`` against relevance ``|exact| / max|exact|``.

    Linear gains, ``log2(rank + 1)`` discount; ties in ``approx`` go to the
    lower index.
    """
    approx = np.abs(np.asarray(approx, dtype=np.float64))
    rel = np.abs(np.asarray(exact, dtype=np.float64))
    n = rel.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    top = rel.max()
    if top == 0:
        return 1.0
    rel = rel / top
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    got = np.lexsort((np.arange(n), -approx))[:k]
    ideal = np.sort(rel)[::-1][:k]
    return float((rel[got] @ disc) / (ideal @ disc))


def approximation_metrics(approx, exact, ks=(10,), self_influence: bool = False) -> MetricReport:
    """Correlation and ranking quality of approximate against exact scores.

    ``self_mse`` is filled only when ``self_influence`` flags both vectors as
    self-influence scores.
    """
    approx = np.asarray(getattr(approx, "scores", approx), dtype=np.float64)
    exact = np.asarray(getattr(exact, "scores", exact), dtype=np.float64)
    if approx.shape != exact.shape or approx.ndim != 1 or approx.shape[0] < 2:
        raise ValueError("need two equal-length score vectors with at least 2 entries")
    if np.ptp(exact) == 0:
        raise ValueError("exact scores are constant; correlation is undefined")
    if np.ptp(approx) == 0:
        pearson = spearman = 0.0
    else:
        pearson = float(np.corrcoef(approx, exact)[0, 1])
        spearman = float(stats.spearmanr(approx, exact).statistic)
    ndcg = {int(k): ndcg_at_k(approx, exact, int(k)) for k in ks}
    mse = float(np.mean((approx - exact) ** 2)) if self_influence else None
    return MetricReport(pearson, spearman, ndcg, mse, int(approx.shape[0]))


@dataclass(frozen=True)
class LOOResult:
    removed_idx: int
    delta_test_loss: float
    delta_param_norm: float
    rss_delta_loss: float
    predicted_delta: float
    ratio_param: float
    ratio_rss: float

    def to_dict(self) -> dict:
        return asdict(self)


def predicted_removal_delta(score: float, n: int) -> float:
    """First-order test-loss change from dropping a point (weight change -1/n)."""
    return float(score) / n


def _score_of(scores, i):
    if scores is None:
        return float("nan")
    s = getattr(scores, "scores", scores)
    return float(np.asarray(s)[i])


def loo_retrain(dataset: Dataset, spec: ModelSpec, cfg: TrainConfig, i: int, z_test,
                scores=None, theta_star: ParamVector | None = None) -> LOOResult:
    """Retrain with ``w_i = 0`` (other weights stay ``1/n``), warm-started from ``theta_star``."""
    if theta_star is None:
        theta_star = train(dataset, spec, cfg)
    n = dataset.n
    w = np.full(n, 1.0 / n)
    w[i] = 0.0
    theta_i = train(dataset, spec, cfg, init=theta_star, weights=w)
    d_test = loss(theta_i, z_test) - loss(theta_star, z_test)
    d_theta = float(np.linalg.norm(theta_i.values - theta_star.values))
    X, y = dataset.features, dataset.labels
    dl = per_example_losses(spec, theta_i.values, X, y) - per_example_losses(spec, theta_star.values, X, y)
    rss = float(np.sqrt(dl @ dl))
    return LOOResult(
        removed_idx=int(i),
        delta_test_loss=float(d_test),
        delta_param_norm=d_theta,
        rss_delta_loss=rss,
        predicted_delta=predicted_removal_delta(_score_of(scores, i), n),
        ratio_param=float(d_test / d_theta) if d_theta > 0 else float("nan"),
        ratio_rss=float(d_test / rss) if rss > 0 else float("nan"),
    )


def worker_count() -> int:
    env = os.environ.get("INFLUX_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def loo_many(dataset, spec, cfg, indices, z_test, scores=None, theta_star=None,
             threads: int | None = None) -> list[LOOResult]:
    """Independent leave-one-out retrainings; results keep the order of ``indices``."""
    if theta_star is None:
        theta_star = train(dataset, spec, cfg)
    threads = threads or worker_count()

    def one(i):
        return loo_retrain(dataset, spec, cfg, int(i), z_test, scores, theta_star)

    if threads == 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, indices))


@dataclass(frozen=True)
class SetStats:
    cardinality: int
    mean_prob: float
    std_prob: float
    dispersion: str = "std"


def influence_set_stats(explanations, theta: ParamVector, dataset: Dataset) -> SetStats:
    """Size of the union of selected indices and the true-label probability of its members."""
    explanations = list(explanations)
    if not explanations:
        raise ValueError("no explanation sets given")
    ks = {e.k for e in explanations}
    if len(ks) != 1:
        raise ValueError(f"explanation sets mix k values {sorted(ks)}")
    union = np.unique(np.concatenate([np.asarray(e.indices, dtype=np.int64) for e in explanations]))
    p = predict_proba(theta, dataset.features[union])
    pt = p[np.arange(union.shape[0]), dataset.labels[union]]
    return SetStats(int(union.shape[0]), float(pt.mean()), float(pt.std()))


def knn_indices(dataset: Dataset, x_test, k: int) -> np.ndarray:
    """Exact k nearest training inputs by squared Euclidean distance, ties to the lower index."""
    if not 1 <= k <= dataset.n:
        raise ValueError(f"k={k} must be in [1, {dataset.n}]")
    diff = dataset.features - np.asarray(x_test, dtype=np.float64)
    d2 = np.einsum("ij,ij->i", diff, diff)
    return np.lexsort((np.arange(dataset.n), d2))[:k]


def knn_overlap(dataset: Dataset, x_test, k: int, explanation: ExplanationSet):
    """``(knn indices, |knn & explanation| / k)``."""
    nn = knn_indices(dataset, x_test, k)
    chosen = set(int(i) for i in explanation.indices)
    overlap = sum(1 for i in nn if int(i) in chosen) / k
    return nn, overlap


def compare_scores(approx: InfluenceScores, exact: InfluenceScores, approx_self=None,
                   exact_self=None, ks=(10,)) -> MetricReport:
    """Metric report for one projection/solver run, with self-influence MSE when given."""
    rep = approximation_metrics(approx, exact, ks)
    if approx_self is not None and exact_self is not None:
        a = np.asarray(approx_self, dtype=np.float64)
        e = np.asarray(exact_self, dtype=np.float64)
        rep = MetricReport(rep.pearson, rep.spearman, rep.ndcg_at_k,
                           float(np.mean((a - e) ** 2)), rep.n_scored)
    return rep
