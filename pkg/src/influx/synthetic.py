"""Synthetic datasets used by the test suite and the acceptance checks."""

from __future__ import annotations

import numpy as np

from .data import Dataset

OUTLIER_SEED = 1729


def gaussian_blobs(n: int, d: int, c: int, seed: int = 0, sep: float = 2.0,
                   noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters with class means drawn on a sphere of radius ``sep``."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((c, d))
    means *= sep / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.arange(n) % c
    rng.shuffle(y)
    X = means[y] + noise * rng.standard_normal((n, d))
    return Dataset(X, y, c)


def flip_outliers(dataset: Dataset, m: int = 5) -> tuple[Dataset, np.ndarray]:
    """Relabel the ``m`` points farthest from their class mean to the next class.

    Returns the new dataset and the indices that were flipped.
    """
    X, y, c = dataset.features, dataset.labels.copy(), dataset.c
    means = np.stack([X[y == k].mean(axis=0) for k in range(c)])
    dist = np.linalg.norm(X - means[y], axis=1)
    idx = np.lexsort((np.arange(dataset.n), -dist))[:m]
    y[idx] = (y[idx] + 1) % c
    return Dataset(X, y, c), np.sort(idx)


def outlier_benchmark(n_train: int = 300, n_test: int = 100, d: int = 5, c: int = 3,
                      m: int = 5, seed: int = OUTLIER_SEED):
    """Train/test blobs with ``m`` label-flipped outliers in the training split."""
    full = gaussian_blobs(n_train + n_test, d, c, seed=seed)
    train = full.subset(np.arange(n_train))
    test = full.subset(np.arange(n_train, n_train + n_test))
    train, flipped = flip_outliers(train, m)
    return train, test, flipped


def decaying_features(n: int, d: int, c: int, seed: int = 0, decay: float = 0.7,
                      signal: float = 1.5) -> Dataset:
    """Linear-softmax data whose feature scales decay geometrically.

    Gradients ``(p - e_y) (x) [x; 1]`` inherit the decaying spectrum, which is
    what gradient-PCA projections rely on.
    """
    rng = np.random.default_rng(seed)
    scales = decay ** np.arange(d)
    X = rng.standard_normal((n, d)) * scales
    W = rng.standard_normal((c, d)) * signal
    logits = X @ W.T
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    y = np.array([rng.choice(c, p=pi) for pi in p])
    return Dataset(X, y, c)
