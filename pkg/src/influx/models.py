"""Model families and their analytic derivatives.

Two families are supported:

``softmax-regression``
    Multiclass logistic regression. Parameters are a c x D weight matrix
    (D = d + 1 with bias, bias in the last column) flattened row-major.
``mlp-1hidden``
    ``softmax(W2 tanh(W1 x + b1) + b2)``, flattened as W1, b1, W2, b2.

The loss is the negative log-likelihood of the true class. Per-example
gradients never include the ridge term; the training objective and the
curvature do::

    L(theta) = sum_i w_i * loss_i(theta) + l2 / 2 * |theta|^2
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels
from .data import Dataset
from .errors import CapExceededError, DimensionError, NumericalError

FAMILIES = ("softmax-regression", "mlp-1hidden")
DEFAULT_DENSE_CAP = 5000


@dataclass(frozen=True)
class ModelSpec:
    family: str
    d: int
    c: int
    hidden: int | None = None
    bias: bool = True
    l2: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.d < 1 or self.c < 2:
            raise ValueError("need d >= 1 and c >= 2")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.family == "mlp-1hidden" and not self.hidden:
            raise ValueError("mlp-1hidden needs a hidden width")

    @property
    def n_params(self) -> int:
        b = 1 if self.bias else 0
        if self.family == "softmax-regression":
            return self.c * (self.d + b)
        h = self.hidden
        return h * (self.d + b) + self.c * (h + b)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "d": self.d,
            "c": self.c,
            "hidden": self.hidden,
            "bias": self.bias,
            "l2": self.l2,
        }


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat parameter vector tied to its ModelSpec."""

    values: np.ndarray
    spec: ModelSpec = field(compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if v.shape[0] != self.spec.n_params:
            raise DimensionError(
                f"parameter vector has length {v.shape[0]}, spec needs {self.spec.n_params}"
            )
        if not np.all(np.isfinite(v)):
            raise NumericalError("parameter vector has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    @cached_property
    def digest(self) -> bytes:
        """32-byte SHA-256 over the little-endian float64 parameters."""
        return hashlib.sha256(self.values.astype("<f8").tobytes()).digest()

    @property
    def params_hash(self) -> str:
        return self.digest.hex()

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(np.zeros(spec.n_params), spec)


def _check_dims(spec: ModelSpec, X: np.ndarray):
    if X.shape[1] != spec.d:
        raise DimensionError(f"features have dimension {X.shape[1]}, spec has d={spec.d}")


def _softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e /= e.sum(axis=1, keepdims=True)
    return e


def _log_softmax(z: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


# -- softmax regression -----------------------------------------------------


def _sr_weights(spec, theta):
    return theta.reshape(spec.c, spec.d + (1 if spec.bias else 0))


def _rowwise(A, B):
    """``A @ B.T`` with a reduction order that does not depend on the batch size.

    BLAS kernels may sum a row differently when it is part of a larger block;
    per-example gradients must be bit-identical however they are batched.
    """
    return np.einsum("nd,cd->nc", A, B, optimize=False)


def _sr_logits(spec, theta, X, rowwise=False):
    W = _sr_weights(spec, theta)
    with np.errstate(over="ignore", invalid="ignore"):
        z = _rowwise(X, W[:, : spec.d]) if rowwise else X @ W[:, : spec.d].T
    if spec.bias:
        z += W[:, spec.d]
    return z


# -- one-hidden-layer tanh MLP ----------------------------------------------


def _mlp_unpack(spec, theta):
    d, h, c, b = spec.d, spec.hidden, spec.c, spec.bias
    i = 0
    W1 = theta[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = theta[i : i + h] if b else np.zeros(h)
    i += h if b else 0
    W2 = theta[i : i + c * h].reshape(c, h)
    i += c * h
    b2 = theta[i : i + c] if b else np.zeros(c)
    return W1, b1, W2, b2


def _mlp_pack(spec, gW1, gb1, gW2, gb2):
    """Pack per-example (leading axis N) or summed blocks into flat rows."""
    lead = gW1.shape[:-2]
    parts = [gW1.reshape(lead + (-1,))]
    if spec.bias:
        parts.append(gb1)
    parts.append(gW2.reshape(lead + (-1,)))
    if spec.bias:
        parts.append(gb2)
    return np.concatenate(parts, axis=-1)


def _mlp_forward(spec, theta, X, rowwise=False):
    W1, b1, W2, b2 = _mlp_unpack(spec, theta)
    if rowwise:
        h1 = np.tanh(_rowwise(X, W1) + b1)
        return h1, _rowwise(h1, W2) + b2
    h1 = np.tanh(X @ W1.T + b1)
    z = h1 @ W2.T + b2
    return h1, z


def _mlp_backward(spec, theta, X, h1, dz):
    """Per-example gradients given dloss/dlogits rows ``dz``."""
    _, _, W2, _ = _mlp_unpack(spec, theta)
    da = _rowwise(dz, W2.T) * (1.0 - h1**2)
    gW1 = da[:, :, None] * X[:, None, :]
    gW2 = dz[:, :, None] * h1[:, None, :]
    return _mlp_pack(spec, gW1, da, gW2, dz)


def _mlp_hvp(spec, theta, X, y, w, v):
    W1, _, W2, _ = _mlp_unpack(spec, theta)
    V1, vb1, V2, vb2 = _mlp_unpack(spec, v)
    h1, z = _mlp_forward(spec, theta, X)
    p = _softmax(z)
    dz = p.copy()
    dz[np.arange(len(y)), y] -= 1.0
    dtanh = 1.0 - h1**2
    # forward R-pass
    ra1 = X @ V1.T + vb1
    rh1 = dtanh * ra1
    rz = rh1 @ W2.T + h1 @ V2.T + vb2
    rdz = p * (rz - np.einsum("ik,ik->i", p, rz)[:, None])
    # backward R-pass
    dh = dz @ W2
    rdh = rdz @ W2 + dz @ V2
    rda = rdh * dtanh - 2.0 * dh * h1 * rh1
    rdz_w = rdz * w[:, None]
    rda_w = rda * w[:, None]
    dz_w = dz * w[:, None]
    hW2 = rdz_w.T @ h1 + dz_w.T @ rh1
    hb2 = rdz_w.sum(axis=0)
    hW1 = rda_w.T @ X
    hb1 = rda_w.sum(axis=0)
    return _mlp_pack(spec, hW1, hb1, hW2, hb2)


def _mlp_fvp(spec, theta, X, w, v):
    """Model-Fisher (Gauss-Newton) product ``sum_i w_i J_i^T S_i J_i v``."""
    _, _, W2, _ = _mlp_unpack(spec, theta)
    V1, vb1, V2, vb2 = _mlp_unpack(spec, v)
    h1, z = _mlp_forward(spec, theta, X)
    p = _softmax(z)
    dtanh = 1.0 - h1**2
    rh1 = dtanh * (X @ V1.T + vb1)
    rz = rh1 @ W2.T + h1 @ V2.T + vb2
    u = p * (rz - np.einsum("ik,ik->i", p, rz)[:, None]) * w[:, None]
    da = (u @ W2) * dtanh
    return _mlp_pack(spec, da.T @ X, da.sum(axis=0), u.T @ h1, u.sum(axis=0))


# -- family dispatch on raw arrays -------------------------------------------


def logits(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    _check_dims(spec, X)
    if spec.family == "softmax-regression":
        return _sr_logits(spec, theta, X)
    return _mlp_forward(spec, theta, X)[1]


def probs(spec, theta, X):
    return _softmax(logits(spec, theta, X))


def per_example_losses(spec, theta, X, y):
    lp = _log_softmax(logits(spec, theta, X))
    return -lp[np.arange(len(y)), y]


def per_example_grads(spec, theta, X, y):
    """N x P matrix of loss gradients (no ridge term)."""
    _check_dims(spec, X)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if spec.family == "softmax-regression":
        p = _softmax(_sr_logits(spec, theta, X, rowwise=True))
        return kernels.softmax_grads(np.ascontiguousarray(X), p, y, spec.bias)
    h1, z = _mlp_forward(spec, theta, X, rowwise=True)
    dz = _softmax(z)
    dz[np.arange(len(y)), y] -= 1.0
    return _mlp_backward(spec, theta, X, h1, dz)


def data_hvp(spec, theta, X, y, w, v):
    """``sum_i w_i * Hess(loss_i) @ v``, analytic, without forming the Hessian."""
    _check_dims(spec, X)
    if spec.family == "softmax-regression":
        p = _softmax(_sr_logits(spec, theta, X))
        V = np.ascontiguousarray(_sr_weights(spec, v))
        return kernels.softmax_hvp(np.ascontiguousarray(X), p, w, V, spec.bias).ravel()
    return _mlp_hvp(spec, theta, X, y, w, v)


def data_hessian(spec, theta, X, y, w):
    _check_dims(spec, X)
    if spec.family == "softmax-regression":
        p = _softmax(_sr_logits(spec, theta, X))
        return kernels.softmax_hessian(np.ascontiguousarray(X), p, w, spec.bias)
    n_p = spec.n_params
    H = np.empty((n_p, n_p))
    e = np.zeros(n_p)
    for j in range(n_p):
        e[j] = 1.0
        H[:, j] = _mlp_hvp(spec, theta, X, y, w, e)
        e[j] = 0.0
    return 0.5 * (H + H.T)


class HessianClosure:
    """``v -> (C + l2 I) v`` with the forward pass cached.

    ``C`` is ``sum_i w_i Hess(loss_i)`` for ``basis="hessian"`` or the model
    Fisher for ``basis="fisher"``. For softmax regression both coincide (the
    loss Hessian does not depend on the label) and the probabilities are
    computed once, so repeated products only cost two matrix products each.
    """

    def __init__(self, theta: ParamVector, dataset: Dataset, weights=None,
                 basis: str = "hessian"):
        spec = theta.spec
        _check_dims(spec, dataset.features)
        if basis not in ("hessian", "fisher"):
            raise ValueError(f"unknown curvature basis {basis!r}")
        self.spec = spec
        self.basis = basis
        self.theta = theta.values
        self.X = np.ascontiguousarray(dataset.features)
        self.y = dataset.labels
        self.w = _weights(dataset, weights)
        self.n = dataset.n
        self.calls = 0
        if spec.family == "softmax-regression":
            self._p = _softmax(_sr_logits(spec, self.theta, self.X))

    def data_hvp(self, v, idx=None):
        """Curvature product without the ridge term, optionally on a minibatch."""
        spec = self.spec
        v = np.asarray(v, dtype=np.float64)
        X, y, w = self.X, self.y, self.w
        if idx is not None:
            X, y = X[idx], y[idx]
            w = np.full(len(idx), 1.0 / len(idx))
        if spec.family == "softmax-regression":
            p = self._p if idx is None else self._p[idx]
            V = np.ascontiguousarray(_sr_weights(spec, v))
            return kernels.softmax_hvp(np.ascontiguousarray(X), p, w, V, spec.bias).ravel()
        if self.basis == "fisher":
            return _mlp_fvp(spec, self.theta, X, w, v)
        return _mlp_hvp(spec, self.theta, X, y, w, v)

    def __call__(self, v):
        self.calls += 1
        return self.data_hvp(v) + self.spec.l2 * np.asarray(v)


def _weights(dataset: Dataset, weights):
    if weights is None:
        return np.full(dataset.n, 1.0 / dataset.n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dataset.n,):
        raise DimensionError(f"weights have shape {w.shape}, expected ({dataset.n},)")
    return w


def _as_example(z):
    x, y = z
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(1, -1), np.array([int(y)], dtype=np.int64)


# -- public operations on ParamVector ------------------------------------------


def loss(theta: ParamVector, z) -> float:
    """Negative log-probability of the true class of ``z = (x, y)``."""
    X, y = _as_example(z)
    return float(per_example_losses(theta.spec, theta.values, X, y)[0])


def grad(theta: ParamVector, z) -> np.ndarray:
    """Gradient of the loss of ``z`` (ridge term excluded)."""
    X, y = _as_example(z)
    return per_example_grads(theta.spec, theta.values, X, y)[0]


def predict_proba(theta: ParamVector, x) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    p = probs(theta.spec, theta.values, X.reshape(1, -1) if single else X)
    return p[0] if single else p


def objective(theta: ParamVector, dataset: Dataset, weights=None) -> float:
    spec = theta.spec
    w = _weights(dataset, weights)
    ls = per_example_losses(spec, theta.values, dataset.features, dataset.labels)
    return float(w @ ls + 0.5 * spec.l2 * theta.values @ theta.values)


def objective_grad(theta: ParamVector, dataset: Dataset, weights=None) -> np.ndarray:
    spec = theta.spec
    w = _weights(dataset, weights)
    G = per_example_grads(spec, theta.values, dataset.features, dataset.labels)
    return w @ G + spec.l2 * theta.values


def hvp(theta: ParamVector, dataset: Dataset, v, weights=None) -> np.ndarray:
    """Objective Hessian-vector product, ridge term included."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (theta.spec.n_params,):
        raise DimensionError(f"vector has shape {v.shape}, expected ({theta.spec.n_params},)")
    spec = theta.spec
    w = _weights(dataset, weights)
    return data_hvp(spec, theta.values, dataset.features, dataset.labels, w, v) + spec.l2 * v


def _cap_check(spec, cap, what):
    if spec.n_params > cap:
        raise CapExceededError(
            f"{what} would be {spec.n_params}x{spec.n_params} (cap {cap}); "
            "use the hvp path instead"
        )


def exact_hessian(theta: ParamVector, dataset: Dataset, weights=None,
                  cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Dense objective Hessian, ridge term included."""
    spec = theta.spec
    _cap_check(spec, cap, "exact Hessian")
    w = _weights(dataset, weights)
    H = data_hessian(spec, theta.values, dataset.features, dataset.labels, w)
    H[np.diag_indices_from(H)] += spec.l2
    return H


def fisher(theta: ParamVector, dataset: Dataset, kind: str = "model", weights=None,
           cap: int = DEFAULT_DENSE_CAP) -> np.ndarray:
    """Fisher information matrix (no ridge term).

    ``kind="model"`` takes the expectation of score outer products over the
    model's own predictive distribution for every training input;
    ``kind="empirical"`` uses the observed labels, ``sum_i w_i g_i g_i^T``.
    """
    spec = theta.spec
    _cap_check(spec, cap, "Fisher matrix")
    w = _weights(dataset, weights)
    X, y = dataset.features, dataset.labels
    if kind == "empirical":
        G = per_example_grads(spec, theta.values, X, y)
        return (G * w[:, None]).T @ G
    if kind != "model":
        raise ValueError(f"unknown Fisher kind {kind!r}")
    p = probs(spec, theta.values, X)
    F = np.zeros((spec.n_params, spec.n_params))
    for k in range(spec.c):
        Gk = per_example_grads(spec, theta.values, X, np.full(dataset.n, k))
        Gk *= np.sqrt(w * p[:, k])[:, None]
        F += Gk.T @ Gk
    return F


def init_params(spec: ModelSpec, seed: int = 0) -> ParamVector:
    """Zeros for softmax regression; small Glorot-scaled weights for the MLP."""
    if spec.family == "softmax-regression":
        return ParamVector.zeros(spec)
    rng = np.random.default_rng(seed)
    h = spec.hidden
    W1 = rng.normal(0.0, 1.0 / np.sqrt(spec.d), (h, spec.d))
    W2 = rng.normal(0.0, 1.0 / np.sqrt(h), (spec.c, h))
    b1, b2 = np.zeros(h), np.zeros(spec.c)
    return ParamVector(_mlp_pack(spec, W1, b1, W2, b2), spec)
