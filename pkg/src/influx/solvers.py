"""Damped inverse-curvature solves: direct Cholesky, conjugate gradient, LiSSA."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from .data import Dataset
from .errors import LissaDivergenceError, NotPositiveDefiniteError, SolverError
from .models import (
    DEFAULT_DENSE_CAP,
    HessianClosure,
    ParamVector,
    exact_hessian,
    fisher,
    grad,
)

METHODS = ("direct", "cg", "lissa")
KINDS = ("exact-matrix", "hvp-closure", "projected-matrix")
BASES = ("hessian", "fisher")

DEFAULT_DAMPING = {"softmax-regression": 1e-3, "mlp-1hidden": 1e-1}


@dataclass(eq=False)
class CurvatureOperator:
    """Damped curvature ``v -> (C + damping * I) v``.

    Matrix kinds hold the undamped ``C``; ``hvp-closure`` holds a callable
    computing ``C v``. The operator is treated as immutable once built; the
    Cholesky factor of matrix kinds is computed lazily and reused.
    """

    kind: str
    damping: float
    dim: int
    basis: str = "hessian"
    matrix: np.ndarray | None = None
    closure: Callable | None = None
    sampler: Callable | None = None
    params_hash: bytes | None = None
    _factor: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        if not self.damping >= 0:
            raise ValueError("damping must be >= 0")
        if self.kind == "hvp-closure":
            if self.closure is None:
                raise ValueError("hvp-closure operator needs a closure")
        else:
            M = np.asarray(self.matrix, dtype=np.float64)
            if M.shape != (self.dim, self.dim):
                raise ValueError(f"matrix shape {M.shape} != ({self.dim}, {self.dim})")
            M = M.copy()
            M.setflags(write=False)
            self.matrix = M

    @classmethod
    def from_matrix(cls, M, damping: float = 0.0, basis: str = "hessian",
                    kind: str = "exact-matrix", params_hash=None) -> "CurvatureOperator":
        M = np.asarray(M, dtype=np.float64)
        return cls(kind=kind, damping=float(damping), dim=M.shape[0], basis=basis,
                   matrix=M, params_hash=params_hash)

    @classmethod
    def from_model(cls, theta: ParamVector, dataset: Dataset, damping: float | None = None,
                   basis: str = "hessian", dense: bool = False, weights=None,
                   cap: int = DEFAULT_DENSE_CAP) -> "CurvatureOperator":
        """Objective curvature at ``theta`` (ridge term included in both bases)."""
        spec = theta.spec
        if damping is None:
            damping = DEFAULT_DAMPING[spec.family]
        if dense:
            if basis == "hessian":
                M = exact_hessian(theta, dataset, weights=weights, cap=cap)
            else:
                M = fisher(theta, dataset, "model", weights=weights, cap=cap)
                M[np.diag_indices_from(M)] += spec.l2
            return cls.from_matrix(M, damping, basis, params_hash=theta.digest)
        hc = HessianClosure(theta, dataset, weights, basis=basis)
        l2 = spec.l2

        def sampler(v, rng, batch_size):
            idx = rng.choice(dataset.n, size=min(batch_size, dataset.n), replace=False)
            return hc.data_hvp(v, np.sort(idx)) + l2 * v

        return cls(kind="hvp-closure", damping=float(damping), dim=spec.n_params,
                   basis=basis, closure=hc, sampler=sampler, params_hash=theta.digest)

    def undamped(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.closure is not None:
            return np.asarray(self.closure(v), dtype=np.float64)
        return self.matrix @ v

    def matvec(self, v):
        v = np.asarray(v, dtype=np.float64)
        return self.undamped(v) + self.damping * v

    __call__ = matvec

    def dense(self) -> np.ndarray:
        if self.matrix is None:
            raise SolverError("operator has no explicit matrix; use cg or lissa")
        A = self.matrix.copy()
        A[np.diag_indices_from(A)] += self.damping
        return A

    def cholesky(self):
        if self._factor is None:
            try:
                self._factor = scipy.linalg.cho_factor(self.dense(), lower=True)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError(
                    f"damped curvature is not positive definite at damping={self.damping:g}; "
                    "increase the damping"
                ) from None
        return self._factor


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    maxiter: int | None = None
    lissa_iters: int = 100_000
    lissa_scale: float | str = "auto"
    scale_iters: int = 100
    batch_size: int | None = None
    repeats: int = 1
    seed: int = 0


@dataclass(frozen=True)
class SolverReport:
    method: str
    iterations: int
    residual_norm: float
    converged: bool
    history: tuple = ()
    scale: float | None = None

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "iterations": self.iterations,
            "residual": self.residual_norm,
            "converged": self.converged,
        }
        if self.scale is not None:
            d["scale"] = self.scale
        return d


def _options(opts, kwargs) -> SolverOptions:
    if opts is None:
        return SolverOptions(**kwargs)
    if kwargs:
        return SolverOptions(**{**opts.__dict__, **kwargs})
    return opts


def _rel_residual(op, x, v, vnorm):
    return float(np.linalg.norm(op.matvec(x) - v) / vnorm)


def solve(op: CurvatureOperator, v, method: str = "direct", opts: SolverOptions | None = None,
          **kwargs):
    """Approximate ``(C + damping I)^-1 v``; returns ``(x, SolverReport)``."""
    if method not in METHODS:
        raise ValueError(f"unknown solver {method!r}")
    o = _options(opts, kwargs)
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise SolverError("right-hand side has non-finite entries")
    vnorm = np.linalg.norm(v)
    if vnorm == 0.0:
        return np.zeros_like(v), SolverReport(method, 0, 0.0, True)
    if method == "direct":
        return _direct(op, v, vnorm)
    if method == "cg":
        return _cg(op, v, vnorm, o)
    return _lissa(op, v, vnorm, o)


def _direct(op, v, vnorm):
    if op.matrix is None:
        raise SolverError("direct solve needs an exact or projected matrix operator")
    fac = op.cholesky()
    x = scipy.linalg.cho_solve(fac, v)
    res = _rel_residual(op, x, v, vnorm)
    steps = 0
    while res > 1e-10 and steps < 3:
        x = x + scipy.linalg.cho_solve(fac, v - op.matvec(x))
        res = _rel_residual(op, x, v, vnorm)
        steps += 1
    return x, SolverReport("direct", 1 + steps, res, res <= 1e-10)


def solve_many(op: CurvatureOperator, V, method: str = "direct", opts=None, **kwargs):
    """Solve for every row of ``V``; returns ``(X, reports)``."""
    V = np.asarray(V, dtype=np.float64)
    if method == "direct":
        fac = op.cholesky()
        X = scipy.linalg.cho_solve(fac, V.T).T
        reports = []
        for k in range(V.shape[0]):
            vn = np.linalg.norm(V[k])
            if vn == 0.0:
                X[k] = 0.0
                reports.append(SolverReport("direct", 0, 0.0, True))
                continue
            res = _rel_residual(op, X[k], V[k], vn)
            if res > 1e-10:
                X[k], rep = _direct(op, V[k], vn)
                reports.append(rep)
            else:
                reports.append(SolverReport("direct", 1, res, True))
        return X, reports
    out = np.empty_like(V)
    reports = []
    for k in range(V.shape[0]):
        try:
            out[k], rep = solve(op, V[k], method, opts, **kwargs)
        except SolverError as exc:
            raise type(exc)(f"row {k}: {exc}", index=k) from exc
        reports.append(rep)
    return out, reports


def _cg(op, v, vnorm, o):
    """Conjugate gradient from x0 = 0.

    The returned iterate is the one with the smallest residual seen, so the
    reported residual history is non-increasing.
    """
    maxiter = o.maxiter or max(10 * op.dim, 100)
    x = np.zeros_like(v)
    r = v.copy()
    p = r.copy()
    rr = r @ r
    best_x, best = x.copy(), 1.0
    history = [1.0]
    it = 0
    while it < maxiter and best > o.tol:
        Ap = op.matvec(p)
        curv = p @ Ap
        if curv <= 0.0:
            raise NotPositiveDefiniteError(
                f"CG met non-positive curvature {curv:.3e} at iteration {it}; increase the damping"
            )
        alpha = rr / curv
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        it += 1
        res = np.sqrt(rr_new) / vnorm
        if res < best:
            best, best_x = res, x.copy()
        history.append(best)
        p = r + (rr_new / rr) * p
        rr = rr_new
    true_res = _rel_residual(op, best_x, v, vnorm)
    return best_x, SolverReport("cg", it, true_res, true_res <= o.tol, tuple(history))


def estimate_scale(op: CurvatureOperator, iters: int = 100, seed: int = 0) -> float:
    """``1.1 *`` a power-iteration estimate of the largest eigenvalue of the damped operator."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.dim)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = op.matvec(x)
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            break
        x = y / ny
    return 1.1 * lam


def _lissa(op, v, vnorm, o):
    if o.lissa_scale == "auto":
        sigma = estimate_scale(op, o.scale_iters, o.seed)
    else:
        sigma = float(o.lissa_scale)
    if not sigma > 0:
        raise NotPositiveDefiniteError(
            f"LiSSA scale {sigma:g} is not positive; the damped operator looks singular"
        )
    if o.batch_size is not None:
        return _lissa_stochastic(op, v, vnorm, sigma, o)
    # x_j = v + (I - A/sigma) x_{j-1} = x_{j-1} + r_{j-1}, with r = v - A x / sigma
    x = v.copy()
    history = []
    growing, prev = 0, np.inf
    it = 0
    res = np.inf
    while it < o.lissa_iters:
        r = v - op.matvec(x) / sigma
        res = float(np.linalg.norm(r) / vnorm)
        history.append(res)
        if not np.isfinite(res):
            raise LissaDivergenceError(
                f"LiSSA diverged with scale {sigma:g}; use a larger scale"
            )
        if res <= o.tol:
            break
        growing = growing + 1 if res > prev else 0
        if growing >= 10:
            raise LissaDivergenceError(
                f"LiSSA residual grew for 10 consecutive steps (scale {sigma:g}); "
                "use a larger scale"
            )
        prev = res
        x += r
        it += 1
    return x / sigma, SolverReport("lissa", it, res, res <= o.tol, tuple(history), sigma)


def _lissa_stochastic(op, v, vnorm, sigma, o):
    if op.sampler is None:
        raise SolverError("minibatch LiSSA needs a model-backed operator")
    total = np.zeros_like(v)
    for rep in range(o.repeats):
        rng = np.random.default_rng(o.seed + rep)
        x = v.copy()
        for _ in range(o.lissa_iters):
            hx = op.sampler(x, rng, o.batch_size) + op.damping * x
            x = v + x - hx / sigma
            if not np.all(np.isfinite(x)):
                raise LissaDivergenceError(
                    f"minibatch LiSSA diverged with scale {sigma:g}; use a larger scale"
                )
        total += x / sigma
    x = total / o.repeats
    res = _rel_residual(op, x, v, vnorm)
    return x, SolverReport("lissa", o.lissa_iters * o.repeats, res, res <= o.tol, (), sigma)


@dataclass(frozen=True)
class STest:
    """``(C + damping I)^-1 g_test`` with the provenance needed to reuse it."""

    values: np.ndarray
    params_hash: bytes
    damping: float
    basis: str
    report: SolverReport
    test_id: int | None = None


def s_test(theta: ParamVector, dataset: Dataset, z_test, method: str = "direct",
           op: CurvatureOperator | None = None, damping: float | None = None,
           basis: str = "hessian", test_id: int | None = None,
           opts: SolverOptions | None = None, **kwargs) -> STest:
    """Inverse-curvature product for one test point, reusable across all training points."""
    if op is None:
        op = CurvatureOperator.from_model(theta, dataset, damping, basis, dense=(method == "direct"))
    g = grad(theta, z_test)
    x, rep = solve(op, g, method, opts, **kwargs)
    return STest(x, theta.digest, op.damping, op.basis, rep, test_id)
