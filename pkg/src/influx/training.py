"""Weighted empirical risk minimisation to a tight gradient tolerance."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConvergenceError, DimensionError
from .models import (
    HessianClosure,
    ModelSpec,
    ParamVector,
    init_params,
    objective,
    objective_grad,
)

log = logging.getLogger(__name__)

OPTIMIZERS = ("newton", "lbfgs", "gd")


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings.

    ``optimizer`` is ``"newton"`` (truncated Newton-CG on the analytic HVP),
    ``"lbfgs"`` (quasi-Newton) or ``"gd"`` (full-batch gradient descent with
    backtracking). ``weights`` default to ``1/n`` each.
    """

    optimizer: str = "newton"
    max_iters: int = 500
    grad_tol: float = 1e-8
    seed: int = 0
    weights: tuple | None = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))

    def to_dict(self) -> dict:
        return {
            "optimizer": self.optimizer,
            "max_iters": self.max_iters,
            "grad_tol": self.grad_tol,
            "seed": self.seed,
        }


class _Problem:
    def __init__(self, dataset, spec, weights):
        self.dataset = dataset
        self.spec = spec
        self.weights = weights

    def f(self, x):
        return objective(ParamVector(x, self.spec), self.dataset, self.weights)

    def g(self, x):
        return objective_grad(ParamVector(x, self.spec), self.dataset, self.weights)

    def hess(self, x):
        return HessianClosure(ParamVector(x, self.spec), self.dataset, self.weights)


def _line_search(prob, x, f, g, d, t0=1.0):
    """Backtracking Armijo search.

    Near the optimum objective differences fall below rounding error, so a
    step that leaves ``f`` unchanged to ~1e-13 relative is accepted when it
    shrinks the gradient norm.
    """
    slope = g @ d
    gnorm = np.linalg.norm(g)
    t = t0
    for _ in range(60):
        xn = x + t * d
        fn = prob.f(xn)
        if np.isfinite(fn):
            if fn <= f + 1e-4 * t * slope:
                return xn, fn, prob.g(xn)
            if abs(fn - f) <= 1e-13 * max(1.0, abs(f)):
                gn = prob.g(xn)
                if np.linalg.norm(gn) < gnorm:
                    return xn, fn, gn
        t *= 0.5
    return None


def _cg_direction(hv, g, tol, maxiter):
    """Truncated CG on ``H d = -g``; stops at negative curvature."""
    d = np.zeros_like(g)
    r = -g.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(maxiter):
        Hp = hv(p)
        curv = p @ Hp
        if curv <= 1e-14 * (p @ p):
            return d if np.any(d) else -g
        alpha = rr / curv
        d += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        if np.sqrt(rr_new) <= tol:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    return d


def _newton(prob, x, cfg):
    f, g = prob.f(x), prob.g(x)
    n_p = x.shape[0]
    for it in range(cfg.max_iters):
        gn = np.linalg.norm(g)
        if gn <= cfg.grad_tol:
            return x, gn, it
        hv = prob.hess(x)
        forcing = min(0.5, np.sqrt(gn)) * gn
        d = _cg_direction(hv, g, tol=forcing, maxiter=max(2 * n_p, 50))
        if g @ d >= 0:
            d = -g
        step = _line_search(prob, x, f, g, d)
        if step is None:
            step = _line_search(prob, x, f, g, -g)
            if step is None:
                return x, gn, it
        x, f, g = step
    return x, np.linalg.norm(g), cfg.max_iters


def _lbfgs(prob, x, cfg, memory=20):
    f, g = prob.f(x), prob.g(x)
    S, Y = [], []
    for it in range(cfg.max_iters):
        gn = np.linalg.norm(g)
        if gn <= cfg.grad_tol:
            return x, gn, it
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(S), reversed(Y)):
            a = (s @ q) / (yv @ s)
            alphas.append(a)
            q -= a * yv
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        for (s, yv), a in zip(zip(S, Y), reversed(alphas)):
            b = (yv @ q) / (yv @ s)
            q += (a - b) * s
        d = -q
        if g @ d >= 0:
            d, S, Y = -g, [], []
        step = _line_search(prob, x, f, g, d)
        if step is None:
            if not S:
                return x, gn, it
            S, Y = [], []
            continue
        xn, fn, gnew = step
        s, yv = xn - x, gnew - g
        if s @ yv > 1e-16 * np.linalg.norm(s) * np.linalg.norm(yv):
            S.append(s)
            Y.append(yv)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = xn, fn, gnew
    return x, np.linalg.norm(g), cfg.max_iters


def _gd(prob, x, cfg):
    f, g = prob.f(x), prob.g(x)
    t = 1.0
    for it in range(cfg.max_iters):
        gn = np.linalg.norm(g)
        if gn <= cfg.grad_tol:
            return x, gn, it
        step = _line_search(prob, x, f, g, -g, t0=2.0 * t)
        if step is None:
            return x, gn, it
        xn, fn, gnew = step
        t = np.linalg.norm(xn - x) / gn
        x, f, g = xn, fn, gnew
    return x, np.linalg.norm(g), cfg.max_iters


_RUNNERS = {"newton": _newton, "lbfgs": _lbfgs, "gd": _gd}


def train(dataset: Dataset, spec: ModelSpec, cfg: TrainConfig | None = None,
          init: ParamVector | None = None, weights=None) -> ParamVector:
    """Minimise the weighted mean loss plus ``l2/2 |theta|^2``.

    ``weights`` overrides ``cfg.weights`` without the sum-to-one check; it is
    how leave-one-out and upweighting experiments set ``w_i``.

    Raises
    ------
    ConvergenceError
        If ``|grad L| > cfg.grad_tol`` after ``cfg.max_iters`` iterations.
    """
    cfg = cfg or TrainConfig()
    if dataset.d != spec.d or dataset.c > spec.c:
        raise DimensionError(
            f"dataset (d={dataset.d}, c={dataset.c}) does not match spec (d={spec.d}, c={spec.c})"
        )
    if weights is None and cfg.weights is not None:
        weights = np.asarray(cfg.weights)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
    x0 = init.values.copy() if init is not None else init_params(spec, cfg.seed).values.copy()
    prob = _Problem(dataset, spec, weights)
    x, gn, iters = _RUNNERS[cfg.optimizer](prob, x0, cfg)
    if not gn <= cfg.grad_tol:
        raise ConvergenceError(
            f"{cfg.optimizer} stopped after {iters} iterations with |grad| = {gn:.3e} "
            f"> grad_tol = {cfg.grad_tol:.1e}",
            grad_norm=float(gn),
        )
    log.debug("%s converged in %d iterations, |grad| = %.2e", cfg.optimizer, iters, gn)
    return ParamVector(x, spec)
