"""Influence scores, theta- and loss-relative influence, and top-k selection.

Sign convention: ``score_i = g_test^T (C + damping I)^-1 g_i``, so a positive
score means upweighting example ``i`` lowers the test loss.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, StaleCacheError
from .gradcache import GradCache, _atomic_write
from .solvers import CurvatureOperator, SolverReport, STest, solve, solve_many

VARIANTS = ("theta", "ell")
SIGNS = ("positive", "negative", "absolute")
_SIGN_ALIASES = {"pos": "positive", "neg": "negative", "abs": "absolute"}


@dataclass(frozen=True)
class InfluenceScores:
    scores: np.ndarray
    test_id: int | None = None
    method: str = "if"
    solver: str | None = None
    damping: float | None = None
    basis: str | None = None
    params_hash: bytes | None = None
    degenerate: np.ndarray | None = None
    report: SolverReport | None = None

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class DenominatorCache:
    """Per-example RelatIF denominators.

    ``theta``: ``|(C + damping I)^-1 g_i|``; ``ell``: ``sqrt(g_i^T (C + damping I)^-1 g_i)``.
    Rows with ``g_i = 0`` carry value 0 and ``degenerate = True``.
    """

    variant: str
    values: np.ndarray
    degenerate: np.ndarray
    damping: float
    basis: str
    params_hash: bytes
    solver: str = "direct"
    reports: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown denominator variant {self.variant!r}")


@dataclass(frozen=True)
class ExplanationSet:
    test_id: int | None
    indices: np.ndarray
    scores: np.ndarray
    k: int
    sign: str

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.indices, self.scores)]


def _hash_check(expected: bytes | None, actual: bytes | None, what: str):
    if expected is not None and actual is not None and expected != actual:
        raise StaleCacheError(
            f"{what} was computed for parameters {actual.hex()[:8]}, "
            f"gradient cache is for {expected.hex()[:8]}"
        )


def influence_all(s: STest, cache: GradCache, method: str = "if") -> InfluenceScores:
    """``scores[i] = s_test . g_i`` in one pass over the cache."""
    _hash_check(cache.params_hash, s.params_hash, "s_test")
    scores = np.asarray(cache.grads @ s.values, dtype=np.float64)
    return InfluenceScores(scores, s.test_id, method, s.report.method, s.damping, s.basis,
                           cache.params_hash, report=s.report)


def self_influence(i: int, cache: GradCache, op: CurvatureOperator, method: str = "direct",
                   **opts) -> float:
    """``g_i^T (C + damping I)^-1 g_i``."""
    _hash_check(cache.params_hash, op.params_hash, "curvature operator")
    g = cache.row(i)
    if not np.any(g):
        return 0.0
    x, _ = solve(op, g, method, **opts)
    return max(float(g @ x), 0.0)


def precompute_denominators(cache: GradCache, op: CurvatureOperator, variant: str = "ell",
                            method: str = "direct", **opts) -> DenominatorCache:
    """Denominators for every training example, one inverse-curvature solve each."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown denominator variant {variant!r}")
    _hash_check(cache.params_hash, op.params_hash, "curvature operator")
    G = np.asarray(cache.grads)
    degenerate = ~np.any(G != 0.0, axis=1)
    X, reports = solve_many(op, G, method, **opts)
    if variant == "theta":
        vals = np.linalg.norm(X, axis=1)
    else:
        vals = np.sqrt(np.maximum(np.einsum("ij,ij->i", G, X), 0.0))
    vals[degenerate] = 0.0
    return DenominatorCache(variant, vals, degenerate, op.damping, op.basis, cache.params_hash,
                            method, tuple(reports))


def _relative(scores: InfluenceScores, denom: DenominatorCache, variant: str, name: str):
    if denom.variant != variant:
        raise ValueError(f"{name} needs a '{variant}' denominator cache, got '{denom.variant}'")
    if scores.damping is not None and scores.damping != denom.damping:
        raise ValueError(
            f"damping mismatch: scores {scores.damping:g}, denominators {denom.damping:g}"
        )
    if scores.basis is not None and scores.basis != denom.basis:
        raise ValueError(f"basis mismatch: scores {scores.basis}, denominators {denom.basis}")
    _hash_check(denom.params_hash, scores.params_hash, "influence scores")
    degenerate = denom.degenerate | (denom.values == 0.0)
    safe = np.where(degenerate, 1.0, denom.values)
    vals = np.where(degenerate, 0.0, scores.scores / safe)
    return InfluenceScores(vals, scores.test_id, name, scores.solver, scores.damping,
                           scores.basis, scores.params_hash, degenerate, scores.report)


def theta_relatif(scores: InfluenceScores, denom: DenominatorCache) -> InfluenceScores:
    """``Infl(test, i) / |(C + damping I)^-1 g_i|``."""
    return _relative(scores, denom, "theta", "theta-relatif")


def l_relatif(scores: InfluenceScores, denom: DenominatorCache) -> InfluenceScores:
    """``Infl(test, i) / sqrt(Infl(i, i))``."""
    return _relative(scores, denom, "ell", "l-relatif")


def top_k(scores, k: int, sign: str = "positive", test_id=None) -> ExplanationSet:
    """Indices of the ``k`` best scores under ``sign``; ties go to the lower index."""
    sign = _SIGN_ALIASES.get(sign, sign)
    if sign not in SIGNS:
        raise ValueError(f"sign must be one of {SIGNS}")
    if isinstance(scores, InfluenceScores):
        test_id = scores.test_id if test_id is None else test_id
        s = scores.scores
    else:
        s = np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    key = {"positive": s, "negative": -s, "absolute": np.abs(s)}[sign]
    order = np.lexsort((np.arange(n), -key))[:k]
    return ExplanationSet(test_id, order, s[order], k, sign)


# -- denominator cache file --------------------------------------------------
#   b"IFDC" | u32 version | u64 N | 8s variant | f8 damping | 8s basis | 32s hash
#   | N float64 values | N uint8 degenerate flags

_DC_MAGIC = b"IFDC"
_DC_HEADER = struct.Struct("<4sIQ8sd8s32s")


def save_denominators(dc: DenominatorCache, path) -> None:
    head = _DC_HEADER.pack(_DC_MAGIC, 1, dc.values.shape[0], dc.variant.encode(), dc.damping,
                           dc.basis.encode(), dc.params_hash)
    vals = np.ascontiguousarray(dc.values, dtype="<f8").tobytes()
    flags = np.ascontiguousarray(dc.degenerate, dtype=np.uint8).tobytes()
    _atomic_write(path, [head, vals, flags])


def load_denominators(path) -> DenominatorCache:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _DC_HEADER.size:
        raise DataFormatError(f"{path}: truncated denominator cache")
    magic, version, n, variant, damping, basis, digest = _DC_HEADER.unpack_from(raw)
    if magic != _DC_MAGIC or version != 1:
        raise DataFormatError(f"{path}: bad magic or version")
    off = _DC_HEADER.size
    if len(raw) != off + 9 * n:
        raise DataFormatError(f"{path}: size mismatch")
    vals = np.frombuffer(raw, dtype="<f8", count=n, offset=off).astype(np.float64)
    flags = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + 8 * n).astype(bool)
    return DenominatorCache(variant.rstrip(b"\0").decode(), vals, flags, damping,
                            basis.rstrip(b"\0").decode(), digest)
