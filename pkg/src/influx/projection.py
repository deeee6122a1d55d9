"""Low-dimensional influence through a PCA projection of training gradients.

``A`` has orthonormal rows spanning the top eigenvectors of the empirical
Fisher ``(1/N) sum_i g_i g_i^T``. Projected gradients are ``A g`` and the
projected curvature is ``A H A^T``, built from one HVP per row.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import CapExceededError, DataFormatError, NotPositiveDefiniteError
from .gradcache import GradCache, _atomic_write
from .influence import InfluenceScores, _hash_check
from .models import DEFAULT_DENSE_CAP
from .solvers import CurvatureOperator, SolverReport


@dataclass(frozen=True)
class ProjectionMatrix:
    a: np.ndarray
    eigvals: np.ndarray
    total_variance: float
    params_hash: bytes | None = None
    passes: int = 0

    @property
    def q(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.a.shape[1]

    @property
    def explained_variance(self) -> float:
        if self.total_variance <= 0:
            return 1.0
        return float(self.eigvals.sum() / self.total_variance)


@dataclass(frozen=True)
class ProjectedCurvature:
    h_omega: np.ndarray
    damping: float
    params_hash: bytes | None = None
    hvp_calls: int = 0

    def operator(self) -> CurvatureOperator:
        return CurvatureOperator.from_matrix(self.h_omega, self.damping, kind="projected-matrix",
                                             params_hash=self.params_hash)


def _blocks(n, batch_size):
    for s in range(0, n, batch_size):
        yield slice(s, min(s + batch_size, n))


def _fix_signs(U):
    """Make the largest-magnitude entry of every column positive."""
    idx = np.argmax(np.abs(U), axis=0)
    s = np.sign(U[idx, np.arange(U.shape[1])])
    s[s == 0] = 1.0
    return U * s


def fit_pca(cache: GradCache, q: int, batch_size: int = 256, oversample: int | None = None,
            max_passes: int = 100, tol: float = 1e-12) -> ProjectionMatrix:
    """Top-``q`` eigenvectors of the (uncentred) gradient second moment.

    One streaming pass of incremental SVD over row blocks gives an initial
    basis of ``q + oversample`` columns; further passes of block subspace
    iteration refine it until the top-``q`` Ritz values and subspace settle.
    """
    G = cache.grads
    n, p = G.shape
    if not 1 <= q <= min(n, p):
        raise ValueError(f"q={q} must be in [1, min(N, P) = {min(n, p)}]")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    r = min(p, q + (max(q, 10) if oversample is None else oversample))

    # pass 1: incremental SVD of G^T, truncated to r columns after each block
    U = np.zeros((p, 0))
    S = np.zeros(0)
    total = 0.0
    for sl in _blocks(n, batch_size):
        B = np.asarray(G[sl], dtype=np.float64)
        total += float(np.einsum("ij,ij->", B, B))
        M = np.hstack([U * S, B.T])
        Uf, Sf, _ = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesdd")
        U, S = Uf[:, :r], Sf[:r]
    if U.shape[1] < r:
        # fewer rows than r: pad with an orthonormal complement
        Qc, _ = np.linalg.qr(np.hstack([U, np.eye(p)[:, : r]]))
        U = Qc[:, :r]
    total /= n

    def apply_fisher(V):
        out = np.zeros_like(V)
        for sl in _blocks(n, batch_size):
            B = np.asarray(G[sl], dtype=np.float64)
            out += B.T @ (B @ V)
        return out / n

    def ritz(V):
        FV = apply_fisher(V)
        T = V.T @ FV
        w, Z = np.linalg.eigh(0.5 * (T + T.T))
        order = np.argsort(w)[::-1]
        return w[order], V @ Z[:, order], FV @ Z[:, order]

    passes = 0
    vals, V, FV = ritz(U)
    if r < p:
        for passes in range(1, max_passes + 1):
            Qn, _ = np.linalg.qr(FV)
            new_vals, Vn, FVn = ritz(Qn)
            top = max(abs(new_vals[0]), 1e-300)
            dval = np.max(np.abs(new_vals[:q] - vals[:q])) / top
            # sine of the largest principal angle between old and new top-q subspaces
            cross = V[:, :q].T @ Vn[:, :q]
            dsub = np.sqrt(max(0.0, 1.0 - np.linalg.svd(cross, compute_uv=False).min() ** 2))
            vals, V, FV = new_vals, Vn, FVn
            if dval <= tol and dsub <= np.sqrt(tol):
                break

    A = _fix_signs(V[:, :q]).T.copy()
    eig = np.maximum(vals[:q], 0.0)
    return ProjectionMatrix(A, eig, total, cache.params_hash, passes)


def project_grad(proj: ProjectionMatrix, g) -> np.ndarray:
    return proj.a @ np.asarray(g, dtype=np.float64)


def projected_hessian(proj: ProjectionMatrix, hvp_source, damping: float,
                      params_hash: bytes | None = None) -> ProjectedCurvature:
    """``A H A^T`` from exactly ``q`` Hessian-vector products, symmetrised."""
    if isinstance(hvp_source, CurvatureOperator):
        params_hash = params_hash or hvp_source.params_hash
        hv = hvp_source.undamped
    else:
        hv = hvp_source
    HA = np.empty((proj.p, proj.q))
    for j in range(proj.q):
        HA[:, j] = hv(proj.a[j])
    M = proj.a @ HA
    return ProjectedCurvature(0.5 * (M + M.T), float(damping), params_hash, proj.q)


def _factor(pc: ProjectedCurvature):
    A = pc.h_omega.copy()
    A[np.diag_indices_from(A)] += pc.damping
    try:
        return scipy.linalg.cho_factor(A, lower=True), A
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            f"projected curvature is not positive definite at damping={pc.damping:g}; "
            "increase the damping"
        ) from None


def project_cache(proj: ProjectionMatrix, cache: GradCache, batch_size: int = 4096) -> np.ndarray:
    """All projected training gradients, N x Q."""
    out = np.empty((cache.n, proj.q))
    for sl in _blocks(cache.n, batch_size):
        out[sl] = np.asarray(cache.grads[sl], dtype=np.float64) @ proj.a.T
    return out


def projected_influence(proj: ProjectionMatrix, pc: ProjectedCurvature, g_test,
                        cache: GradCache, test_id=None, projected_grads=None) -> InfluenceScores:
    """``(A g_test)^T (A H A^T + damping I)^-1 (A g_i)`` for every training point."""
    _hash_check(cache.params_hash, pc.params_hash, "projected curvature")
    fac, M = _factor(pc)
    u = project_grad(proj, g_test)
    x = scipy.linalg.cho_solve(fac, u)
    un = np.linalg.norm(u)
    res = float(np.linalg.norm(M @ x - u) / un) if un else 0.0
    GA = project_cache(proj, cache) if projected_grads is None else projected_grads
    rep = SolverReport("direct", 1, res, res <= 1e-10)
    return InfluenceScores(GA @ x, test_id, "if-projected", "direct", pc.damping, "hessian",
                           cache.params_hash, report=rep)


def projected_self_influence(proj: ProjectionMatrix, pc: ProjectedCurvature,
                             cache: GradCache, projected_grads=None) -> np.ndarray:
    fac, _ = _factor(pc)
    GA = project_cache(proj, cache) if projected_grads is None else projected_grads
    X = scipy.linalg.cho_solve(fac, GA.T).T
    return np.maximum(np.einsum("ij,ij->i", GA, X), 0.0)


def projection_objective(a, cache: GradCache, h_inv, cap: int = DEFAULT_DENSE_CAP) -> float:
    """``tr(G H_A G H_A^T)`` with ``H_A = (A^+ A)^T H^-1 A^+ A`` and ``G`` the gradient second moment.

    Larger is better. ``h_inv`` is the dense inverse damped curvature.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    p = a.shape[1]
    if p > cap:
        raise CapExceededError(f"projection objective needs {p}x{p} matrices (cap {cap})")
    Gm = np.asarray(cache.grads, dtype=np.float64)
    G = Gm.T @ Gm / Gm.shape[0]
    Pr = np.linalg.pinv(a) @ a
    HA = Pr.T @ np.asarray(h_inv, dtype=np.float64) @ Pr
    X = G @ HA
    Y = G @ HA.T
    return float(np.einsum("ij,ji->", X, Y))


# -- projection file ---------------------------------------------------------
#   b"IFPJ" | u32 version | u64 Q | u64 P | Q*P float64 | Q float64 eigvals | f8 total variance

_PJ_MAGIC = b"IFPJ"
_PJ_HEADER = struct.Struct("<4sIQQ")


def save_projection(proj: ProjectionMatrix, path) -> None:
    head = _PJ_HEADER.pack(_PJ_MAGIC, 1, proj.q, proj.p)
    _atomic_write(path, [
        head,
        np.ascontiguousarray(proj.a, dtype="<f8").tobytes(),
        np.ascontiguousarray(proj.eigvals, dtype="<f8").tobytes(),
        struct.pack("<d", proj.total_variance),
    ])


def load_projection(path) -> ProjectionMatrix:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PJ_HEADER.size:
        raise DataFormatError(f"{path}: truncated projection file")
    magic, version, q, p = _PJ_HEADER.unpack_from(raw)
    if magic != _PJ_MAGIC or version != 1:
        raise DataFormatError(f"{path}: bad magic or version")
    off = _PJ_HEADER.size
    if len(raw) != off + 8 * (q * p + q + 1):
        raise DataFormatError(f"{path}: size mismatch")
    a = np.frombuffer(raw, dtype="<f8", count=q * p, offset=off).reshape(q, p).astype(np.float64)
    off += 8 * q * p
    eig = np.frombuffer(raw, dtype="<f8", count=q, offset=off).astype(np.float64)
    (tv,) = struct.unpack_from("<d", raw, off + 8 * q)
    return ProjectionMatrix(a, eig, tv)
