"""Pure-numpy versions of the softmax-regression hot kernels.

Each function mirrors one in ``_kernels.pyx`` with the same signature.
``X`` is the raw N x d feature matrix; when ``bias`` is true the parameter
block of every class carries one extra trailing coordinate for the bias, so
each class row has ``D = d + 1`` entries.
"""

import numpy as np


def softmax_grads(X, P, y, bias):
    """Per-example loss gradients, N x (c * D), class-major rows."""
    n, d = X.shape
    c = P.shape[1]
    r = P.copy()
    r[np.arange(n), y] -= 1.0
    D = d + 1 if bias else d
    out = np.empty((n, c, D))
    np.multiply(r[:, :, None], X[:, None, :], out=out[:, :, :d])
    if bias:
        out[:, :, d] = r
    return out.reshape(n, c * D)


def softmax_hvp(X, P, w, V, bias):
    """``sum_i w_i (diag(p_i) - p_i p_i^T) V u_i u_i^T`` as a c x D matrix."""
    d = X.shape[1]
    a = X @ V[:, :d].T
    if bias:
        a += V[:, d]
    a -= np.einsum("ik,ik->i", P, a)[:, None]
    a *= P
    a *= w[:, None]
    out = np.empty_like(V)
    out[:, :d] = a.T @ X
    if bias:
        out[:, d] = a.sum(axis=0)
    return out


def softmax_hessian(X, P, w, bias):
    """Dense weighted loss Hessian, (c * D) x (c * D)."""
    n, d = X.shape
    c = P.shape[1]
    D = d + 1 if bias else d
    U = np.hstack([X, np.ones((n, 1))]) if bias else X
    H = np.empty((c, D, c, D))
    for a in range(c):
        for b in range(a, c):
            s = w * P[:, a] * ((1.0 if a == b else 0.0) - P[:, b])
            block = (U * s[:, None]).T @ U
            H[a, :, b, :] = block
            if b != a:
                H[b, :, a, :] = block.T
    return H.reshape(c * D, c * D)
