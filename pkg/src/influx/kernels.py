"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. ``INFLUX_BACKEND=python`` forces the fallback.

With the compiled backend active, per-example gradients always run
compiled. HVPs and dense Hessians switch to the numpy (BLAS) versions above
the sizes where ``benchmarks/bench_kernels.py`` shows BLAS ahead.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("INFLUX_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def get_backend(name=None):
    """Return a kernel module by name (``"cython"``, ``"python"``) or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            try:
                from . import _kernels as mod
            except ImportError as exc:
                raise ImportError("compiled kernels are not built") from exc
            return mod
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


HVP_COMPILED_MAX = 50_000  # N * d * c
HESSIAN_COMPILED_MAX = 50  # c * D

softmax_grads = _impl.softmax_grads


def softmax_hvp(X, P, w, V, bias):
    if _impl is _kernels_py or X.shape[0] * X.shape[1] * P.shape[1] > HVP_COMPILED_MAX:
        return _kernels_py.softmax_hvp(X, P, w, V, bias)
    return _impl.softmax_hvp(X, P, w, V, bias)


def softmax_hessian(X, P, w, bias):
    if _impl is _kernels_py or P.shape[1] * (X.shape[1] + bias) > HESSIAN_COMPILED_MAX:
        return _kernels_py.softmax_hessian(X, P, w, bias)
    return _impl.softmax_hessian(X, P, w, bias)
