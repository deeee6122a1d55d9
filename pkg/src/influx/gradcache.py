"""Per-example gradient matrix and its binary file format.

File layout (little-endian)::

    b"IFGC" | u32 version=1 | u64 N | u64 P | 32-byte params hash | N*P float64, row-major
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DataFormatError, StaleCacheError
from .models import ParamVector, objective_grad, per_example_grads

log = logging.getLogger(__name__)

MAGIC = b"IFGC"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ32s")


@dataclass(frozen=True)
class GradCache:
    grads: np.ndarray
    params_hash: bytes

    @property
    def n(self) -> int:
        return self.grads.shape[0]

    @property
    def p(self) -> int:
        return self.grads.shape[1]

    @property
    def hash_hex(self) -> str:
        return self.params_hash.hex()

    def check(self, params_hash) -> None:
        """Raise StaleCacheError unless ``params_hash`` matches this cache."""
        if isinstance(params_hash, str):
            params_hash = bytes.fromhex(params_hash)
        if params_hash != self.params_hash:
            raise StaleCacheError(
                f"gradient cache built for {self.hash_hex[:8]}, "
                f"queried with {params_hash.hex()[:8]}"
            )

    def row(self, i: int) -> np.ndarray:
        return np.asarray(self.grads[i])


def build_grad_cache(theta: ParamVector, dataset: Dataset, grad_tol: float = 1e-8,
                     block: int = 4096) -> GradCache:
    """Compute ``g_i = grad loss(z_i)`` for every training example."""
    gn = float(np.linalg.norm(objective_grad(theta, dataset)))
    if gn > grad_tol:
        warnings.warn(
            f"parameters are not stationary: |grad L| = {gn:.2e} > {grad_tol:.0e}",
            RuntimeWarning,
            stacklevel=2,
        )
    G = np.empty((dataset.n, theta.spec.n_params))
    X, y = dataset.features, dataset.labels
    for s in range(0, dataset.n, block):
        G[s : s + block] = per_example_grads(theta.spec, theta.values, X[s : s + block], y[s : s + block])
    G.setflags(write=False)
    return GradCache(G, theta.digest)


def _atomic_write(path, chunks) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_grad_cache(cache: GradCache, path) -> None:
    head = _HEADER.pack(MAGIC, VERSION, cache.n, cache.p, cache.params_hash)
    body = np.ascontiguousarray(cache.grads, dtype="<f8")
    _atomic_write(path, [head, memoryview(body).cast("B")])


def load_grad_cache(path, mmap: bool = True) -> GradCache:
    """Read a cache file; the matrix is memory-mapped read-only by default."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated gradient cache header")
    magic, version, n, p, digest = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * n * p
    if os.path.getsize(path) != expected:
        raise DataFormatError(f"{path}: size mismatch for {n}x{p} cache")
    if mmap:
        G = np.memmap(path, dtype="<f8", mode="r", offset=_HEADER.size, shape=(n, p))
    else:
        G = np.fromfile(path, dtype="<f8", offset=_HEADER.size).reshape(n, p)
        G.setflags(write=False)
    return GradCache(G, digest)
