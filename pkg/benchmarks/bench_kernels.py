"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeats R] [--sizes N,d,c ...]
"""

import argparse
import timeit

import numpy as np

from influx import _kernels_py
from influx.kernels import get_backend

DEFAULT_SIZES = ("200,10,3", "2000,50,10", "10000,100,10")


def inputs(n, d, c, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    z = rng.standard_normal((n, c))
    P = np.exp(z - z.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    y = rng.integers(0, c, n)
    w = np.full(n, 1.0 / n)
    V = rng.standard_normal((c, d + 1))
    return X, P, y, w, V


def best(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--sizes", nargs="*", default=list(DEFAULT_SIZES),
                    help="problem sizes as N,d,c")
    args = ap.parse_args(argv)
    try:
        cy = get_backend("cython")
    except ImportError:
        print("compiled backend not built; only the numpy backend is available")
        return 1
    py = _kernels_py
    print(f"{'kernel':<10}{'N,d,c':>16}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for size in args.sizes:
        n, d, c = (int(s) for s in size.split(","))
        X, P, y, w, V = inputs(n, d, c)
        cases = {
            "grads": lambda m: m.softmax_grads(X, P, y, True),
            "hvp": lambda m: m.softmax_hvp(X, P, w, V, True),
            "hessian": lambda m: m.softmax_hessian(X, P, w, True),
        }
        for name, call in cases.items():
            if name == "hessian" and (c * (d + 1)) ** 2 * n > 5e10:
                continue
            np.testing.assert_allclose(call(cy), call(py), rtol=1e-9, atol=1e-12)
            tc = best(lambda: call(cy), args.repeats)
            tp = best(lambda: call(py), args.repeats)
            print(f"{name:<10}{size:>16}{1e3 * tc:>12.3f}{1e3 * tp:>12.3f}{tp / tc:>9.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
