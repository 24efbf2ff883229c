"""Compiled kernels against the numpy fallback on representative sizes.

Run: python3 benchmarks/bench_kernels.py
"""
import timeit

import numpy as np

from seslease import _kernels_py
from seslease.config import load_scenario

try:
    from seslease import _kernels
except ImportError:
    _kernels = None


def distflow_inputs(n_rows=512):
    net = load_scenario("case69").net
    rng = np.random.default_rng(0)
    p = -0.01 * rng.random((n_rows, net.n_bus))
    q = -0.005 * rng.random((n_rows, net.n_bus))
    return net.parent, net.order, net.r, net.x, p, q, np.ones(n_rows)


def merit_inputs(n=2000):
    rng = np.random.default_rng(1)
    return np.sort(rng.uniform(0, 100, n)), rng.uniform(0.1, 1.0, n), 0.6 * n * 0.55


def bench(name, fn, args, number):
    t = min(timeit.repeat(lambda: fn(*args), number=number, repeat=5)) / number
    print(f"  {name:8s} {1e6 * t:10.1f} us/call")
    return t


def main():
    cases = [("distflow_sweep", distflow_inputs(), 200), ("merit_order_fill", merit_inputs(), 2000)]
    for kname, args, number in cases:
        print(kname)
        tp = bench("python", getattr(_kernels_py, kname), args, number)
        if _kernels is None:
            print("  cython   (extension not built)")
            continue
        tc = bench("cython", getattr(_kernels, kname), args, number)
        a = getattr(_kernels_py, kname)(*args)
        b = getattr(_kernels, kname)(*args)
        same = all(np.allclose(u, v, rtol=1e-12, atol=1e-15) for u, v in zip(a, b)) if isinstance(a, tuple) \
            else np.allclose(a, b, rtol=1e-12, atol=1e-15)
        print(f"  speedup  {tp / tc:10.1f}x   outputs agree: {same}")


if __name__ == "__main__":
    main()
