"""Compare the compiled kernels with the pure-Python fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat 5]``

Prints the best-of-``repeat`` time per call for each kernel and backend,
the speed-up, and the largest absolute difference between the outputs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ssmlab import kernels


def _cases(rng):
    T = 2000
    y = np.cumsum(rng.normal(0, 0.1, T)) + rng.normal(0, 0.1, T)
    y[::17] = np.nan
    ones, zeros = np.ones(T), np.zeros(T)
    kalman = (y, ones, zeros, ones * 0.01, ones, zeros, ones * 0.01, 0.0, 0.0)

    w = rng.random(100_000)
    w /= w.sum()
    resample = (w, w.size, 0.37)

    S, K = 500, 3
    trans = rng.random((S, K, K))
    trans /= trans.sum(axis=2, keepdims=True)
    init = np.full(K, 1.0 / K)
    emis = rng.random((S, K))
    hmm = (init, trans, emis)
    return {"kalman_scalar": kalman, "systematic_resample": resample, "hmm_forward": hmm}


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    both = np.isnan(a) & np.isnan(b)
    return float(np.max(np.where(both, 0.0, np.abs(a - b)), initial=0.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.compiled_impl is None:
        print("compiled kernels are not built; only the Python fallback is available")
        return
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<22}{'python (ms)':>14}{'cython (ms)':>14}{'speed-up':>10}{'max |diff|':>14}")
    for name, call_args in cases.items():
        py = getattr(kernels.python_impl, name)
        cy = getattr(kernels.compiled_impl, name)
        t_py = min(timeit.repeat(lambda: py(*call_args), number=1, repeat=args.repeat))
        t_cy = min(timeit.repeat(lambda: cy(*call_args), number=1, repeat=args.repeat))
        diff = _max_diff(py(*call_args), cy(*call_args))
        print(f"{name:<22}{1e3 * t_py:>14.3f}{1e3 * t_cy:>14.3f}{t_py / t_cy:>10.1f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
