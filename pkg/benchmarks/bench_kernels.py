"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend, the
speedup, and whether both backends produced identical results.
"""

import argparse
import time

import numpy as np

from hcpl import kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    x = rng.normal(size=(20, 16, 34, 34))
    w = rng.normal(size=(32, 16, 3, 3))
    g = rng.normal(size=(20, 32, 32, 32))
    fg = rng.random((256, 256)) < 0.8
    seeds = np.zeros((256, 256), np.int32)
    for lab in range(1, 41):
        r, c = rng.integers(0, 256, 2)
        seeds[r, c] = lab
    return {
        "conv2d_forward 20x16x32x32 -> 32": lambda: kernels.conv2d_forward(x, w),
        "conv2d_backward 20x16x32x32 -> 32": lambda: kernels.conv2d_backward(x, w, g),
        "geodesic_grow 256x256, 40 seeds": lambda: kernels.geodesic_grow(seeds, fg),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-10)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled kernels are not built; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38s}{'cython':>10s}{'python':>10s}{'speedup':>9s}  match")
    for name, fn in cases(rng).items():
        kernels.use_backend("cython")
        tc, oc = best_of(fn, args.repeat)
        kernels.use_backend("python")
        tp, op = best_of(fn, args.repeat)
        print(f"{name:<38s}{tc * 1e3:>8.1f}ms{tp * 1e3:>8.1f}ms{tp / tc:>8.1f}x  {same(oc, op)}")
    kernels.use_backend("cython")


if __name__ == "__main__":
    main()
