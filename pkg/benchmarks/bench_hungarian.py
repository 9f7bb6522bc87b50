"""Compare the compiled and numpy Hungarian kernels.

Usage: python benchmarks/bench_hungarian.py [--sizes 8,25,64,128] [--repeats 200]

Prints one row per size with the mean time per solve for each backend and
the speedup. Both kernels are checked to return the same assignment.
"""

import argparse
import time

import numpy as np

from setdet.matching import _hungarian_py

try:
    from setdet.matching import _hungarian
except ImportError:  # extension not built
    _hungarian = None


def bench(solve, mats):
    solve(mats[0])  # warm-up
    t0 = time.perf_counter()
    out = [solve(c) for c in mats]
    return (time.perf_counter() - t0) / len(mats), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="8,25,64,128")
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'n':>5} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        reps = max(5, args.repeats * 8 // max(n, 8))
        mats = [np.ascontiguousarray(rng.random((n, n))) for _ in range(reps)]
        t_py, a = bench(_hungarian_py.solve, mats)
        if _hungarian is None:
            print(f"{n:5d} {1e3 * t_py:10.3f} {'n/a':>10} {'n/a':>8}")
            continue
        t_cy, b = bench(_hungarian.solve, mats)
        for c, x, y in zip(mats, a, b):
            if not np.array_equal(x, y):
                rows = np.arange(n)
                raise SystemExit(f"backends disagree at n={n}: {c[rows, x].sum()} vs {c[rows, y].sum()}")
        print(f"{n:5d} {1e3 * t_py:10.3f} {1e3 * t_cy:10.3f} {t_py / t_cy:8.1f}x")


if __name__ == "__main__":
    main()
