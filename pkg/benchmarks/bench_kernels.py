"""Time the compiled kernels against the NumPy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--cells 1200] [--genes 120] [--k 3] [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` wall time of each
backend and the speedup.  Also checks that both backends agree.
"""
import argparse
import sys
import timeit

import numpy as np

from zimclust._backend import compiled_kernels, python_kernels


def make_inputs(n, g, k, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.5, 2.0, n)
    base = rng.normal(1.0, 0.7, (g, k))
    xb = rng.normal(0.0, 0.2, (n, g))
    rate = t[:, None] * np.exp(base[:, 0] + xb)
    y = rng.negative_binomial(5, 5 / (5 + rate)).astype(np.int64)
    y[rng.random((n, g)) < 0.3] = 0
    phi = rng.uniform(0.1, 0.5, k)
    alpha = rng.uniform(0.05, 0.5, k)
    return y, np.log(t), base, xb, phi, alpha


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=1200)
    ap.add_argument("--genes", type=int, default=120)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    if compiled_kernels is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1

    y, off, base, xb, phi, alpha = make_inputs(args.cells, args.genes, args.k)
    lf = python_kernels.row_log_factorial(y)
    w = np.random.default_rng(1).random(y.shape)
    logmu = np.log(y.mean(axis=0) + 0.5)[None, :] + off[:, None]
    nu = 4.0

    cases = {
        "cluster_logdens (NB)": lambda m: m.cluster_logdens(y, off, base, xb, phi, alpha, lf),
        "cluster_logdens (Poisson)": lambda m: m.cluster_logdens(y, off, base, xb, phi, None, lf),
        "nb_dispersion_terms": lambda m: m.nb_dispersion_terms(y, w, logmu, nu),
        "row_log_factorial": lambda m: m.row_log_factorial(y),
    }

    print(f"N={args.cells} G={args.genes} K={args.k}, best of {args.repeat}")
    print(f"{'kernel':<28}{'python [ms]':>14}{'compiled [ms]':>16}{'speedup':>10}{'max rel diff':>15}")
    for name, call in cases.items():
        a = call(python_kernels)
        b = call(compiled_kernels)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = 0.0
        for u, v in zip(a, b):
            u, v = np.asarray(u, float), np.asarray(v, float)
            diff = max(diff, float(np.max(np.abs(u - v) / np.maximum(1.0, np.abs(u)))))
        tp = best_time(lambda: call(python_kernels), args.repeat) * 1e3
        tc = best_time(lambda: call(compiled_kernels), args.repeat) * 1e3
        print(f"{name:<28}{tp:14.2f}{tc:16.2f}{tp / tc:10.1f}x{diff:15.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
