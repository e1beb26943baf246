"""Time the compiled and NumPy kernel backends on the same inputs.

Usage: python -m benchmarks.bench_kernels [--n 100000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from krflow import kernels
from krflow.core import gauss_legendre

KERNELS = ("integrate_diag", "integral_only", "invert_diag")


def _inputs(n, A, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, n), rng.normal(scale=0.5, size=(n, A))


def run(n=100_000, A=9, repeats=5):
    nodes, weights = gauss_legendre(20)
    xs, W = _inputs(n, A)
    target = kernels.BACKENDS["python"].integral_only(xs, W, nodes, weights, kernels.EXP, 1e-6)
    rows = []
    for name, mod in kernels.BACKENDS.items():
        for kernel in KERNELS:
            fn = getattr(mod, kernel)
            arg = target if kernel == "invert_diag" else xs
            best = float("inf")
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn(arg, W, nodes, weights, kernels.EXP, 1e-6)
                best = min(best, time.perf_counter() - t0)
            rows.append({"backend": name, "kernel": kernel, "n": n, "seconds": best})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    rows = run(args.n, repeats=args.repeats)
    base = {r["kernel"]: r["seconds"] for r in rows if r["backend"] == "python"}
    print(f"{'backend':<10}{'kernel':<16}{'seconds':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['backend']:<10}{r['kernel']:<16}{r['seconds']:>10.4f}{base[r['kernel']] / r['seconds']:>9.2f}")


if __name__ == "__main__":
    main()
