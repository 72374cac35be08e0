"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Prints per-call timings for simplex projection and the min-norm solver on the
small problem sizes the training loop actually uses (a handful of agents) and
on a larger one, plus the maximum disagreement between the two backends.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from mops import kernels


def _cases(rng: np.random.Generator):
    for n, d in ((3, 600), (3, 5000), (8, 600), (32, 200)):
        grads = rng.normal(size=(n, d))
        yield f"n={n} d={d}", grads, rng.normal(size=n)


def _time(fn, repeat: int) -> float:
    number = 200
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    if kernels.compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'case':<16}{'kernel':<16}{'cython us':>12}{'python us':>12}{'speedup':>10}{'max diff':>12}")
    for label, grads, v in _cases(rng):
        gram = grads @ grads.T
        step = 1.0 / float(np.linalg.eigvalsh(gram)[-1])
        tol = 0.5e-8 * gram.diagonal().max()
        calls = {
            "project": (lambda m: m.project_simplex(v), lambda r: r),
            "min_norm": (lambda m: m.min_norm_pg(gram, step, 10_000, tol), lambda r: r[0]),
        }
        for name, (call, pick) in calls.items():
            tc = _time(lambda: call(kernels.compiled), args.repeat)
            tp = _time(lambda: call(kernels.py), args.repeat)
            diff = np.abs(pick(call(kernels.compiled)) - pick(call(kernels.py))).max()
            print(f"{label:<16}{name:<16}{tc * 1e6:>12.1f}{tp * 1e6:>12.1f}{tp / tc:>10.2f}{diff:>12.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
