"""Compiled vs numpy gradient/trace kernel: wall time and agreement.

    python3 benchmarks/bench_kernels.py [--reps 20] [--batch 1024]

Prints one line per (d, m, M) with median times, the 99% bootstrap band of
the mean time, the speedup and the largest relative difference between the
two backends.
"""
import argparse
import sys

import numpy as np

from otflow import kernels
from otflow.bench import _random_model, time_call
from otflow.metrics import bootstrap_ci

SHAPES = [(2, 32, 1), (2, 32, 2), (8, 64, 2), (43, 64, 1), (63, 64, 1), (784, 16, 1)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'d':>4} {'m':>4} {'M':>2}  {'numpy s':>10} {'compiled s':>10}  "
          f"{'compiled 99% band':>23}  {'speedup':>7}  {'max rel diff':>12}")
    for d, m, M in SHAPES:
        theta = _random_model(d, m, M, rng)
        S = rng.standard_normal((args.batch, d + 1))
        t_py = time_call(lambda: kernels.grad_trace(S, theta, backend="python"), args.reps)
        t_c = time_call(lambda: kernels.grad_trace(S, theta, backend="compiled"), args.reps)
        lo, hi = bootstrap_ci(t_c, rng=args.seed)
        g1, tr1 = kernels.grad_trace(S, theta, backend="python")
        g2, tr2 = kernels.grad_trace(S, theta, backend="compiled")
        diff = max(np.max(np.abs(g1 - g2)) / np.max(np.abs(g1)),
                   np.max(np.abs(tr1 - tr2)) / np.max(np.abs(tr1)))
        print(f"{d:>4} {m:>4} {M:>2}  {np.median(t_py):>10.4g} {np.median(t_c):>10.4g}  "
              f"[{lo:>10.4g}, {hi:>10.4g}]  {np.median(t_py) / np.median(t_c):>7.2f}  {diff:>12.3g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
