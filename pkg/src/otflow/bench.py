"""Exact trace vs Hutchinson estimator: wall time over dimension, error over probe count.

Rows of the result table (also the CSV columns, in this order):

    d, method, K, median_seconds, ci_lo, ci_hi, rel_err_median, rel_err_ci_lo, rel_err_ci_hi

``method`` is ``exact``, ``hutchinson`` or ``empty`` (a no-op timed with
the same harness, used to bound the harness overhead). Timing bands are
99% bootstrap intervals of the mean (4000 resamples of size 16). Error
columns are empty for exact/empty rows.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .metrics import bootstrap_ci
from .potential import exact_trace, hutchinson_trace, init_params, potential_gradient

CSV_COLUMNS = ("d", "method", "K", "median_seconds", "ci_lo", "ci_hi",
               "rel_err_median", "rel_err_ci_lo", "rel_err_ci_hi")

WARMUP = 3


def time_call(fn, reps: int, warmup: int = WARMUP) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(reps)
    for k in range(reps):
        t0 = time.perf_counter()
        fn()
        out[k] = time.perf_counter() - t0
    return out


def _random_model(d, m, M, rng):
    # weights well away from the near-identity init so the Hessian is not tiny
    th = init_params(d, m, M, rng=rng, small=0.5)
    th.resnet.b0[:] = rng.uniform(-0.5, 0.5, size=m)
    th.resnet.bh[:] = rng.uniform(-0.5, 0.5, size=th.resnet.bh.shape)
    return th


@dataclass
class BenchResult:
    rows: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)     # (d, method, K) -> raw seconds
    rel_errors: dict = field(default_factory=dict)  # (d, K) -> per-rep median relative error

    def row(self, d, method, K=0) -> dict:
        for r in self.rows:
            if r["d"] == d and r["method"] == method and r["K"] == K:
                return r
        raise KeyError((d, method, K))

    def time_ratio(self, d) -> float:
        """Median exact-trace time over median K=1 Hutchinson time."""
        return self.row(d, "exact")["median_seconds"] / self.row(d, "hutchinson", 1)["median_seconds"]

    def linear_fit_r2(self) -> float:
        """R^2 of a least-squares line through (d, median exact time)."""
        ex = [r for r in self.rows if r["method"] == "exact"]
        d = np.array([r["d"] for r in ex], dtype=float)
        t = np.array([r["median_seconds"] for r in ex])
        coef = np.polyfit(d, t, 1)
        resid = t - np.polyval(coef, d)
        return float(1.0 - np.sum(resid ** 2) / np.sum((t - t.mean()) ** 2))

    def error_slope(self, d=None) -> float:
        """Log-log slope of median relative error against K."""
        d = d if d is not None else max(k[0] for k in self.rel_errors)
        Ks = sorted(K for (dd, K) in self.rel_errors if dd == d)
        med = [self.row(d, "hutchinson", K)["rel_err_median"] for K in Ks]
        return float(np.polyfit(np.log(Ks), np.log(med), 1)[0])

    def harness_overhead(self, d) -> float:
        """Median empty-call time as a fraction of the median exact-trace time."""
        return self.row(d, "empty")["median_seconds"] / self.row(d, "exact")["median_seconds"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])

    def summary(self) -> str:
        lines = []
        for d in sorted({r["d"] for r in self.rows}):
            ex = self.row(d, "exact")
            lines.append(f"d={d}: exact {ex['median_seconds']:.6g} s "
                         f"[{ex['ci_lo']:.6g}, {ex['ci_hi']:.6g}], "
                         f"exact / hutchinson(K=1) = {self.time_ratio(d):.6g}")
        lines.append(f"exact time vs d: linear R^2 = {self.linear_fit_r2():.6g}")
        if self.rel_errors:
            lines.append(f"relative error vs K: log-log slope = {self.error_slope():.6g}")
        return "\n".join(lines)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def bench_trace(dims=(43, 63, 784), m: int = 16, M: int = 1, batch: int = 1024, reps: int = 20,
                probe_counts=(1, 4, 16, 64), seed: int = 0, error_dim=None,
                error_reps=None) -> BenchResult:
    """Time both trace methods at each d; measure estimator error at each K.

    Timing covers the trace computation only; the gradient pass that both
    methods share is done once beforehand. Relative errors are computed
    per sample against the exact trace, on dimension ``error_dim``
    (default: the largest d).
    """
    if reps < 5:
        raise ValueError("need at least 5 timing repetitions")
    rng = np.random.default_rng(seed)
    res = BenchResult()
    error_dim = max(dims) if error_dim is None else error_dim
    error_reps = reps if error_reps is None else error_reps

    for d in dims:
        theta = _random_model(d, m, M, rng)
        S = rng.standard_normal((batch, d + 1))
        _, ws = potential_gradient(S, theta)
        probe_rng = np.random.default_rng(rng.integers(2**63))

        cells = {("exact", 0): lambda: exact_trace(S, theta, ws),
                 ("empty", 0): lambda: None}
        for K in probe_counts:
            cells[("hutchinson", K)] = (
                lambda K=K: hutchinson_trace(S, theta, ws, num_probes=K, rng=probe_rng))
        for (method, K), fn in cells.items():
            secs = time_call(fn, reps)
            res.timings[(d, method, K)] = secs
            lo, hi = bootstrap_ci(secs, rng=rng.integers(2**63))
            res.rows.append({"d": d, "method": method, "K": K,
                             "median_seconds": float(np.median(secs)), "ci_lo": lo, "ci_hi": hi,
                             "rel_err_median": None, "rel_err_ci_lo": None, "rel_err_ci_hi": None})

        if d == error_dim:
            exact = exact_trace(S, theta, ws)
            for K in probe_counts:
                meds = np.array([
                    np.median(np.abs(hutchinson_trace(S, theta, ws, num_probes=K, rng=probe_rng)
                                     - exact) / np.abs(exact))
                    for _ in range(error_reps)])
                res.rel_errors[(d, K)] = meds
                lo, hi = bootstrap_ci(meds, rng=rng.integers(2**63))
                r = res.row(d, "hutchinson", K)
                r.update(rel_err_median=float(np.median(meds)), rel_err_ci_lo=lo, rel_err_ci_hi=hi)
    return res
