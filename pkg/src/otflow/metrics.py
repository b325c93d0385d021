"""Sample-quality metrics: MMD, inverse error, bootstrap intervals and the eval report."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .objective import loss_C
from .ode import integrate_forward, integrate_inverse
from .potential import ModelParams

_TILE = 2048


def _canonical(X):
    # row order must not leak into the result, otherwise mmd(X, Q) and
    # mmd(Q, X) (or two orderings of one multiset) differ in the last bits
    X = np.asarray(X, dtype=float)
    return X[np.lexsort(X.T[::-1])] if X.shape[0] > 1 else X


def _kernel_mean(X, Q) -> float:
    total = 0.0
    for i in range(0, len(X), _TILE):
        for j in range(0, len(Q), _TILE):
            D = cdist(X[i:i + _TILE], Q[j:j + _TILE], "sqeuclidean")
            total += float(np.sum(np.exp(-0.5 * D)))
    return total / (len(X) * len(Q))


def mmd(X, Q) -> float:
    """Biased (V-statistic) squared MMD with kernel exp(-|x - q|^2 / 2)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if X.shape[1] != Q.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Q.shape[1]}")
    if len(X) == 0 or len(Q) == 0:
        raise ValueError("both samples must be nonempty")
    X, Q = _canonical(X), _canonical(Q)
    # the cross term is always evaluated in one fixed argument order
    a, b = (X, Q) if (X.shape, X.tobytes()) <= (Q.shape, Q.tobytes()) else (Q, X)
    return (_kernel_mean(X, X) + _kernel_mean(Q, Q)) - 2.0 * _kernel_mean(a, b)


def inverse_error(X, theta: ModelParams, nt: int, T: float = 1.0) -> float:
    """Mean Euclidean residual |f^{-1}(f(x)) - x| with both solves on an nt-step grid."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    z = integrate_forward(X, theta, nt, T)[0].z
    back = integrate_inverse(z, theta, nt, T)
    return float(np.mean(np.linalg.norm(back - X, axis=1)))


def bootstrap_ci(samples, resamples: int = 4000, size: int = 16, level: float = 0.99,
                 statistic=np.mean, rng=0):
    """Percentile bootstrap interval of ``statistic`` over resamples drawn with replacement.

    Defaults follow the timing protocol: 4000 resamples of size 16, 99%
    interval from the 0.5 and 99.5 percentiles.
    """
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("bootstrap needs at least two observations")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if np.all(x == x[0]):
        return float(x[0]), float(x[0])
    size = x.size if size is None else size
    idx = np.random.default_rng(rng).integers(0, x.size, size=(resamples, size))
    stats = statistic(x[idx], axis=1)
    tail = 50.0 * (1.0 - level)
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    mmd: float
    inverse_error: float
    test_C: float
    nfe_forward: int
    nfe_inverse: int
    time_forward: float
    time_inverse: float
    time_mmd: float
    nt: int
    n_test: int
    n_generated: int
    coordinates: str = "standardized"

    def validate(self) -> None:
        for k in ("mmd", "inverse_error", "test_C", "time_forward", "time_inverse", "time_mmd"):
            if not np.isfinite(getattr(self, k)):
                raise FloatingPointError(f"non-finite {k} in evaluation report")
        if self.nfe_forward != 4 * self.nt or self.nfe_inverse != 4 * self.nt:
            raise ValueError("NFE counts inconsistent with the RK4 step count")

    def to_json_line(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def summary(self) -> str:
        return "\n".join([
            f"test C         {self.test_C:.6g}",
            f"inverse error  {self.inverse_error:.6g}",
            f"MMD            {self.mmd:.6g}  ({self.n_generated} generated, {self.coordinates} coordinates)",
            f"NFE            forward {self.nfe_forward}, inverse {self.nfe_inverse}  (nt={self.nt})",
            f"wall time      forward {self.time_forward:.6g} s, inverse {self.time_inverse:.6g} s,"
            f" MMD {self.time_mmd:.6g} s",
        ])


def evaluate_model(X, theta: ModelParams, nt: int, n_generate: int = 100_000, seed=0,
                   T: float = 1.0) -> EvalReport:
    """Test C, inverse error and MMD(X, f^{-1}(Y)) for standardized test data X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != theta.d:
        raise ValueError(f"data has dimension {X.shape[1]}, model expects {theta.d}")
    t0 = time.perf_counter()
    state, rep_f = integrate_forward(X, theta, nt, T)
    t_fwd = time.perf_counter() - t0
    test_C = float(np.mean(loss_C(state)))
    back = integrate_inverse(state.z, theta, nt, T)
    inv = float(np.mean(np.linalg.norm(back - X, axis=1)))

    Y = np.random.default_rng(seed).standard_normal((n_generate, theta.d))
    t0 = time.perf_counter()
    G, rep_i = integrate_inverse(Y, theta, nt, T, return_report=True)
    t_inv = time.perf_counter() - t0
    t0 = time.perf_counter()
    dist = mmd(X, G)
    t_mmd = time.perf_counter() - t0
    report = EvalReport(dist, inv, test_C, rep_f.nfe, rep_i.nfe, t_fwd, t_inv, t_mmd,
                        nt, len(X), n_generate)
    report.validate()
    return report
