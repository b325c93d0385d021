"""Loss terms C, L, R, their weighted combination, and a KL self-consistency check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ode import AugmentedState, integrate_forward
from .potential import ModelParams

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LossBreakdown:
    C: float
    L: float
    R: float
    total: float
    alpha1: float
    alpha2: float


def loss_C(state: AugmentedState, d: int | None = None) -> np.ndarray:
    """Per-sample negative log-likelihood 1/2|z(T)|^2 - ell(T) + d/2 log(2 pi)."""
    z = np.atleast_2d(state.z)
    d = z.shape[1] if d is None else d
    return 0.5 * np.sum(z * z, axis=1) - state.ell + 0.5 * d * LOG_2PI


def combine(C: float, L: float, R: float, alpha1: float = 1.0, alpha2: float = 1.0) -> float:
    return alpha1 * C + L + alpha2 * R


def loss_breakdown(state: AugmentedState, alpha1: float = 1.0, alpha2: float = 1.0) -> LossBreakdown:
    """Batch means of C, L, R and the weighted total alpha1*C + L + alpha2*R."""
    C = float(np.mean(loss_C(state)))
    L = float(np.mean(state.L))
    R = float(np.mean(state.R))
    return LossBreakdown(C, L, R, combine(C, L, R, alpha1, alpha2), alpha1, alpha2)


def evaluate(x, theta: ModelParams, nt: int, alpha1: float = 1.0, alpha2: float = 1.0) -> LossBreakdown:
    state, _ = integrate_forward(x, theta, nt)
    return loss_breakdown(state, alpha1, alpha2)


def std_normal_logpdf(y) -> np.ndarray:
    y = np.atleast_2d(y)
    return -0.5 * np.sum(y * y, axis=1) - 0.5 * y.shape[1] * LOG_2PI


@dataclass
class KLCheck:
    """Two estimates of KL(pushforward of rho0 || N(0, I)).

    ``via_C`` averages log rho0 + C over one sample, using the integrated
    log-determinant ell. ``via_jacobian`` uses an independent sample and a
    finite-difference Jacobian determinant of the discrete flow map instead.
    """

    via_C: float
    via_C_se: float
    via_jacobian: float
    via_jacobian_se: float

    @property
    def discrepancy(self) -> float:
        return abs(self.via_C - self.via_jacobian)

    @property
    def stderr(self) -> float:
        return float(np.hypot(self.via_C_se, self.via_jacobian_se))


def _fd_logdet(x, theta, nt, eps=1e-5):
    n, d = x.shape
    jac = np.empty((n, d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        xp, xm = x + e, x - e
        zp = integrate_forward(xp, theta, nt)[0].z
        zm = integrate_forward(xm, theta, nt)[0].z
        # divide by the step actually taken in floating point, not by 2 * eps
        jac[:, :, k] = (zp - zm) / (xp[:, k] - xm[:, k])[:, None]
    sign, logdet = np.linalg.slogdet(jac)
    if np.any(sign <= 0):
        raise FloatingPointError("flow map Jacobian is not orientation preserving")
    return logdet


def kl_equivalence_check(x, log_rho0, theta: ModelParams, nt: int, x_independent=None) -> KLCheck:
    """Compare E[log rho0 + C] with a Jacobian-based KL estimate.

    ``log_rho0`` must evaluate the data density exactly; ``x_independent``
    is a second sample from rho0 (defaults to the second half of ``x``).
    """
    if log_rho0 is None:
        raise ValueError("the data density rho0 must be known for the KL check")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x_independent is None:
        half = x.shape[0] // 2
        x, x_independent = x[:half], x[half:]
    if len(x) < 2 or len(x_independent) < 2:
        raise ValueError("need at least two samples in each half")

    state, _ = integrate_forward(x, theta, nt)
    a = np.asarray(log_rho0(x)) + loss_C(state)

    z = integrate_forward(x_independent, theta, nt)[0].z
    b = (np.asarray(log_rho0(x_independent)) - std_normal_logpdf(z)
         - _fd_logdet(x_independent, theta, nt))
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(len(v)))
    return KLCheck(float(np.mean(a)), se(a), float(np.mean(b)), se(b))
