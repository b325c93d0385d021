"""Fixed-step RK4 integration of the augmented flow system.

Per sample the state is (z, ell, L, R) with

    dz/dt   = -grad_x Phi(z, t)
    dell/dt = -tr(Hess_x Phi(z, t))
    dL/dt   = 1/2 |grad_x Phi|^2
    dR/dt   = |dPhi/dt - 1/2 |grad_x Phi|^2|

Internally the state of a batch is packed as an ``(n, d + 3)`` array.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .potential import ModelParams, potential_gradient


class DivergenceError(FloatingPointError):
    """Non-finite values appeared while integrating or training."""

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


@dataclass
class AugmentedState:
    z: np.ndarray     # (n, d)
    ell: np.ndarray   # (n,)
    L: np.ndarray     # (n,)
    R: np.ndarray     # (n,)

    @classmethod
    def initial(cls, x) -> "AugmentedState":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        return cls(x.copy(), np.zeros(n), np.zeros(n), np.zeros(n))

    def pack(self) -> np.ndarray:
        return np.column_stack([self.z, self.ell, self.L, self.R])

    @classmethod
    def unpack(cls, Y: np.ndarray) -> "AugmentedState":
        return cls(Y[:, :-3], Y[:, -3], Y[:, -2], Y[:, -1])


@dataclass
class SolveReport:
    nfe: int
    nt: int
    direction: str


def _space_time(z, t):
    return np.column_stack([z, np.full(z.shape[0], float(t))])


def _check_finite(arr, what, step=None):
    bad = ~np.isfinite(arr)
    if bad.any():
        rows = np.nonzero(bad.reshape(arr.shape[0], -1).any(axis=1))[0]
        raise DivergenceError(f"non-finite {what} at sample {int(rows[0])}",
                              step=step, sample=int(rows[0]))


def _packed_rhs(Y, t, theta, backend=None):
    d = theta.d
    grad, tr = kernels.grad_trace(_space_time(Y[:, :d], t), theta, backend=backend)
    gx = grad[:, :d]
    half_sq = 0.5 * np.sum(gx * gx, axis=1)
    out = np.empty_like(Y)
    out[:, :d] = -gx
    out[:, d] = -tr
    out[:, d + 1] = half_sq
    out[:, d + 2] = np.abs(grad[:, d] - half_sq)
    return out


def dynamics(state: AugmentedState, t: float, theta: ModelParams, backend=None) -> AugmentedState:
    """Time derivative of the augmented state from one gradient + trace pass."""
    out = _packed_rhs(state.pack(), t, theta, backend)
    _check_finite(out, "dynamics")
    return AugmentedState.unpack(out)


def _rk4(f, Y, t0, dt, nt, step_check=True):
    t = t0
    for k in range(nt):
        k1 = f(Y, t)
        k2 = f(Y + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = f(Y + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = f(Y + dt * k3, t + dt)
        Y = Y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (k + 1) * dt
        if step_check:
            _check_finite(Y, "state", step=k)
    return Y


def integrate_forward(x, theta: ModelParams, nt: int = 8, T: float = 1.0, backend=None):
    """Push samples x (n, d) from t=0 to t=T. Returns ``(AugmentedState, SolveReport)``."""
    _check_grid(nt, T)
    Y0 = AugmentedState.initial(x).pack()
    if Y0.shape[1] - 3 != theta.d:
        raise ValueError(f"samples have dimension {Y0.shape[1] - 3}, model expects {theta.d}")
    Y = _rk4(lambda Y, t: _packed_rhs(Y, t, theta, backend), Y0, 0.0, T / nt, nt)
    return AugmentedState.unpack(Y), SolveReport(nfe=4 * nt, nt=nt, direction="forward")


def integrate_inverse(y, theta: ModelParams, nt: int = 8, T: float = 1.0,
                      return_report: bool = False):
    """Pull latent points y back from t=T to t=0, i.e. evaluate the inverse flow.

    Only the position is integrated; the same RK4 scheme runs on the
    reversed time grid.
    """
    _check_grid(nt, T)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    d = theta.d
    if y.shape[1] != d:
        raise ValueError(f"samples have dimension {y.shape[1]}, model expects {d}")

    # the inverse map needs no trace, so only the gradient pass runs
    def rhs(Z, t):
        grad, _ = potential_gradient(_space_time(Z, t), theta)
        return -grad[:, :d]

    Z = _rk4(rhs, y.copy(), T, -T / nt, nt)
    if return_report:
        return Z, SolveReport(nfe=4 * nt, nt=nt, direction="inverse")
    return Z


def flow_with_path(x, theta: ModelParams, nt: int = 8, T: float = 1.0):
    """Forward solve that also returns the packed state after every step, (nt+1, n, d+3)."""
    _check_grid(nt, T)
    Y = AugmentedState.initial(x).pack()
    path = [Y]
    dt = T / nt
    for k in range(nt):
        Y = _rk4(lambda Y, t: _packed_rhs(Y, t, theta), Y, k * dt, dt, 1)
        path.append(Y)
    return np.stack(path)


def _check_grid(nt, T):
    if int(nt) != nt or nt < 1:
        raise ValueError(f"nt must be a positive integer, got {nt}")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
