"""Backend selection for the fused gradient/trace kernel used by the ODE solver.

The compiled Cython core is used when it was built; otherwise, or when the
environment variable ``OTFLOW_BACKEND=python`` is set, the numpy fallback.
"""
import os

import numpy as np

from . import _pykernels
from .potential import sigma

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "python" if (_ckernels is None or os.environ.get("OTFLOW_BACKEND") == "python") else "compiled"


def compiled_available() -> bool:
    return _ckernels is not None


def grad_trace(S, theta, backend=None):
    """Gradient of Phi (n x (d+1)) and exact spatial Hessian trace (n,) at rows of S."""
    backend = backend or BACKEND
    if backend == "python":
        return _pykernels.grad_trace(S, theta)
    if backend != "compiled":
        raise ValueError(f"unknown backend {backend!r}")
    if _ckernels is None:
        raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
    net, d = theta.resnet, theta.d
    S = np.ascontiguousarray(S, dtype=float)
    a = S @ net.K0.T + net.b0
    th = [np.tanh(a)]
    u = sigma(a)
    for i in range(net.M):
        a = u @ net.K[i].T + net.bh[i]
        th.append(np.tanh(a))
        if i + 1 < net.M:
            u = u + net.h * sigma(a)
    Ax = theta.A[:, :d]
    return _ckernels.grad_trace(
        S, np.ascontiguousarray(np.stack(th, axis=1)), np.ascontiguousarray(net.K0),
        np.ascontiguousarray(net.K), np.ascontiguousarray(theta.w),
        np.ascontiguousarray(theta.A), np.ascontiguousarray(theta.b),
        float(net.h), float(np.sum(Ax * Ax)),
    )
