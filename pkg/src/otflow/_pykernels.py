"""Pure-numpy fused gradient + exact trace (fallback for the compiled core)."""
import numpy as np

from .potential import exact_trace, potential_gradient


def grad_trace(S, theta):
    grad, ws = potential_gradient(S, theta)
    return np.asarray(grad), exact_trace(S, theta, ws)
