"""Independent reference implementations used as test oracles.

Nothing here shares code with the package beyond the parameter container:
the potential is re-evaluated one sample at a time with a different
formula for the activation, and derivatives come from finite differences.
"""
import numpy as np


def act(x):
    return np.logaddexp(x, -x)


def potential_loop(s, theta):
    """Phi at a single space-time point, written out layer by layer."""
    net = theta.resnet
    s = np.asarray(s, dtype=float)
    u = act(net.K0 @ s + net.b0)
    for i in range(net.M):
        u = u + net.h * act(net.K[i] @ u + net.bh[i])
    As = theta.A @ s
    return float(theta.w @ u + 0.5 * As @ As + theta.b @ s + theta.c)


def fd_gradient(f, s, eps=1e-5):
    s = np.asarray(s, dtype=float)
    g = np.empty_like(s)
    for k in range(s.size):
        e = np.zeros_like(s)
        e[k] = eps
        g[k] = (f(s + e) - f(s - e)) / (2 * eps)
    return g


def fd_hessian_trace(grad_fn, s, d, eps=1e-5):
    """Spatial Hessian trace from d central-difference columns of an analytic gradient."""
    s = np.asarray(s, dtype=float)
    tr = 0.0
    for k in range(d):
        e = np.zeros_like(s)
        e[k] = eps
        tr += (grad_fn(s + e)[k] - grad_fn(s - e)[k]) / (2 * eps)
    return tr


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_model(d, m, M, rng, scale=0.5):
    """A generic model with all weights O(1): far from the near-identity init."""
    from otflow.potential import ModelParams, ResNetParams, default_rank
    r = default_rank(d)
    net = ResNetParams(K0=rng.uniform(-1, 1, (m, d + 1)) / np.sqrt(d + 1),
                       b0=rng.uniform(-scale, scale, m),
                       K=rng.uniform(-1, 1, (M, m, m)) / np.sqrt(m),
                       bh=rng.uniform(-scale, scale, (M, m)), h=1.0)
    return ModelParams(w=rng.uniform(-1, 1, m), resnet=net,
                       A=rng.uniform(-scale, scale, (r, d + 1)),
                       b=rng.uniform(-scale, scale, d + 1), c=float(rng.uniform(-1, 1)))


def a_only_model(m=4, M=1):
    """d = 1 model with Phi = x^2 / 2, i.e. dz/dt = -z."""
    from otflow.potential import zero_params
    th = zero_params(1, m, M, r=1)
    th.A[:] = [[1.0, 0.0]]
    return th


def linear_model(b, m=4, M=1):
    from otflow.potential import zero_params
    b = np.asarray(b, dtype=float)
    th = zero_params(b.size - 1, m, M)
    th.b[:] = b
    return th


def fd_param_gradient(f, theta, eps=1e-4):
    """Central differences of a scalar function of the parameters, in flat-vector order."""
    p = theta.to_vector()
    g = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = eps
        g[i] = (f(theta.from_vector(p + e)) - f(theta.from_vector(p - e))) / (2 * eps)
    return g


def grad_check_ok(g, fd, rel=1e-5, abs_=1e-8):
    return bool(np.all(np.abs(g - fd) <= np.maximum(rel * np.abs(fd), abs_)))
