"""Scalar potential Phi(s; theta) with analytic gradient and Hessian trace.

The potential is

    Phi(s) = w^T N(s) + 1/2 s^T (A^T A) s + b^T s + c,      s = (x, t)

where N is a residual network with an opening layer and M hidden layers,
all using the activation sigma(x) = log(exp(x) + exp(-x)).

All kernels here are batched: ``s`` is an ``(n, d+1)`` array with one
space-time point per row (a single ``(d+1,)`` point is also accepted).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ConfigurationError",
    "ResNetParams",
    "ModelParams",
    "ParamGradient",
    "TraceWorkspace",
    "init_params",
    "zero_params",
    "sigma",
    "dsigma",
    "d2sigma",
    "potential_forward",
    "potential_gradient",
    "exact_trace",
    "hessian_quadratic_form",
    "hutchinson_trace",
    "draw_probes",
]

# rows * m * d elements of the running Jacobian held at once
_J_CHUNK_ELEMS = 1 << 22


class ConfigurationError(ValueError):
    """Parameter shapes or inputs are mutually inconsistent."""


# --------------------------------------------------------------------------
# activation
# --------------------------------------------------------------------------

def sigma(x):
    """log(e^x + e^-x), evaluated as |x| + log1p(e^{-2|x|}) so it never overflows."""
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax))


def dsigma(x):
    return np.tanh(x)


def d2sigma(x):
    th = np.tanh(x)
    return 1.0 - th * th


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class ResNetParams:
    """Weights of N: opening layer (K0, b0) and hidden layers K[i], bh[i].

    ``K`` is stacked as ``(M, m, m)`` and ``bh`` as ``(M, m)``.
    """

    K0: np.ndarray
    b0: np.ndarray
    K: np.ndarray
    bh: np.ndarray
    h: float = 1.0

    @property
    def m(self) -> int:
        return self.K0.shape[0]

    @property
    def M(self) -> int:
        return self.K.shape[0]

    @property
    def d(self) -> int:
        return self.K0.shape[1] - 1


@dataclass
class ModelParams:
    """All trainable weights theta = (w, theta_N, A, b, c)."""

    w: np.ndarray
    resnet: ResNetParams
    A: np.ndarray
    b: np.ndarray
    c: float

    # flattening order used by the optimizer and checkpoints
    FIELDS = ("w", "K0", "b0", "K", "bh", "A", "b", "c")

    def __post_init__(self):
        self.validate()

    @property
    def d(self) -> int:
        return self.resnet.d

    @property
    def m(self) -> int:
        return self.resnet.m

    @property
    def M(self) -> int:
        return self.resnet.M

    @property
    def r(self) -> int:
        return self.A.shape[0]

    def validate(self) -> None:
        net = self.resnet
        if net.K0.ndim != 2 or net.K0.shape[1] < 2:
            raise ConfigurationError(f"K0 must be m x (d+1) with d >= 1, got {net.K0.shape}")
        m, d1 = net.K0.shape
        if net.M < 1:
            raise ConfigurationError("ResNet needs at least one hidden layer (M >= 1)")
        if net.K.shape[1:] != (m, m):
            raise ConfigurationError(f"hidden K must be (M, {m}, {m}), got {net.K.shape}")
        if net.b0.shape != (m,) or net.bh.shape != (net.M, m):
            raise ConfigurationError("bias shapes do not match width m")
        if not net.h > 0:
            raise ConfigurationError(f"ResNet step h must be positive, got {net.h}")
        if self.w.shape != (m,):
            raise ConfigurationError(f"w must have length m={m}, got {self.w.shape}")
        if self.A.ndim != 2 or self.A.shape[1] != d1 or self.A.shape[0] > d1:
            raise ConfigurationError(f"A must be r x {d1} with r <= {d1}, got {self.A.shape}")
        if self.b.shape != (d1,):
            raise ConfigurationError(f"b must have length {d1}, got {self.b.shape}")

    # -- (de)serialization helpers ------------------------------------------

    def arrays(self) -> dict:
        net = self.resnet
        return {
            "w": self.w, "K0": net.K0, "b0": net.b0, "K": net.K, "bh": net.bh,
            "A": self.A, "b": self.b, "c": np.asarray(float(self.c)),
        }

    @classmethod
    def from_arrays(cls, arrs: dict, h: float = 1.0) -> "ModelParams":
        net = ResNetParams(
            K0=np.array(arrs["K0"], dtype=float), b0=np.array(arrs["b0"], dtype=float),
            K=np.array(arrs["K"], dtype=float), bh=np.array(arrs["bh"], dtype=float), h=h,
        )
        return cls(w=np.array(arrs["w"], dtype=float), resnet=net,
                   A=np.array(arrs["A"], dtype=float), b=np.array(arrs["b"], dtype=float),
                   c=float(np.asarray(arrs["c"])))

    def to_vector(self) -> np.ndarray:
        a = self.arrays()
        return np.concatenate([np.ravel(a[k]) for k in self.FIELDS])

    def from_vector(self, vec: np.ndarray) -> "ModelParams":
        """New params shaped like ``self`` with values taken from ``vec``."""
        a = self.arrays()
        if len(vec) != self.size:
            raise ConfigurationError(f"vector length {len(vec)} does not match {self.size} parameters")
        out, pos = {}, 0
        for k in self.FIELDS:
            size = a[k].size
            out[k] = np.asarray(vec[pos:pos + size], dtype=float).reshape(a[k].shape)
            pos += size
        return ModelParams.from_arrays(out, h=self.resnet.h)

    def copy(self) -> "ModelParams":
        return self.from_vector(self.to_vector())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays().values())


# Gradients of a scalar objective live in the same container as the weights.
ParamGradient = ModelParams


def default_rank(d: int) -> int:
    return min(10, d)


def init_params(d: int, m: int, M: int = 1, r: Optional[int] = None,
                rng=None, h: float = 1.0, small: float = 1e-3) -> ModelParams:
    """Glorot-uniform K matrices; w, b, A tiny uniform; zero ResNet biases; c = 0."""
    rng = np.random.default_rng(rng)
    r = default_rank(d) if r is None else r
    if not 1 <= r <= d + 1:
        raise ConfigurationError(f"rank r={r} must lie in [1, {d + 1}]")

    def glorot(shape, fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    K0 = glorot((m, d + 1), d + 1, m)
    K = np.stack([glorot((m, m), m, m) for _ in range(M)])
    net = ResNetParams(K0=K0, b0=np.zeros(m), K=K, bh=np.zeros((M, m)), h=h)
    return ModelParams(
        w=rng.uniform(-small, small, size=m),
        resnet=net,
        A=rng.uniform(-small, small, size=(r, d + 1)),
        b=rng.uniform(-small, small, size=d + 1),
        c=0.0,
    )


def zero_params(d: int, m: int, M: int = 1, r: Optional[int] = None, h: float = 1.0) -> ModelParams:
    """Every weight zero: Phi == 0, i.e. the identity flow."""
    r = default_rank(d) if r is None else r
    net = ResNetParams(K0=np.zeros((m, d + 1)), b0=np.zeros(m),
                       K=np.zeros((M, m, m)), bh=np.zeros((M, m)), h=h)
    return ModelParams(w=np.zeros(m), resnet=net, A=np.zeros((r, d + 1)),
                       b=np.zeros(d + 1), c=0.0)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _as_batch(s, theta: ModelParams) -> np.ndarray:
    S = np.asarray(s, dtype=float)
    if S.ndim == 1:
        S = S[None, :]
    if S.ndim != 2 or S.shape[1] != theta.d + 1:
        raise ConfigurationError(
            f"expected space-time points of length {theta.d + 1}, got shape {np.shape(s)}")
    return S


def _resnet_forward(S, net: ResNetParams):
    """Pre-activations a_0..a_M and states u_0..u_M."""
    pre = [S @ net.K0.T + net.b0]
    u = [sigma(pre[0])]
    for i in range(net.M):
        a = u[-1] @ net.K[i].T + net.bh[i]
        pre.append(a)
        u.append(u[-1] + net.h * sigma(a))
    return pre, u


def potential_forward(s, theta: ModelParams):
    """Phi at each row of ``s``; a scalar when ``s`` is a single point."""
    S = _as_batch(s, theta)
    _, u = _resnet_forward(S, theta.resnet)
    SA = S @ theta.A.T
    phi = u[-1] @ theta.w + 0.5 * np.sum(SA * SA, axis=1) + S @ theta.b + theta.c
    return phi[0] if np.ndim(s) == 1 else phi


@dataclass
class TraceWorkspace:
    """Intermediates of one gradient pass, reused by the trace kernels.

    ``pre[i]``/``u[i]`` are the layer pre-activations and states; ``zbp[i]``
    holds the backpropagated vector entering layer i (``zbp[M+1] = w``).
    The running Jacobian J is built inside :func:`exact_trace` and
    overwritten layer by layer.
    """

    S: np.ndarray
    theta: ModelParams
    pre: list
    u: list
    zbp: list
    single: bool = False
    _key: tuple = field(default=(), repr=False)

    def check(self, s, theta: ModelParams) -> None:
        if theta is not self.theta or self._key != _param_key(theta):
            raise ConfigurationError("workspace was built for different parameters")
        S = np.asarray(s, dtype=float)
        if S.ndim == 1:
            S = S[None, :]
        if S is not self.S and not np.array_equal(S, self.S):
            raise ConfigurationError("workspace was built for a different input s")


def _param_key(theta: ModelParams) -> tuple:
    # cheap fingerprint that catches in-place edits of the weights between calls
    a = theta.arrays()
    return tuple(float(np.sum(a[k])) for k in ModelParams.FIELDS) + (theta.resnet.h,)


def potential_gradient(s, theta: ModelParams):
    """Gradient of Phi with respect to s = (x, t), plus the workspace.

    Returns ``(grad, ws)`` with ``grad`` shaped like ``s``; the spatial
    velocity is ``-grad[..., :d]`` and ``grad[..., d]`` is dPhi/dt.
    """
    S = _as_batch(s, theta)
    net = theta.resnet
    pre, u = _resnet_forward(S, net)
    M = net.M
    zbp = [None] * (M + 2)
    zbp[M + 1] = np.broadcast_to(theta.w, (S.shape[0], net.m))
    for i in range(M, 0, -1):
        zn = zbp[i + 1]
        zbp[i] = zn + net.h * (dsigma(pre[i]) * zn) @ net.K[i - 1]
    zbp[0] = (dsigma(pre[0]) * zbp[1]) @ net.K0
    grad = zbp[0] + (S @ theta.A.T) @ theta.A + theta.b
    ws = TraceWorkspace(S=S, theta=theta, pre=pre, u=u, zbp=zbp,
                        single=np.ndim(s) == 1, _key=_param_key(theta))
    return (grad[0] if ws.single else grad), ws


def exact_trace(s, theta: ModelParams, ws: TraceWorkspace):
    """Exact trace of the spatial Hessian block of Phi.

    Opening layer costs O(m d) per sample, each hidden layer O(m^2 d);
    the Hessian itself is never formed.
    """
    ws.check(s, theta)
    net = theta.resnet
    d, h = theta.d, net.h
    K0x = net.K0[:, :d]
    n = ws.S.shape[0]
    out = (d2sigma(ws.pre[0]) * ws.zbp[1]) @ np.sum(K0x * K0x, axis=1)
    Ax = theta.A[:, :d]
    out = out + np.sum(Ax * Ax)

    step = max(1, _J_CHUNK_ELEMS // max(1, net.m * d))
    for lo in range(0, n, step):
        sl = slice(lo, lo + step)
        J = dsigma(ws.pre[0][sl])[:, :, None] * K0x[None]
        acc = np.zeros(J.shape[0])
        for i in range(1, net.M + 1):
            KJ = np.matmul(net.K[i - 1], J)
            coef = d2sigma(ws.pre[i][sl]) * ws.zbp[i + 1][sl]
            acc += np.einsum("nm,nm->n", coef, np.einsum("nmk,nmk->nm", KJ, KJ))
            if i < net.M:
                KJ *= h * dsigma(ws.pre[i][sl])[:, :, None]
                J += KJ
        out[sl] += h * acc
    return out[0] if ws.single else out


def hessian_quadratic_form(theta: ModelParams, ws: TraceWorkspace, e: np.ndarray) -> np.ndarray:
    """e^T (spatial Hessian) e per row, by forward-mode differentiation of the gradient pass.

    ``e`` is ``(n, d)``: one spatial direction per sample.
    """
    net = theta.resnet
    d, h, M = theta.d, net.h, net.M
    K0x = net.K0[:, :d]
    dpre = [e @ K0x.T]
    du = dsigma(ws.pre[0]) * dpre[0]
    for i in range(1, M + 1):
        dpre.append(du @ net.K[i - 1].T)
        if i < M:
            du = du + h * dsigma(ws.pre[i]) * dpre[i]
    dz = None
    for i in range(M, 0, -1):
        zn = ws.zbp[i + 1]
        inner = d2sigma(ws.pre[i]) * dpre[i] * zn
        if dz is not None:
            inner = inner + dsigma(ws.pre[i]) * dz
            dz = dz + h * inner @ net.K[i - 1]
        else:
            dz = h * inner @ net.K[i - 1]
    inner0 = d2sigma(ws.pre[0]) * dpre[0] * ws.zbp[1] + dsigma(ws.pre[0]) * dz
    hv = inner0 @ K0x
    Ae = e @ theta.A[:, :d].T
    return np.sum(e * hv, axis=1) + np.sum(Ae * Ae, axis=1)


def draw_probes(rng, shape, dist: str = "rademacher") -> np.ndarray:
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape).astype(float) * 2.0 - 1.0
    if dist == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown probe distribution {dist!r}; use 'rademacher' or 'gaussian'")


def hutchinson_trace(s, theta: ModelParams, ws: TraceWorkspace, num_probes: int = 1,
                     dist: str = "rademacher", rng=None, probes=None):
    """Hutchinson estimate (1/K) sum_k e_k^T H e_k of the spatial Hessian trace.

    Pass ``probes`` as a ``(K, n, d)`` array to fix the directions,
    otherwise ``num_probes`` are drawn from ``dist`` using ``rng``.
    """
    ws.check(s, theta)
    n, d = ws.S.shape[0], theta.d
    if probes is None:
        if num_probes < 1:
            raise ValueError("need at least one probe vector")
        probes = draw_probes(np.random.default_rng(rng), (num_probes, n, d), dist)
    else:
        probes = np.asarray(probes, dtype=float)
        if probes.ndim == 2:
            probes = probes[:, None, :] if n == 1 else probes[None]
        if probes.shape[0] < 1:
            raise ValueError("need at least one probe vector")
    est = np.zeros(n)
    for e in probes:
        est += hessian_quadratic_form(theta, ws, e)
    est /= probes.shape[0]
    return est[0] if ws.single else est
