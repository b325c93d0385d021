"""Minimal reverse-mode tape for differentiating the objective through the RK4 solve.

The forward pass records every primitive it evaluates; :func:`backward`
walks the records in reverse and accumulates adjoints into the parameter
leaves. Gradients therefore belong to the discrete scheme that was run
(discretize-then-optimize).

The primitive set is deliberately closed. Each entry below has a forward
rule (``_FWD``) and a vector-Jacobian rule (``_VJP``).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .objective import LOG_2PI
from .ode import DivergenceError
from .potential import ModelParams, d2sigma, draw_probes, dsigma, sigma

__all__ = ["Var", "Tape", "ObjectiveConfig", "record_objective", "backward"]


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _vjp_sum(g, a, axis):
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


def _vjp_slice(g, a, start, stop):
    out = np.zeros(a.shape)
    out[..., start:stop] = g
    return (out,)


def _vjp_concat(g, *xs):
    bounds = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=-1))


def _vjp_d2sigma(g, a):
    th = np.tanh(a)
    return (g * (-2.0 * th * (1.0 - th * th)),)


_FWD = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "scale": lambda a, c: c * a,
    "matmul": lambda a, b: np.matmul(a, b),
    "transpose": lambda a: a.T,
    "sigma": sigma,
    "dsigma": dsigma,
    "d2sigma": d2sigma,
    "abs": np.abs,
    "sum": lambda a, axis: np.sum(a, axis=axis),
    "slice": lambda a, start, stop: a[..., start:stop],
    "concat": lambda *xs: np.concatenate(xs, axis=-1),
    "reshape": lambda a, shape: np.reshape(a, shape),
}

# each rule maps (upstream adjoint, *input values, **attrs) -> adjoints per input
_VJP = {
    "add": lambda g, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    "sub": lambda g, a, b: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    "mul": lambda g, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    "scale": lambda g, a, c: (c * g,),
    "matmul": lambda g, a, b: (_unbroadcast(np.matmul(g, _swap(b)), a.shape),
                               _unbroadcast(np.matmul(_swap(a), g), b.shape)),
    "transpose": lambda g, a: (g.T,),
    "sigma": lambda g, a: (g * np.tanh(a),),
    "dsigma": lambda g, a: (g * d2sigma(a),),
    "d2sigma": _vjp_d2sigma,
    "abs": lambda g, a: (g * np.sign(a),),
    "sum": _vjp_sum,
    "slice": _vjp_slice,
    "concat": _vjp_concat,
    "reshape": lambda g, a, shape: (np.reshape(g, a.shape),),
}


class Var:
    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape.values[self.idx]

    @property
    def shape(self):
        return np.shape(self.value)


class Tape:
    """Append-only record of primitive evaluations.

    ``ops[i]`` is ``(op, input indices, attrs)`` with ``op is None`` for
    leaves; ``values[i]`` is the forward result. Append order is a
    topological order.
    """

    def __init__(self):
        self.ops: list = []
        self.values: list = []
        self.needs_grad: list = []
        self.params: dict = {}
        self.root: Optional[int] = None
        self.info: dict = {}

    def __len__(self):
        return len(self.ops)

    def _push(self, op, inputs, attrs, value, needs):
        self.ops.append((op, inputs, attrs))
        self.values.append(value)
        self.needs_grad.append(needs)
        return Var(self, len(self.ops) - 1)

    # leaves
    def param(self, name, value) -> Var:
        v = self._push(None, (), {}, np.asarray(value, dtype=float), True)
        self.params[name] = v.idx
        return v

    def const(self, value) -> Var:
        return self._push(None, (), {}, np.asarray(value, dtype=float), False)

    def apply(self, op, *inputs: Var, **attrs) -> Var:
        value = _FWD[op](*(v.value for v in inputs), **attrs)
        needs = any(self.needs_grad[v.idx] for v in inputs)
        return self._push(op, tuple(v.idx for v in inputs), attrs, value, needs)

    # thin wrappers so recording code reads like the math
    def add(self, a, b): return self.apply("add", a, b)
    def sub(self, a, b): return self.apply("sub", a, b)
    def mul(self, a, b): return self.apply("mul", a, b)
    def scale(self, a, c): return self.apply("scale", a, c=float(c))
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def T(self, a): return self.apply("transpose", a)
    def sigma(self, a): return self.apply("sigma", a)
    def dsigma(self, a): return self.apply("dsigma", a)
    def d2sigma(self, a): return self.apply("d2sigma", a)
    def abs(self, a): return self.apply("abs", a)
    def sum(self, a, axis=None): return self.apply("sum", a, axis=axis)
    def cols(self, a, start, stop): return self.apply("slice", a, start=start, stop=stop)
    def concat(self, *xs): return self.apply("concat", *xs)
    def reshape(self, a, shape): return self.apply("reshape", a, shape=tuple(shape))

    def replay(self) -> list:
        """Recompute every node from the leaves; returns the new value list."""
        vals = []
        for (op, inputs, attrs), v in zip(self.ops, self.values):
            vals.append(v if op is None else _FWD[op](*(vals[i] for i in inputs), **attrs))
        return vals

    def gradients(self, root: Optional[int] = None) -> dict:
        """Adjoint of the scalar root with respect to every parameter leaf."""
        root = self.root if root is None else root
        if root is None:
            raise ValueError("tape has no root")
        if np.ndim(self.values[root]) != 0:
            raise ValueError(f"backward needs a scalar root, got shape {np.shape(self.values[root])}")
        adj = [None] * len(self.ops)
        adj[root] = np.ones(())
        for i in range(root, -1, -1):
            g = adj[i]
            op, inputs, attrs = self.ops[i]
            if g is None or op is None:
                continue
            grads = _VJP[op](g, *(self.values[j] for j in inputs), **attrs)
            for j, gj in zip(inputs, grads):
                if not self.needs_grad[j]:
                    continue
                adj[j] = gj if adj[j] is None else adj[j] + gj
        return {name: adj[i] for name, i in self.params.items()}


# --------------------------------------------------------------------------
# recording the objective
# --------------------------------------------------------------------------

@dataclass
class ObjectiveConfig:
    nt: int = 8
    alpha1: float = 1.0
    alpha2: float = 1.0
    T: float = 1.0
    trace: str = "exact"          # or "hutchinson"
    probe_dist: str = "rademacher"


class _Weights:
    """Parameter leaves plus a few derived nodes shared by every RHS call."""

    def __init__(self, tp: Tape, theta: ModelParams):
        net, d = theta.resnet, theta.d
        self.d, self.M, self.m, self.h = d, net.M, net.m, net.h
        self.w = tp.param("w", theta.w)
        self.K0 = tp.param("K0", net.K0)
        self.b0 = tp.param("b0", net.b0)
        self.K = [tp.param(f"Kh{i}", net.K[i]) for i in range(net.M)]
        self.bh = [tp.param(f"bh{i}", net.bh[i]) for i in range(net.M)]
        self.A = tp.param("A", theta.A)
        self.b = tp.param("b", theta.b)
        tp.param("c", np.asarray(float(theta.c)))
        self.K0T = tp.T(self.K0)
        self.KT = [tp.T(k) for k in self.K]
        self.AT = tp.T(self.A)
        self.K0x = tp.cols(self.K0, 0, d)
        self.K0xT = tp.T(self.K0x)
        self.k0sq = tp.sum(tp.mul(self.K0x, self.K0x), axis=1)
        Ax = tp.cols(self.A, 0, d)
        self.AxT = tp.T(Ax)
        self.trA = tp.sum(tp.mul(Ax, Ax))


def _rhs(tp: Tape, W: _Weights, Z: Var, t: float, trace: str, probe: Optional[Var]):
    d, M, h = W.d, W.M, W.h
    n = Z.shape[0]
    S = tp.concat(Z, tp.const(np.full((n, 1), t)))

    pre = [tp.add(tp.matmul(S, W.K0T), W.b0)]
    u = tp.sigma(pre[0])
    for i in range(M):
        pre.append(tp.add(tp.matmul(u, W.KT[i]), W.bh[i]))
        if i + 1 < M:
            u = tp.add(u, tp.scale(tp.sigma(pre[-1]), h))
    ds = [tp.dsigma(a) for a in pre]
    dds = [tp.d2sigma(a) for a in pre]

    zb = [None] * (M + 2)
    zb[M + 1] = W.w
    for i in range(M, 0, -1):
        zb[i] = tp.add(zb[i + 1], tp.scale(tp.matmul(tp.mul(ds[i], zb[i + 1]), W.K[i - 1]), h))
    grad = tp.matmul(tp.mul(ds[0], zb[1]), W.K0)
    grad = tp.add(tp.add(grad, tp.matmul(tp.matmul(S, W.AT), W.A)), W.b)

    gx = tp.cols(grad, 0, d)
    gt = tp.reshape(tp.cols(grad, d, d + 1), (n,))
    half_sq = tp.scale(tp.sum(tp.mul(gx, gx), axis=1), 0.5)
    dR = tp.abs(tp.sub(gt, half_sq))

    if trace == "exact":
        tr = _exact_trace(tp, W, ds, dds, zb, n)
    else:
        tr = _hutchinson_form(tp, W, ds, dds, zb, probe)
    return tp.scale(gx, -1.0), tp.scale(tr, -1.0), half_sq, dR


def _exact_trace(tp, W, ds, dds, zb, n):
    d, m, M, h = W.d, W.m, W.M, W.h
    tr = tp.sum(tp.mul(tp.mul(dds[0], zb[1]), W.k0sq), axis=1)
    J = tp.mul(tp.reshape(ds[0], (n, m, 1)), tp.reshape(W.K0x, (1, m, d)))
    acc = None
    for i in range(1, M + 1):
        KJ = tp.matmul(W.K[i - 1], J)
        sq = tp.sum(tp.mul(KJ, KJ), axis=2)
        ti = tp.sum(tp.mul(tp.mul(dds[i], zb[i + 1]), sq), axis=1)
        acc = ti if acc is None else tp.add(acc, ti)
        if i < M:
            J = tp.add(J, tp.mul(tp.scale(tp.reshape(ds[i], (n, m, 1)), h), KJ))
    tr = tp.add(tr, tp.scale(acc, h))
    return tp.add(tr, W.trA)


def _hutchinson_form(tp, W, ds, dds, zb, e):
    M, h = W.M, W.h
    dpre = [tp.matmul(e, W.K0xT)]
    du = tp.mul(ds[0], dpre[0])
    for i in range(1, M + 1):
        dpre.append(tp.matmul(du, W.KT[i - 1]))
        if i < M:
            du = tp.add(du, tp.scale(tp.mul(ds[i], dpre[i]), h))
    dz = None
    for i in range(M, 0, -1):
        inner = tp.mul(tp.mul(dds[i], dpre[i]), zb[i + 1])
        if dz is None:
            dz = tp.scale(tp.matmul(inner, W.K[i - 1]), h)
        else:
            inner = tp.add(inner, tp.mul(ds[i], dz))
            dz = tp.add(dz, tp.scale(tp.matmul(inner, W.K[i - 1]), h))
    inner0 = tp.add(tp.mul(tp.mul(dds[0], dpre[0]), zb[1]), tp.mul(ds[0], dz))
    hv = tp.matmul(inner0, W.K0x)
    Ae = tp.matmul(e, W.AxT)
    return tp.add(tp.sum(tp.mul(e, hv), axis=1), tp.sum(tp.mul(Ae, Ae), axis=1))


def record_objective(x, theta: ModelParams, config: ObjectiveConfig = None, rng=None):
    """Evaluate mean(alpha1*C + L + alpha2*R) over the batch, recording a tape.

    With ``config.trace == "hutchinson"`` one probe per sample, drawn from
    ``rng``, replaces the exact trace for the whole solve.
    Returns ``(value, tape)``; ``tape.info`` holds the batch means of C, L, R.
    """
    cfg = config or ObjectiveConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    if n == 0:
        raise ValueError("empty batch")
    if d != theta.d:
        raise ValueError(f"batch has dimension {d}, model expects {theta.d}")
    if cfg.trace not in ("exact", "hutchinson"):
        raise ValueError(f"unknown trace mode {cfg.trace!r}")

    tp = Tape()
    W = _Weights(tp, theta)
    probe = None
    if cfg.trace == "hutchinson":
        probe = tp.const(draw_probes(np.random.default_rng(rng), (n, d), cfg.probe_dist))

    Z = tp.const(x)
    ell = L = R = None
    dt = cfg.T / cfg.nt

    def axpy(y, a, k):
        return k if y is None and a == 1.0 else (tp.scale(k, a) if y is None else tp.add(y, tp.scale(k, a)))

    for step in range(cfg.nt):
        t0 = step * dt
        state = (Z, ell, L, R)
        k1 = _rhs(tp, W, Z, t0, cfg.trace, probe)
        s2 = tp.add(Z, tp.scale(k1[0], 0.5 * dt))
        k2 = _rhs(tp, W, s2, t0 + 0.5 * dt, cfg.trace, probe)
        s3 = tp.add(Z, tp.scale(k2[0], 0.5 * dt))
        k3 = _rhs(tp, W, s3, t0 + 0.5 * dt, cfg.trace, probe)
        s4 = tp.add(Z, tp.scale(k3[0], dt))
        k4 = _rhs(tp, W, s4, t0 + dt, cfg.trace, probe)
        new = []
        for c in range(4):
            inc = tp.add(tp.add(k1[c], tp.scale(k2[c], 2.0)), tp.add(tp.scale(k3[c], 2.0), k4[c]))
            new.append(axpy(state[c], dt / 6.0, inc))
        Z, ell, L, R = new
        for v in new:
            if not np.all(np.isfinite(v.value)):
                raise DivergenceError(f"non-finite state in RK4 step {step}", step=step)

    C = tp.add(tp.scale(tp.sum(tp.mul(Z, Z), axis=1), 0.5), tp.scale(ell, -1.0))
    per_sample = tp.add(tp.add(tp.scale(C, cfg.alpha1), L), tp.scale(R, cfg.alpha2))
    root = tp.scale(tp.sum(per_sample), 1.0 / n)
    # the log(2 pi) constant carries no gradient; add it outside the tape
    const = cfg.alpha1 * 0.5 * d * LOG_2PI
    tp.root = root.idx
    tp.info = {
        "C": float(np.mean(C.value)) + 0.5 * d * LOG_2PI,
        "L": float(np.mean(L.value)),
        "R": float(np.mean(R.value)),
        "const": const,
    }
    value = float(root.value) + const
    if not np.isfinite(value):
        raise DivergenceError("non-finite objective", step=cfg.nt - 1)
    tp.info["total"] = value
    return value, tp


def backward(tape: Tape, like: ModelParams) -> ModelParams:
    """Reverse pass; returns dObjective/dtheta shaped like ``like``."""
    g = tape.gradients()
    M = like.M
    arrs = {
        "w": g["w"], "K0": g["K0"], "b0": g["b0"],
        "K": np.stack([g[f"Kh{i}"] for i in range(M)]),
        "bh": np.stack([g[f"bh{i}"] for i in range(M)]),
        "A": g["A"], "b": g["b"], "c": 0.0,
    }
    for k, v in arrs.items():
        if v is None:
            arrs[k] = np.zeros_like(like.arrays()[k], dtype=float)
    return ModelParams.from_arrays(arrs, h=like.resnet.h)
