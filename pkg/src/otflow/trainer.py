"""ADAM training loop, validation on a finer time grid, early stopping and checkpoints."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .autodiff import ObjectiveConfig, backward, record_objective
from .data import DatasetSplit
from .objective import loss_C
from .ode import DivergenceError, integrate_forward
from .potential import ConfigurationError, ModelParams, init_params

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    m: int = 32
    M: int = 1
    r: Optional[int] = None
    nt_train: int = 8
    nt_val: Optional[int] = None      # defaults to 2 * nt_train
    alpha1: float = 1.0
    alpha2: float = 1.0
    lr: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 512
    max_iters: int = 1000
    val_every: int = 25
    patience: int = 20
    seed: int = 0
    trace: str = "exact"
    probe_dist: str = "rademacher"
    lr_decay: float = 1.0             # multiplicative factor applied every lr_decay_every iterations
    lr_decay_every: int = 0
    init_scale: float = 1e-3
    h: float = 1.0
    T: float = 1.0

    def __post_init__(self):
        if self.nt_val is None:
            self.nt_val = 2 * self.nt_train
        self.validate()

    def validate(self) -> None:
        pos_int = ("m", "M", "nt_train", "nt_val", "batch_size", "max_iters", "val_every", "patience")
        for name in pos_int:
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v}")
        if self.nt_val < self.nt_train:
            raise ConfigurationError(
                f"nt_val ({self.nt_val}) must be at least nt_train ({self.nt_train})")
        for name in ("lr", "adam_eps", "h", "T", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha1", "alpha2", "init_scale"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be nonnegative, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.lr_decay_every < 0:
            raise ConfigurationError("lr_decay_every must be nonnegative")
        if self.trace not in ("exact", "hutchinson"):
            raise ConfigurationError(f"trace must be 'exact' or 'hutchinson', got {self.trace!r}")
        if self.probe_dist not in ("rademacher", "gaussian"):
            raise ConfigurationError(f"probe_dist must be 'rademacher' or 'gaussian', got {self.probe_dist!r}")

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(nt=self.nt_train, alpha1=self.alpha1, alpha2=self.alpha2,
                               T=self.T, trace=self.trace, probe_dist=self.probe_dist)

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))


# --------------------------------------------------------------------------
# ADAM
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(theta: ModelParams, grad: ModelParams, state: AdamState, config: TrainConfig,
              lr: Optional[float] = None) -> ModelParams:
    """One bias-corrected ADAM update; ``state`` is advanced in place."""
    lr = config.lr if lr is None else lr
    g = grad.to_vector()
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * g
    state.v = b2 * state.v + (1 - b2) * g * g
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    return theta.from_vector(theta.to_vector() - lr * mhat / (np.sqrt(vhat) + config.adam_eps))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _arr_to_json(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _arr_from_json(obj):
    return np.array(obj["data"], dtype=float).reshape(obj["shape"])


@dataclass
class Checkpoint:
    """Snapshot of a run. Serialized as canonical JSON (sorted keys, shortest
    round-trip float repr), so save -> load -> save reproduces the same bytes."""

    theta: ModelParams
    iteration: int
    best_val_C: float
    mean: np.ndarray
    std: np.ndarray
    config: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_json(self) -> str:
        obj = {
            "version": self.version,
            "iteration": int(self.iteration),
            "best_val_C": float(self.best_val_C),
            "h": float(self.theta.resnet.h),
            "params": {k: _arr_to_json(v) for k, v in self.theta.arrays().items()},
            "standardization": {"mean": _arr_to_json(self.mean), "std": _arr_to_json(self.std)},
            "config": self.config,
        }
        return json.dumps(obj, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        obj = json.loads(text)
        if obj.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
        arrs = {k: _arr_from_json(v) for k, v in obj["params"].items()}
        theta = ModelParams.from_arrays(arrs, h=obj["h"])
        st = obj["standardization"]
        return cls(theta, obj["iteration"], obj["best_val_C"], _arr_from_json(st["mean"]),
                   _arr_from_json(st["std"]), obj["config"], obj["version"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

LOG_COLUMNS = ("iter", "total", "C", "L", "R", "val_C", "wall")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_val_C: float = math.inf
    best_iter: int = 0
    stop_reason: str = ""

    def column(self, name) -> np.ndarray:
        j = LOG_COLUMNS.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    def validations(self):
        """(iteration, validation C) pairs in order."""
        return [(int(r[0]), r[5]) for r in self.rows if not math.isnan(r[5])]


class TrainingDiverged(DivergenceError):
    """Training hit a non-finite loss or gradient; carries the last good state."""

    def __init__(self, message, iteration, checkpoint, log, step=None):
        super().__init__(message, step=step)
        self.iteration = iteration
        self.checkpoint = checkpoint
        self.log = log


def validation_C(x, theta: ModelParams, nt: int, T: float = 1.0) -> float:
    state, _ = integrate_forward(x, theta, nt, T)
    return float(np.mean(loss_C(state)))


def train(data: DatasetSplit, config: TrainConfig, theta0: Optional[ModelParams] = None,
          checkpoint_path=None, callback: Optional[Callable] = None):
    """Minimize mean(alpha1*C + L + alpha2*R) with ADAM on minibatches.

    Returns ``(best_theta, TrainLog)``. The best-validation parameters are
    written to ``checkpoint_path`` (if given) whenever they improve, so a
    diverging run leaves its last good checkpoint behind.
    """
    config.validate()
    X = np.asarray(data.train, dtype=float)
    Xval = np.asarray(data.val, dtype=float)
    if len(X) == 0 or len(Xval) == 0:
        raise ValueError("training and validation splits must be nonempty")
    n, d = X.shape
    root = np.random.SeedSequence(config.seed)
    init_ss, shuffle_ss, probe_ss = root.spawn(3)
    if theta0 is None:
        theta = init_params(d, config.m, config.M, config.r, rng=np.random.default_rng(init_ss),
                            h=config.h, small=config.init_scale)
    else:
        theta = theta0.copy()
    shuffle_rng = np.random.default_rng(shuffle_ss)
    probe_rng = np.random.default_rng(probe_ss)
    opt = AdamState.zeros(theta.size)
    obj_cfg = config.objective_config()
    cfg_echo = asdict(config)

    log = TrainLog()
    best = theta.copy()
    patience_left = config.patience
    lr = config.lr
    order = np.empty(0, dtype=int)
    pos = 0
    t_start = time.perf_counter()

    def snapshot(params, it):
        return Checkpoint(params.copy(), it, log.best_val_C, data.mean, data.std, cfg_echo)

    for it in range(1, config.max_iters + 1):
        if pos >= len(order):
            order = shuffle_rng.permutation(n)
            pos = 0
        idx = order[pos:pos + config.batch_size]
        pos += config.batch_size

        try:
            value, tape = record_objective(X[idx], theta, obj_cfg, rng=probe_rng)
            grad = backward(tape, theta)
            if not np.all(np.isfinite(grad.to_vector())):
                raise DivergenceError("non-finite gradient")
        except DivergenceError as exc:
            log.stop_reason = "diverged"
            # last good state: the best validated parameters, or the last finite ones
            if log.best_iter:
                good = snapshot(best, log.best_iter)
            else:
                good = snapshot(theta, it - 1)
                if checkpoint_path is not None:
                    good.save(checkpoint_path)
            raise TrainingDiverged(f"training diverged at iteration {it}: {exc}", it,
                                   good, log, step=exc.step) from exc

        theta = adam_step(theta, grad, opt, config, lr=lr)
        if config.lr_decay_every and it % config.lr_decay_every == 0:
            lr *= config.lr_decay

        val = math.nan
        if it % config.val_every == 0 or it == config.max_iters:
            try:
                val = validation_C(Xval, theta, config.nt_val, config.T)
            except DivergenceError:
                val = math.inf
            if val < log.best_val_C:
                log.best_val_C, log.best_iter = val, it
                best = theta.copy()
                patience_left = config.patience
                if checkpoint_path is not None:
                    snapshot(best, it).save(checkpoint_path)
            else:
                patience_left -= 1

        info = tape.info
        row = (it, value, info["C"], info["L"], info["R"], val, time.perf_counter() - t_start)
        log.rows.append(row)
        if callback is not None:
            callback(row)
        if patience_left <= 0:
            log.stop_reason = "patience"
            break
    else:
        log.stop_reason = "max_iters"

    if log.best_iter == 0:
        best = theta.copy()
    return best, log


def make_checkpoint(theta: ModelParams, data: DatasetSplit, config: TrainConfig, log: TrainLog):
    return Checkpoint(theta.copy(), log.best_iter, log.best_val_C, data.mean, data.std, asdict(config))
