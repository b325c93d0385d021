"""Command-line interface: train, eval, generate, density-grid, bench-trace.

Exit codes: 0 success, 1 user error (bad config, bad data, missing file),
2 numerical failure (divergence, non-finite results).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
from dataclasses import asdict, fields

import numpy as np

from . import kernels
from .bench import bench_trace
from .data import TOY_NAMES, DatasetSplit, load_csv, sample_toy, toy_split
from .metrics import evaluate_model
from .objective import LOG_2PI
from .ode import integrate_forward, integrate_inverse
from .potential import ConfigurationError
from .trainer import LOG_COLUMNS, Checkpoint, TrainConfig, TrainingDiverged, make_checkpoint, train

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2

# keys accepted in a run-config file besides the TrainConfig fields
RUN_KEYS = {"toy": None, "csv": None, "delimiter": None, "n": 10000, "out": "run"}


class UserError(Exception):
    pass


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6g}"
    return str(x)


# --------------------------------------------------------------------------
# run configs
# --------------------------------------------------------------------------

def _train_field_types() -> dict:
    types = {}
    for f in fields(TrainConfig):
        default = f.default
        if f.name in ("r", "nt_val"):
            types[f.name] = int
        else:
            types[f.name] = type(default)
    return types


def _coerce(key, raw, typ):
    if isinstance(raw, str) and raw.strip().lower() in ("none", "") and key in ("r", "nt_val"):
        return None
    try:
        if typ is int:
            v = float(raw)
            if v != int(v):
                raise ValueError
            return int(v)
        if typ is float:
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise UserError(f"config field {key!r}: cannot interpret {raw!r} as {typ.__name__}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment. Unknown keys are rejected."""
    known = set(_train_field_types()) | set(RUN_KEYS)
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UserError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UserError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise UserError(f"{path}:{lineno}: unknown config field {key!r}")
            out[key] = val
    return out


def build_run_config(file_values: dict, overrides: dict):
    """Merge defaults < config file < command line; returns (TrainConfig, run options)."""
    types = _train_field_types()
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    train_kw, run = {}, dict(RUN_KEYS)
    for key, val in merged.items():
        if key in types:
            train_kw[key] = _coerce(key, val, types[key])
        elif key == "n":
            run["n"] = _coerce(key, val, int)
        else:
            run[key] = val
    try:
        cfg = TrainConfig(**train_kw)
    except ConfigurationError as exc:
        raise UserError(f"invalid config: {exc}") from None
    return cfg, run


def _load_data(run, seed) -> DatasetSplit:
    if bool(run.get("toy")) == bool(run.get("csv")):
        raise UserError("specify exactly one data source: --toy NAME or --csv PATH")
    if run.get("toy"):
        if run["toy"] not in TOY_NAMES:
            raise UserError(f"unknown toy density {run['toy']!r}; valid: {', '.join(TOY_NAMES)}")
        return toy_split(run["toy"], int(run["n"]), seed=seed)
    return load_csv(run["csv"], delimiter=run.get("delimiter"), seed=seed)


def _raw_samples(args, ckpt: Checkpoint) -> np.ndarray:
    """Evaluation data in original coordinates."""
    if bool(args.toy) == bool(args.csv):
        raise UserError("specify exactly one data source: --toy NAME or --csv PATH")
    if args.toy:
        if args.toy not in TOY_NAMES:
            raise UserError(f"unknown toy density {args.toy!r}; valid: {', '.join(TOY_NAMES)}")
        return sample_toy(args.toy, args.n, seed=args.seed)
    split = load_csv(args.csv, delimiter=args.delimiter,
                     seed=int(ckpt.config.get("seed", 0)))
    return split.unstandardize(split.test)


def _load_checkpoint(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except OSError as exc:
        raise UserError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (ValueError, KeyError) as exc:
        raise UserError(f"malformed checkpoint {path}: {exc}") from None


def _nt_eval(args, ckpt) -> int:
    if args.nt is not None:
        return args.nt
    return int(ckpt.config.get("nt_val") or 16)


def _metadata(cfg, run, data, log=None) -> dict:
    meta = {
        "seed": cfg.seed,
        "config": asdict(cfg),
        "data": {"source": data.source, "n_train": len(data.train), "n_val": len(data.val),
                 "n_test": len(data.test), "dropped_rows": data.dropped},
        "versions": {"python": platform.python_version(), "numpy": np.__version__,
                     "otflow": _version()},
        "kernel_backend": kernels.BACKEND,
    }
    if log is not None:
        meta.update(stop_reason=log.stop_reason, best_iter=log.best_iter,
                    best_val_C=log.best_val_C, iterations=len(log.rows))
    return meta


def _version() -> str:
    try:
        from importlib.metadata import version
        return version("otflow")
    except Exception:  # noqa: BLE001
        return "unknown"


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r[0]] + [fmt(v) for v in r[1:]])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    overrides.update(toy=args.toy, csv=args.csv, delimiter=args.delimiter, n=args.n, out=args.out)
    cfg, run = build_run_config(file_values, overrides)
    data = _load_data(run, cfg.seed)
    out = run["out"]
    os.makedirs(out, exist_ok=True)
    ckpt_path = os.path.join(out, "checkpoint.json")
    log_path = os.path.join(out, "train_log.csv")

    def progress(row):
        if not args.quiet and (row[0] % cfg.val_every == 0):
            print(f"iter {row[0]}  total {fmt(row[1])}  C {fmt(row[2])}  L {fmt(row[3])}"
                  f"  R {fmt(row[4])}  val C {fmt(row[5])}", flush=True)

    try:
        theta, log = train(data, cfg, checkpoint_path=ckpt_path, callback=progress)
    except TrainingDiverged as exc:
        _write_log(log_path, exc.log.rows)
        with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
            json.dump(_metadata(cfg, run, data, exc.log), fh, indent=1, sort_keys=True)
        print(f"error: {exc}; last good checkpoint kept at {ckpt_path}", file=sys.stderr)
        return EXIT_NUMERIC
    make_checkpoint(theta, data, cfg, log).save(ckpt_path)
    _write_log(log_path, log.rows)
    with open(os.path.join(out, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(_metadata(cfg, run, data, log), fh, indent=1, sort_keys=True)
    print(f"best validation C {fmt(log.best_val_C)} at iteration {log.best_iter} ({log.stop_reason})")
    print(f"wrote {ckpt_path}, {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    raw = _raw_samples(args, ckpt)
    if raw.shape[1] != ckpt.theta.d:
        raise UserError(f"data has dimension {raw.shape[1]} but the checkpoint expects {ckpt.theta.d}")
    X = (raw - ckpt.mean) / ckpt.std
    report = evaluate_model(X, ckpt.theta, _nt_eval(args, ckpt), n_generate=args.n_generate,
                            seed=args.seed)
    line = report.to_json_line()
    if args.out:
        with open(args.out, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(report.summary())
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    if args.n < 1:
        raise UserError("--n must be positive")
    Y = np.random.default_rng(args.seed).standard_normal((args.n, ckpt.theta.d))
    G = integrate_inverse(Y, ckpt.theta, _nt_eval(args, ckpt))
    X = G * ckpt.std + ckpt.mean
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(X.shape[1])])
        for row in X:
            w.writerow([fmt(v) for v in row])
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def density_grid(ckpt: Checkpoint, bounds, resolution: int, nt: int):
    """Log-density estimate on a regular grid, in original coordinates.

    Returns (xs, ys, logp) with logp[i, j] at (xs[j], ys[i]).
    """
    if ckpt.theta.d != 2:
        raise UserError(f"density grids are only supported for d = 2, checkpoint has d = {ckpt.theta.d}")
    x0, x1, y0, y1 = bounds
    if not (x1 > x0 and y1 > y0):
        raise UserError("bounds must satisfy xmin < xmax and ymin < ymax")
    if resolution < 2:
        raise UserError("resolution must be at least 2")
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    P = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    state, _ = integrate_forward((P - ckpt.mean) / ckpt.std, ckpt.theta, nt)
    logp = (-0.5 * np.sum(state.z ** 2, axis=1) - LOG_2PI + state.ell
            - np.sum(np.log(ckpt.std)))
    return xs, ys, logp.reshape(resolution, resolution)


def cmd_density_grid(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    xs, ys, logp = density_grid(ckpt, args.bounds, args.resolution, _nt_eval(args, ckpt))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "log_density"])
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                w.writerow([fmt(x), fmt(y), fmt(logp[i, j])])
    print(f"wrote {args.resolution ** 2} grid points to {args.out}")
    return EXIT_OK


def cmd_bench_trace(args) -> int:
    res = bench_trace(dims=args.dims, m=args.m, M=args.M, batch=args.batch, reps=args.reps,
                      probe_counts=args.probes, seed=args.seed)
    if args.out:
        res.write_csv(args.out)
    print(res.summary())
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_train_overrides(p):
    types = _train_field_types()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = types[f.name]
        p.add_argument(flag, dest=f.name, type=typ, default=None,
                       help=f"override {f.name} (default {f.default})")
    p.add_argument("--nt", dest="nt_train", type=int, default=None, help="alias for --nt-train")


def _add_data_args(p, with_n=True):
    p.add_argument("--toy", choices=TOY_NAMES, default=None, help="toy 2-D density")
    p.add_argument("--csv", default=None, help="CSV file, rows are samples")
    p.add_argument("--delimiter", default=None, help="CSV delimiter (default: comma or whitespace)")
    if with_n:
        p.add_argument("--n", type=int, default=None, help="number of toy samples")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="otflow", description="OT-regularized continuous normalizing flows")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a flow")
    p.add_argument("--config", default=None, help="key = value run-config file")
    p.add_argument("--out", default=None, help="output directory (default ./run)")
    p.add_argument("--quiet", action="store_true")
    _add_data_args(p)
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_data_args(p, with_n=False)
    p.add_argument("--n", type=int, default=10000, help="toy test samples")
    p.add_argument("--nt", type=int, default=None, help="time steps (default: checkpoint nt_val)")
    p.add_argument("--n-generate", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="append the JSON report line to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="sample through the inverse flow")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--nt", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("density-grid", help="export log-density on a 2-D grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bounds", type=float, nargs=4, default=[-4.0, 4.0, -4.0, 4.0],
                   metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--nt", type=int, default=None)
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_density_grid)

    p = sub.add_parser("bench-trace", help="exact trace vs Hutchinson timing and error")
    p.add_argument("--dims", type=int, nargs="+", default=[43, 63, 784])
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--M", type=int, default=1)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--probes", type=int, nargs="+", default=[1, 4, 16, 64])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_bench_trace)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    try:
        return args.func(args)
    except (UserError, ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
