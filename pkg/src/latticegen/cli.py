"""Command-line entry point: ``latticegen <command> ...``.

Exit codes: 0 success, 2 configuration or argument error, 3 data error
(unreadable or mismatched inputs), 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import assign, train
from .config import RunConfig, load_config
from .dataio import load_dataset, read_tensor, write_csv, write_pgm_grid, write_tensor
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .metrics import evaluate
from .prior import PriorSpec, build_lattice
from .tensorcore import load_checkpoint, save_checkpoint

log = logging.getLogger("latticegen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_FILE = "model.nsql"
LATENTS_FILE = "latents.nsqt"
ASSIGNMENT_FILE = "assignment.nsqt"
HISTORY_FILE = "history.csv"
CONFIG_FILE = "config.resolved.json"

PRIOR_ALIASES = {
    "uniform01": "uniform01_coordinatewise",
    "gaussian": "standard_gaussian_coordinatewise",
    "ball": "uniform_ball",
}


class DataError(Exception):
    """Input data could not be read or does not fit the command."""


# ---------------------------------------------------------------------------
# helpers


def _load_data(cfg: RunConfig):
    try:
        return cfg.load_data()
    except ConfigError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _run_dir(model: str) -> Path:
    path = Path(model)
    return path.parent if path.is_file() else path


def _load_model(model: str):
    run_dir = _run_dir(model)
    ckpt = Path(model) if Path(model).is_file() else run_dir / MODEL_FILE
    try:
        params = load_checkpoint(ckpt)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    cfg_path = run_dir / CONFIG_FILE
    cfg = load_config(cfg_path) if cfg_path.exists() else None
    return run_dir, params, cfg


def _image_shape_arg(text: str | None):
    if text is None:
        return None
    try:
        dims = [int(v) for v in text.replace("x", ",").split(",")]
    except ValueError:
        raise ConfigError(f"bad image shape {text!r}; use H,W or H,W,C") from None
    if len(dims) == 2:
        dims.append(1)
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"bad image shape {text!r}; use H,W or H,W,C")
    return tuple(dims)


def _image_shape_of(cfg: RunConfig | None):
    """Training image shape as recorded by the run, if any."""
    if cfg is None:
        return None
    try:
        return cfg.load_data().image_shape
    except Exception:  # data moved or unreadable: degrade to no image dump
        return None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.data is not None:
        cfg = cfg.model_copy(deep=True)
        cfg.data.source = "file"
        cfg.data.path = args.data
    out = args.out or cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set output_dir")
    out = Path(out)
    ds = _load_data(cfg)
    tcfg = cfg.train_config(ds.image_shape)
    lattice = cfg.lattice_for(ds.n)
    try:
        state = train.init_state(ds.samples, lattice, tcfg)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    result = train.fit(ds.samples, lattice, tcfg, state=state, dump_dir=out / "dump")

    save_checkpoint(out / MODEL_FILE, result.params)
    write_tensor(out / LATENTS_FILE, result.latents)
    write_tensor(out / ASSIGNMENT_FILE, result.assignment.astype(np.float64))
    train.write_history_csv(out / HISTORY_FILE, result.history)
    (out / CONFIG_FILE).write_text(cfg.resolved().to_json())
    last = result.history[-1] if result.history else None
    summary = {"epochs": len(result.history), "final_loss": last.mean_loss if last else None, "out": str(out)}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_sample(args) -> int:
    run_dir, params, cfg = _load_model(args.model)
    if cfg is None:
        prior = PriorSpec(PRIOR_ALIASES.get(args.prior, args.prior), params.input_dim)
        lattice = None
    else:
        prior = cfg.prior_spec()
        lattice = None
        if args.mode == "lattice_rows":
            latents = run_dir / LATENTS_FILE
            n = cfg.lattice.size or read_tensor(latents).shape[0]
            lattice = build_lattice(prior, n, cfg.lattice.source, cfg.lattice.seed)
    if args.mode == "lattice_rows" and lattice is None:
        raise ConfigError("lattice_rows sampling needs the run's resolved config")
    try:
        req = train.SampleRequest(args.n, args.mode, args.seed)
        samples = train.sample(params, req, prior, lattice)
    except (ValueError, ShapeError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else run_dir / "samples.nsqt"
    write_tensor(out, samples)
    shape = _image_shape_of(cfg)
    if shape is not None:
        write_pgm_grid(out.with_suffix(".pgm"), samples, shape)
    print(json.dumps({"out": str(out), "shape": list(samples.shape)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    shape = _image_shape_arg(args.image_shape)
    try:
        real = load_dataset(args.real)
        fake = load_dataset(args.fake)
    except (OSError, FormatError, ShapeError) as exc:
        raise DataError(str(exc)) from exc
    if real.dim != fake.dim:
        raise DataError(f"feature dimensions differ: real {real.dim}, fake {fake.dim}")
    shape = shape or real.image_shape or fake.image_shape
    if shape is not None and int(np.prod(shape)) != real.dim:
        raise DataError(f"image shape {shape} does not match width {real.dim}")
    try:
        result = evaluate(real.samples, fake.samples, image_shape=shape, seed=args.seed, n_pairs=args.n_pairs)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_lattice(args) -> int:
    prior = PriorSpec(PRIOR_ALIASES.get(args.prior, args.prior), args.d)
    source = args.source or ("univariate_quantiles" if args.d == 1 else "sobol")
    seed = None if args.seed is None or args.seed < 0 else args.seed
    lat = build_lattice(prior, args.n, source, seed)
    if args.format == "nsqt":
        if not args.out:
            raise ConfigError("--format nsqt needs --out")
        write_tensor(args.out, lat.points)
    else:
        write_csv(args.out if args.out else sys.stdout, lat.points)
    return EXIT_OK


def cmd_bench_assign(args) -> int:
    rows = assign.bench_assign(args.n, args.method, args.repeats, args.seed)
    print("method,n,mean_ms,std_ms")
    for r in rows:
        print(f"{r.method},{r.n},{r.mean_ms:.3f},{r.std_ms:.3f}")
    return EXIT_OK


def cmd_export_latents(args) -> int:
    run_dir = _run_dir(args.model)
    try:
        latents = read_tensor(run_dir / LATENTS_FILE)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read latents in {run_dir}: {exc}") from exc
    labels = None
    cfg_path = run_dir / CONFIG_FILE
    if not args.no_labels and cfg_path.exists():
        try:
            ds = load_config(cfg_path).load_data()
            if ds.labels is not None and len(ds.labels) == len(latents):
                labels = ds.labels
        except (OSError, FormatError, ShapeError, ConfigError) as exc:
            log.warning("labels unavailable: %s", exc)
    train.write_latents_csv(args.out if args.out else sys.stdout, latents, labels)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latticegen", description="Quantile-lattice generative modelling.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="fit a decoder from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="data file; overrides data.path")
    s.add_argument("--out", help="output directory; overrides output_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="decode latent draws with a trained model")
    s.add_argument("--model", required=True, help="run directory or checkpoint file")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--mode", choices=["prior_draws", "lattice_rows"], default="prior_draws")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prior", default="gaussian", help="prior when the run has no config snapshot")
    s.add_argument("--out", help="output tensor (default: <run>/samples.nsqt)")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="compare real and generated samples")
    s.add_argument("--real", required=True)
    s.add_argument("--fake", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-shape", help="H,W[,C] for flat inputs")
    s.add_argument("--n-pairs", type=int, default=50)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("lattice", help="print a quantile lattice as CSV")
    s.add_argument("--prior", default="gaussian", help="uniform01, gaussian, ball or a full prior name")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--source", choices=["univariate_quantiles", "sobol", "uniform_grid"])
    s.add_argument("--seed", type=int, default=0, help="Sobol shift seed; negative disables the shift")
    s.add_argument("--format", choices=["csv", "nsqt"], default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_lattice)

    s = sub.add_parser("bench-assign", help="time the assignment solvers on random matrices")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--method", choices=["both", "hungarian", "greedy"], default="both")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_assign)

    s = sub.add_parser("export-latents", help="write the memory bank of a run as CSV")
    s.add_argument("--model", required=True, help="run directory")
    s.add_argument("--out")
    s.add_argument("--no-labels", action="store_true")
    s.set_defaults(func=cmd_export_latents)
    return p


def _thread_limit() -> int | None:
    raw = os.environ.get("NSQL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NSQL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"NSQL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = _thread_limit()
        limits = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
        with limits:
            return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`); not an error
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except (ShapeError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
