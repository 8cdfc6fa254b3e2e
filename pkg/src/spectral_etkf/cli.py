"""Command-line front end: ``spectral-etkf {truth,run,tune,spectrum,diagnose}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
or filter divergence (whatever was computed is still written).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import replace
from decimal import Decimal, InvalidOperation
from pathlib import Path

from . import __version__
from .config import ConfigError, dump_config, load_config
from .errors import AssimilationError, TuningFailureError
from .experiments import (
    free_run_spectrum_study,
    reference_run,
    run_twin_experiment,
    semi_joint_tune,
    smoothing_diagnostics,
    write_diagnostics_csv,
    write_result_csv,
    write_tuning_csv,
)
from .models import write_truth_csv
from .spectral import write_spectrum_csv

log = logging.getLogger("spectral_etkf")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list of values.

    Steps are accumulated in decimal arithmetic, so ``1:1.2:0.01`` yields
    exactly 1.0, 1.01, ..., 1.2 with no floating-point drift.
    """
    try:
        if ":" not in text:
            return [float(v) for v in text.split(",") if v.strip()]
        start, stop, step = (Decimal(p) for p in text.split(":"))
    except (ValueError, InvalidOperation):
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use start:stop:step or a,b,c") from None
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}: need step > 0 and stop >= start")
    n = int((stop - start) / step + Decimal("1e-9"))
    return [float(start + i * step) for i in range(n + 1)]


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser():
    parser = _Parser(prog="spectral-etkf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="TOML experiment config")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("truth", help="spin up and write the truth trajectory"))
    common(sub.add_parser("run", help="run one twin experiment"))
    p = common(sub.add_parser("tune", help="semi-joint (rho, c) / sigma grid search"))
    p.add_argument("--rho", type=parse_grid, default=parse_grid("1:1.2:0.01"))
    p.add_argument("--c", type=parse_grid, default=parse_grid("1:15:1"))
    p.add_argument("--sigma", type=parse_grid, default=parse_grid("0.1:1:0.1"))
    p.add_argument("--seeds", type=_int_list, help="score each cell over these seeds")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p = common(sub.add_parser("spectrum", help="free-run mean power spectra"))
    p.add_argument("--sizes", type=_int_list, default=[10, 20, 1000])
    p.add_argument("--time", type=float, default=48.8, help="free-run length")
    p.add_argument("--no-smoothing", action="store_true")
    p = common(sub.add_parser("diagnose", help="covariance ratios before/after smoothing"))
    p.add_argument("--times", type=_float_list, default=[45.0, 90.0, 135.0, 180.0])
    return parser


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_manifest(out: Path, args, cfg, status, wall_time, outputs, extra=None):
    manifest = {
        "command": args.command,
        "version": __version__,
        "seed": cfg.run.seed,
        "status": status,
        "wall_time": wall_time,
        "outputs": [str(p) for p in outputs],
        "config": cfg.to_dict(),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    return path


def _cmd_truth(args, cfg, out):
    x0, truth = reference_run(cfg)
    path = out / "truth.csv"
    write_truth_csv(path, truth, cfg.cycle_interval)
    return EXIT_OK, [path], {}


def _cmd_run(args, cfg, out):
    result = run_twin_experiment(cfg)
    path = out / "rmse.csv"
    write_result_csv(path, result)
    extra = {
        "time_averaged_rmse": result.time_averaged_rmse,
        "diverged": result.diverged,
        "failure": result.failure,
    }
    print(f"time-averaged RMSE: {result.time_averaged_rmse:.4f}")
    return (EXIT_NUMERICAL if result.diverged else EXIT_OK), [path], extra


def _cmd_tune(args, cfg, out):
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    tuning_path = out / "tuning.csv"
    try:
        result = semi_joint_tune(cfg, args.rho, args.c, args.sigma, jobs=args.jobs, seeds=args.seeds)
    except TuningFailureError as exc:
        write_tuning_csv(tuning_path, exc.cells)
        return EXIT_NUMERICAL, [tuning_path], {"failure": str(exc)}
    write_tuning_csv(tuning_path, result.cells)
    best_path = out / "best.toml"
    best_path.write_text(dump_config(result.best))
    f = result.best.filter
    print(f"best: rho={f.rho:g} c={f.c:g} sigma={f.sigma:g} rmse={result.best_rmse:.4f}")
    extra = {"best_rmse": result.best_rmse, "best_filter": result.best.to_dict()["filter"]}
    return EXIT_OK, [tuning_path, best_path], extra


def _cmd_spectrum(args, cfg, out):
    dumps = free_run_spectrum_study(cfg, args.sizes, with_smoothing=not args.no_smoothing, t_end=args.time)
    paths = []
    for d in dumps:
        p = out / f"spectrum_K{d.K}_raw.csv"
        write_spectrum_csv(p, d.raw)
        paths.append(p)
        if d.smoothed is not None:
            p = out / f"spectrum_K{d.K}_smoothed.csv"
            write_spectrum_csv(p, d.smoothed)
            paths.append(p)
    return EXIT_OK, paths, {}


def _cmd_diagnose(args, cfg, out):
    diag = smoothing_diagnostics(cfg, args.times)
    path = out / "diagnostics.csv"
    write_diagnostics_csv(path, diag)
    return EXIT_OK, [path], {}


COMMANDS = {
    "truth": _cmd_truth,
    "run": _cmd_run,
    "tune": _cmd_tune,
    "spectrum": _cmd_spectrum,
    "diagnose": _cmd_diagnose,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
        args.out.mkdir(parents=True, exist_ok=True)
    except (UsageError, ConfigError, OSError) as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE

    start = time.perf_counter()
    outputs, extra = [], {}
    try:
        code, outputs, extra = COMMANDS[args.command](args, cfg, args.out)
        status = "ok" if code == EXIT_OK else "diverged"
    except (AssimilationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code, status, extra = EXIT_NUMERICAL, "failed", {"failure": str(exc)}
    except (UsageError, ValueError) as exc:
        # e.g. a snapshot time that is not an assimilation time
        print(exc, file=sys.stderr)
        code, status, extra = EXIT_USAGE, "usage-error", {"failure": str(exc)}
    write_manifest(args.out, args, cfg, status, time.perf_counter() - start, outputs, extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
