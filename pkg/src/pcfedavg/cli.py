"""Command line entry point ``pcfed``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure, 3 a rate-study
slope missed its acceptance threshold.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, bundled_config_path, load_config
from .data import DataFormatError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolve(path: str):
    p = Path(path)
    if p.exists():
        return load_config(p)
    return load_config(bundled_config_path(path))


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pcfed", description="Personalized constrained federated averaging experiments")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every configured method and seed")
    run.add_argument("--config", required=True, help="config file, or the name of a bundled config")
    run.add_argument("--seeds", type=_int_list)
    run.add_argument("--out")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--no-plots", action="store_true")

    rate = sub.add_parser("rate-study", help="fit log-log slopes over an R grid")
    rate.add_argument("--config", required=True)
    rate.add_argument("--r-grid", type=_int_list, default=[64, 256, 1024])
    rate.add_argument("--seeds", type=int, default=10)
    rate.add_argument("--out")
    rate.add_argument("--workers", type=int, default=1)
    rate.add_argument("--estimator", choices=("expectation", "sample"), default="expectation")
    rate.add_argument("--stub", action="store_true", help="fit exact power laws instead of running the engine")

    ref = sub.add_parser("reference", help="solve the constrained problem and cache x*")
    ref.add_argument("--config", required=True)
    ref.add_argument("--out")

    chk = sub.add_parser("check", help="run the property and acceptance test suite")
    chk.add_argument("pytest_args", nargs="*")
    return ap


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _resolve(args.config)
    if args.no_plots:
        cfg = cfg.with_overrides(plots=False)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    manifest = run_experiment(cfg, seeds=args.seeds, out_dir=args.out, workers=args.workers)
    for r in manifest.runs:
        print(f"{r['label']:>14} seed {r['seed']:<4} {r['status']:<9} {r['rounds_csv']}")
    for m in manifest.missing:
        print(f"missing run skipped in figures: {m}")
    print(f"manifest: {manifest.path} ({manifest.status}, {manifest.wall_clock_s:.1f}s)")
    return EXIT_OK if manifest.status == "complete" else EXIT_RUNTIME


def _cmd_rate(args) -> int:
    from .experiment import RATE_THRESHOLDS, run_rate_study

    cfg = _resolve(args.config)
    try:
        report = run_rate_study(cfg, args.r_grid, args.seeds, out_dir=args.out or cfg.output_dir,
                                workers=args.workers, estimator=args.estimator, stub=args.stub)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for name, fit in report.fits.items():
        verdict = "PASS" if report.passed[name] else "FAIL"
        print(f"{verdict} {name}: slope {fit.slope:+.3f} +/- {fit.half_width:.3f} "
              f"(threshold {RATE_THRESHOLDS[name][1]}, target {RATE_THRESHOLDS[name][0]})")
    print(f"rates: {report.path}")
    return EXIT_OK if report.all_passed else EXIT_THRESHOLD


def _cmd_reference(args) -> int:
    from .experiment import build_problem, reference_path, solve_or_load_reference
    from .metrics import infeasibilities

    cfg = _resolve(args.config)
    out = args.out or cfg.output_dir
    problem = build_problem(cfg)
    ref = solve_or_load_reference(cfg, problem, out, force=True)
    print(f"f* = {ref.f_star!r}")
    print(f"method = {ref.method}, residual = {ref.residual:.3e}")
    print(f"max infeasibility = {max(infeasibilities(problem, ref.x_star)):.3e}")
    print(f"cached: {reference_path(out)}")
    return EXIT_OK


def _cmd_check(args) -> int:
    try:
        import pytest
    except ImportError:
        print("pytest is not installed; install the 'test' extra", file=sys.stderr)
        return EXIT_RUNTIME
    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test suite not found at {tests}; run from a source checkout", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if pytest.main([str(tests), *args.pytest_args]) == 0 else EXIT_RUNTIME


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"run": _cmd_run, "rate-study": _cmd_rate, "reference": _cmd_reference, "check": _cmd_check}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
