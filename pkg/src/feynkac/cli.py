"""Command line entry point: ``feynkac run`` and ``feynkac oracle-hjb``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .bench import RepetitionError, RunConfig, run_benchmark
from .problems import PROBLEMS, hjb_reference_mc
from .solvers import METHODS, SolverConfig
from .tensor_core import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("feynkac")


class ConfigError(Exception):
    pass


def _method(text: str) -> str:
    name = text.upper().replace("-", "_")
    if name not in METHODS:
        raise argparse.ArgumentTypeError(f"unknown method {text!r}; choose from {', '.join(METHODS)}")
    return name


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feynkac", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every evaluation point")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one method on one problem, R seeded repetitions")
    run.add_argument("--problem", default="hjb", choices=sorted(PROBLEMS))
    run.add_argument("--method", type=_method, default="DFK_GT")
    run.add_argument("--d", type=int, default=100)
    run.add_argument("--n-steps", type=int, default=20, help="time steps N")
    run.add_argument("--iterations", type=int, default=2000)
    run.add_argument("--batch", type=int, default=256)
    run.add_argument("--test-paths", type=int, default=512)
    run.add_argument("--lr", type=float, default=1e-2)
    run.add_argument("--seed", type=int, default=7)
    run.add_argument("--reps", type=int, default=5)
    run.add_argument("--eval-every", type=int, default=100)
    run.add_argument("--workers", type=int, default=1, help="processes running repetitions concurrently")
    run.add_argument("--out", default="runs/latest")
    run.add_argument("--config", help="JSON file whose entries override the flags (a report.json also works)")
    run.add_argument("--dump-paths", action="store_true", help="also write each repetition's test paths")

    oracle = sub.add_parser("oracle-hjb", help="Cole-Hopf Monte Carlo value of the HJB problem at the origin")
    oracle.add_argument("--samples", type=int, default=10_000_000)
    oracle.add_argument("--d", type=int, default=100)
    oracle.add_argument("--seed", type=int, default=2024)
    return parser


def _load_json(filename: str) -> dict:
    try:
        text = Path(filename).read_text()
    except OSError as exc:
        raise ConfigError(f"{filename}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{filename}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{filename}: top level must be a JSON object")
    # a report.json echoes the run config under "config"
    return data["config"] if "config" in data and isinstance(data["config"], dict) else data


def run_config_from_args(args) -> RunConfig:
    base = {
        "problem": args.problem,
        "d": args.d,
        "reps": args.reps,
        "out": args.out,
        "rep_workers": args.workers,
        "dump_paths": args.dump_paths,
        "solver": {
            "method": args.method,
            "N": args.n_steps,
            "iterations": args.iterations,
            "batch": args.batch,
            "test_paths": args.test_paths,
            "lr": args.lr,
            "seed": args.seed,
            "eval_every": args.eval_every,
        },
    }
    if args.config:
        override = _load_json(args.config)
        solver = override.pop("solver", {})
        if not isinstance(solver, dict):
            raise ConfigError(f"{args.config}: field 'solver' must be an object")
        base.update(override)
        base["solver"].update(solver)
    source = args.config or "command line"
    try:
        return RunConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def cmd_run(args) -> int:
    try:
        config = run_config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_benchmark(config)
    except RepetitionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if exc.numerical else EXIT_CONFIG
    final = report.aggregates[-1]
    print(
        f"{config.problem} {config.solver.method} It={final['iter']} R={config.reps}: "
        f"mean u0 = {final['mean_u0']:.6f}, std = {final['std_u0']:.3e}, "
        f"mean relative error = {final['mean_rel_error']:.3e}"
    )
    print(f"reports written to {config.out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.samples < 1 or args.d < 1:
        print("config error: --samples and --d must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    start = time.perf_counter()
    est, se = hjb_reference_mc(args.d, args.samples, RngStream(args.seed).child("cole_hopf"))
    print(f"u(0, 0) = {est:.6f} +- {se:.6f} (1 s.e., {args.samples} samples, {time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "run":
        return cmd_run(args)
    return cmd_oracle(args)


if __name__ == "__main__":
    sys.exit(main())
