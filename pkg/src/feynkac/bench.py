"""Seeded repetitions, convergence criteria and CSV/JSON reports."""

from __future__ import annotations

import csv
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .network import NonFiniteLossError
from .optimizer import NonFiniteGradientError
from .problems import PROBLEMS, get_problem
from .sde_paths import NonFiniteStateError, dump_paths, simulate_paths
from .solvers import NonFiniteTargetError, SolverConfig, TraceRow, TrainingTrace, _streams, default_grid, solve
from .tensor_core import MASK64, ContractViolation, splitmix64

TRACE_COLUMNS = ("rep", "iter", "loss_sum", "loss_last_step", "test_loss", "u0_estimate", "rel_error", "runtime_s")
SUMMARY_COLUMNS = (
    "iter",
    "reps",
    "mean_rel_error",
    "mean_loss_sum",
    "mean_loss_last_step",
    "mean_test_loss",
    "mean_u0",
    "std_u0",
    "mean_runtime_s",
)
TABLE_GRID = (100, 200, 600, 1000, 2000, 5000, 10000)
NUMERICAL_ERRORS = (NonFiniteLossError, NonFiniteGradientError, NonFiniteTargetError, NonFiniteStateError)


class RepetitionError(RuntimeError):
    """A failure inside one repetition; ``cause`` is the original exception."""

    def __init__(self, rep: int, seed: int, cause: BaseException):
        super().__init__(f"repetition {rep} (seed {seed}): {type(cause).__name__}: {cause}")
        self.rep = rep
        self.seed = seed
        self.cause = cause

    @property
    def numerical(self) -> bool:
        return isinstance(self.cause, NUMERICAL_ERRORS)


def repetition_seed(base_seed: int, rep: int) -> int:
    """``splitmix64(splitmix64(base_seed) ^ rep)``; keeps low bits of nearby seeds apart."""
    return splitmix64(splitmix64(base_seed & MASK64) ^ rep)


@dataclass
class RunConfig:
    problem: str = "hjb"
    d: int = 100
    solver: SolverConfig = field(default_factory=SolverConfig)
    reps: int = 5
    out: Optional[str] = None
    convergence_window: int = 5
    convergence_rel_tol: float = 1e-2
    error_threshold: float = 1e-2
    # repetitions run in separate processes when > 1
    rep_workers: int = 1
    dump_paths: bool = False
    # test hook: explicit per-repetition seeds instead of derived ones
    seeds: Optional[tuple] = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ContractViolation(f"unknown problem {self.problem!r}; choose from {sorted(PROBLEMS)}")
        if self.reps < 1:
            raise ContractViolation("reps must be >= 1")
        if self.d < 1:
            raise ContractViolation("d must be >= 1")
        if self.convergence_window < 2:
            raise ContractViolation("convergence_window must be >= 2")
        if self.seeds is not None:
            self.seeds = tuple(int(s) for s in self.seeds)
            if len(self.seeds) != self.reps:
                raise ContractViolation(f"{len(self.seeds)} seeds given for {self.reps} repetitions")

    def rep_seeds(self) -> list:
        if self.seeds is not None:
            return list(self.seeds)
        return [repetition_seed(self.solver.seed, r) for r in range(self.reps)]

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["solver"] = self.solver.to_dict()
        if self.seeds is not None:
            out["seeds"] = list(self.seeds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown run config field(s): {sorted(unknown)}")
        data = dict(data)
        solver = data.pop("solver", {})
        if not isinstance(solver, SolverConfig):
            solver = SolverConfig.from_dict(solver)
        return cls(solver=solver, **data)


@dataclass
class RunReport:
    config: RunConfig
    traces: list
    seeds: list
    aggregates: list
    convergence: dict


# --- convergence criteria -------------------------------------------------------

def _convergence_position(values: Sequence[float], window: int, rel_tol: float) -> Optional[int]:
    if window < 2:
        raise ContractViolation("window must be >= 2")
    values = list(values)
    for i in range(2 * window - 1, len(values)):
        recent = min(values[i - window + 1 : i + 1])
        before = min(values[i - 2 * window + 1 : i - window + 1])
        scale = abs(before)
        gain = (before - recent) / scale if scale > 0 else before - recent
        if gain < rel_tol:
            return i
    return None


def detect_loss_convergence(
    trace: TrainingTrace, window: int = 5, rel_tol: float = 1e-2, column: str = "test_loss"
) -> Optional[int]:
    """Iteration at which the loss stops improving, or None.

    At evaluation point i the best loss of the trailing ``window`` points is
    compared with the best of the ``window`` points before them; the first i
    where the relative gain is below ``rel_tol`` is returned.
    """
    pos = _convergence_position(trace.column(column), window, rel_tol)
    return None if pos is None else trace.rows[pos].iter


def first_error_below(trace: TrainingTrace, threshold: float = 1e-2) -> Optional[int]:
    if not threshold > 0:
        raise ContractViolation("threshold must be positive")
    for row in trace.rows:
        if row.rel_error < threshold:
            return row.iter
    return None


# --- aggregation ----------------------------------------------------------------------

def _mean(values) -> float:
    return math.fsum(values) / len(values)


def _std(values) -> float:
    if len(values) < 2:
        return 0.0
    m = _mean(values)
    return math.sqrt(math.fsum((v - m) ** 2 for v in values) / (len(values) - 1))


def aggregate_rows(rows_by_rep: Sequence[Sequence[TraceRow]]) -> list:
    """Per-iteration means over repetitions; ``std_u0`` uses the R - 1 divisor.

    Only iterations present in every repetition are aggregated. ``fsum`` makes
    the result independent of repetition order.
    """
    if not rows_by_rep:
        return []
    common = set(r.iter for r in rows_by_rep[0])
    for rows in rows_by_rep[1:]:
        common &= {r.iter for r in rows}
    lookup = [{r.iter: r for r in rows} for rows in rows_by_rep]
    out = []
    for it in sorted(common):
        sel = [rows[it] for rows in lookup]
        u0 = [r.u0_estimate for r in sel]
        out.append(
            {
                "iter": it,
                "reps": len(sel),
                "mean_rel_error": _mean([r.rel_error for r in sel]),
                "mean_loss_sum": _mean([r.loss_sum for r in sel]),
                "mean_loss_last_step": _mean([r.loss_last_step for r in sel]),
                "mean_test_loss": _mean([r.test_loss for r in sel]),
                "mean_u0": _mean(u0),
                "std_u0": _std(u0),
                "mean_runtime_s": _mean([r.runtime_s for r in sel]),
            }
        )
    return out


def _mean_trace(aggregates: list, method: str) -> TrainingTrace:
    trace = TrainingTrace(method)
    for a in aggregates:
        trace.append(
            TraceRow(
                a["iter"], a["mean_loss_sum"], a["mean_loss_last_step"], a["mean_test_loss"],
                a["mean_u0"], a["mean_rel_error"], a["mean_runtime_s"],
            )
        )
    return trace


def _summary_at(aggregates: list, iteration: Optional[int]) -> Optional[dict]:
    if iteration is None:
        return None
    row = next(a for a in aggregates if a["iter"] == iteration)
    return {
        "iter": iteration,
        "mean_rel_error": row["mean_rel_error"],
        "mean_runtime_s": row["mean_runtime_s"],
        "std_u0": row["std_u0"],
    }


def convergence_summaries(traces: list, aggregates: list, config: RunConfig) -> dict:
    """Both stopping rules, per repetition and on the repetition-mean curves."""
    method = config.solver.method
    mean = _mean_trace(aggregates, method)
    w, tol, thr = config.convergence_window, config.convergence_rel_tol, config.error_threshold
    loss_it = detect_loss_convergence(mean, w, tol)
    err_it = first_error_below(mean, thr)
    return {
        "loss_convergence": {
            "window": w,
            "rel_tol": tol,
            "column": "test_loss",
            "per_rep": [detect_loss_convergence(t, w, tol) for t in traces],
            "mean_curve": _summary_at(aggregates, loss_it),
        },
        "first_error_below": {
            "threshold": thr,
            "per_rep": [first_error_below(t, thr) for t in traces],
            "mean_curve": _summary_at(aggregates, err_it),
        },
    }


def summary_iterations(aggregates: list, iterations: int) -> list:
    """Table grid points that were evaluated, plus the final iteration."""
    have = {a["iter"] for a in aggregates}
    wanted = {it for it in TABLE_GRID if it <= iterations} | {iterations}
    return sorted(wanted & have)


def build_report(config: RunConfig, traces: list, seeds: list) -> RunReport:
    aggregates = aggregate_rows([t.rows for t in traces])
    return RunReport(config, traces, seeds, aggregates, convergence_summaries(traces, aggregates, config))


# --- running ------------------------------------------------------------------------

def _one_repetition(config: RunConfig, rep: int, seed: int):
    problem = get_problem(config.problem, config.d)
    cfg = SolverConfig.from_dict({**config.solver.to_dict(), "seed": seed})
    try:
        if config.dump_paths and config.out:
            _, test_rng, _ = _streams(cfg)
            paths = simulate_paths(problem, default_grid(problem, cfg), cfg.test_paths, test_rng)
            out = Path(config.out)
            out.mkdir(parents=True, exist_ok=True)
            dump_paths(paths, out / f"test_paths_rep{rep}.bin")
        _, trace = solve(problem, cfg)
    except (ContractViolation, FloatingPointError, ValueError) as exc:
        raise RepetitionError(rep, seed, exc) from exc
    return trace


def run_benchmark(config: RunConfig, write: bool = True) -> RunReport:
    """Run every repetition, aggregate, and write reports when ``config.out`` is set."""
    seeds = config.rep_seeds()
    if config.rep_workers > 1 and config.reps > 1:
        with ProcessPoolExecutor(max_workers=min(config.rep_workers, config.reps)) as pool:
            futures = [pool.submit(_one_repetition, config, r, s) for r, s in enumerate(seeds)]
            traces = [f.result() for f in futures]
    else:
        traces = [_one_repetition(config, r, s) for r, s in enumerate(seeds)]
    report = build_report(config, traces, seeds)
    if write and config.out:
        emit_reports(report, config.out)
    return report


# --- reports ------------------------------------------------------------------------

def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _write_csv(filename: Path, header: Sequence[str], rows) -> None:
    try:
        with open(filename, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {filename}: {exc}") from exc


def emit_reports(report: RunReport, path) -> dict:
    """Write ``trace.csv``, ``summary.csv`` and ``report.json`` under ``path``.

    Floats are written with ``repr`` so that parsing them back is exact.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    files = {"trace": out / "trace.csv", "summary": out / "summary.csv", "report": out / "report.json"}

    trace_rows = (
        [rep, row.iter, repr(row.loss_sum), repr(row.loss_last_step), repr(row.test_loss),
         repr(row.u0_estimate), repr(row.rel_error), repr(row.runtime_s)]
        for rep, trace in enumerate(report.traces)
        for row in trace.rows
    )
    _write_csv(files["trace"], TRACE_COLUMNS, trace_rows)

    chosen = set(summary_iterations(report.aggregates, report.config.solver.iterations))
    summary_rows = (
        [a["iter"], a["reps"]] + [repr(a[c]) for c in SUMMARY_COLUMNS[2:]]
        for a in report.aggregates
        if a["iter"] in chosen
    )
    _write_csv(files["summary"], SUMMARY_COLUMNS, summary_rows)

    problem = get_problem(report.config.problem, report.config.d)
    doc = {
        "software": {"name": "feynkac", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "config": report.config.to_dict(),
        "seed": report.config.solver.seed,
        "rep_seeds": report.seeds,
        "reference_value": problem.reference_value,
        "reference_source": problem.reference_source,
        "aggregates": report.aggregates,
        "convergence": report.convergence,
        "notes": {
            "runtime_s": "cumulative wall-clock seconds of the whole run, target construction included",
            "loss_sum": "summed step losses on the current training batch",
            "loss_last_step": "loss of the first interior subnet (global methods) or of the subnet being trained (DS)",
        },
    }
    try:
        files["report"].write_text(json.dumps(_json_safe(doc), indent=2) + "\n", encoding="ascii")
    except OSError as exc:
        raise OSError(f"cannot write {files['report']}: {exc}") from exc
    return files


def read_trace_csv(filename) -> list:
    """Rows of ``trace.csv`` grouped by repetition, as lists of :class:`TraceRow`."""
    groups: dict = {}
    with open(filename, newline="", encoding="ascii") as fh:
        for rec in csv.DictReader(fh):
            row = TraceRow(
                iter=int(rec["iter"]),
                **{c: float(rec[c]) for c in TRACE_COLUMNS[2:]},
            )
            groups.setdefault(int(rec["rep"]), []).append(row)
    return [groups[k] for k in sorted(groups)]
