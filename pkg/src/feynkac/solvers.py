"""Training schemes for semilinear parabolic PDEs on a time grid.

Four methods share the machinery here:

``DS``
    step-wise splitting: the subnet at ``t_{n-1}`` regresses
    ``u_n(X_n) + f(t_n, X_n, u_n, z_n) dt_n`` with the later subnet frozen,
    for ``n = N, ..., 2``.
``DS_GT``
    the same targets, but all N-1 subnets trained jointly on the summed loss.
``DFK_GT``
    joint training on targets that carry the running value
    ``v_{n-1} = v_n + f(t_n, X_n, u_n, z_n) dt_n`` from ``v_N = g(X_T)``; only
    the generator's ``y``/``z`` arguments come from the networks, so a linear
    problem (``f = 0``) reduces to plain Monte Carlo on ``g(X_T)``.
``DBSDE``
    forward deep BSDE shooting: subnets output ``grad u`` and the value is
    rolled forward from the trainable ``u0`` and matched to ``g`` at ``T``.

Subnet ``k`` always lives at time ``t_{k+1}``; target row ``k`` is the label
for subnet ``k``. Targets and the generator's network arguments are detached:
gradients only reach the subnet producing the regressed value.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .network import (
    EVAL,
    TRAIN,
    NonFiniteLossError,
    SubnetStack,
    init_stack,
    load_stack,
    parameter_gradient,
    save_stack,
    value_and_input_gradient,
)
from .optimizer import AdamState, adam_step
from .problems import ProblemSpec
from .sde_paths import PathBatch, TimeGrid, make_time_grid, simulate_paths
from .tensor_core import ContractViolation, RngStream

log = logging.getLogger(__name__)

METHODS = ("DBSDE", "DS", "DS_GT", "DFK_GT")

# initial u0 ranges for the deep BSDE scalar, by problem name
DEFAULT_U0_RANGE = {"hjb": (0.0, 1.0), "allen_cahn": (0.3, 0.6), "pricing_diffrate": (15.0, 18.0)}


class NonFiniteTargetError(FloatingPointError):
    def __init__(self, path: int, step: int):
        super().__init__(f"non-finite target on path m={path} at step n={step}")
        self.path = path
        self.step = step


@dataclass
class SolverConfig:
    method: str = "DFK_GT"
    N: int = 20
    iterations: int = 2000
    batch: int = 256
    test_paths: int = 512
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_boundaries: tuple = ()
    lr_values: tuple = ()
    seed: int = 7
    # semi-gradient training is the only supported mode; kept for provenance
    detach_targets: bool = True
    eval_every: int = 100
    activation: str = "relu"
    hidden: Optional[tuple] = None
    target_mode: str = EVAL
    u0_init_range: Optional[tuple] = None
    grad_u0_init_range: tuple = (-0.1, 0.1)
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.N < 2:
            raise ContractViolation("N must be >= 2 so that interior subnets exist")
        if self.batch < 2:
            raise ContractViolation("batch must be >= 2")
        if self.test_paths < 1:
            raise ContractViolation("test_paths must be >= 1")
        if self.iterations < 0 or self.eval_every < 1:
            raise ContractViolation("iterations must be >= 0 and eval_every >= 1")
        if not self.detach_targets:
            raise ContractViolation("only detached targets are supported")
        if self.target_mode not in (TRAIN, EVAL):
            raise ContractViolation(f"target_mode must be 'train' or 'eval', got {self.target_mode!r}")
        for name in ("lr_boundaries", "lr_values", "grad_u0_init_range"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("hidden", "u0_init_range"):
            if getattr(self, name) is not None:
                setattr(self, name, tuple(getattr(self, name)))

    def adam(self, size: int) -> AdamState:
        return AdamState.fresh(
            size,
            lr=self.lr,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            lr_boundaries=self.lr_boundaries,
            lr_values=self.lr_values,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown solver config field(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class TraceRow:
    iter: int
    loss_sum: float
    loss_last_step: float
    test_loss: float
    u0_estimate: float
    rel_error: float
    runtime_s: float


@dataclass
class TrainingTrace:
    method: str
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iter <= self.rows[-1].iter:
            raise ContractViolation("trace iterations must increase strictly")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    @property
    def iterations(self) -> list:
        return [r.iter for r in self.rows]

    def at(self, iteration: int) -> TraceRow:
        for r in self.rows:
            if r.iter == iteration:
                return r
        raise KeyError(iteration)

    @property
    def final(self) -> TraceRow:
        return self.rows[-1]


@dataclass
class TargetBatch:
    """Regression labels: ``values[k, m]`` is the label of path m for subnet k."""

    values: np.ndarray

    def __post_init__(self):
        bad = ~np.isfinite(self.values)
        if bad.any():
            k, m = np.argwhere(bad)[0]
            raise NonFiniteTargetError(int(m), int(k) + 1)


# --- target construction ------------------------------------------------------

def _stacked_states(paths: PathBatch, first: int, stop: int) -> np.ndarray:
    """``X[:, first:stop]`` rearranged to (steps, paths, d)."""
    return np.ascontiguousarray(paths.X[:, first:stop, :].transpose(1, 0, 2))


def network_terms(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, first: int = 2, mode: str = EVAL):
    """Values ``u_n(X_n)`` and generator increments ``f(t_n, X_n, u_n, z_n) dt_n``.

    Rows cover ``n = first, ..., N-1``. Nothing here is differentiated.
    """
    grid = paths.grid
    N = grid.N
    if first >= N:
        return np.empty((0, paths.size)), np.empty((0, paths.size))
    u, grad = value_and_input_gradient(stack, _stacked_states(paths, first, N), mode, subnet=slice(first - 1, N - 1))
    F = np.empty_like(u)
    for j, n in enumerate(range(first, N)):
        t = grid.knots[n]
        x = paths.X[:, n, :]
        z = problem.z_of(t, x, grad[j])
        F[j] = problem.generator(t, x, u[j], z) * grid.steps[n - 1]
    return u, F


def terminal_target(paths: PathBatch, problem: ProblemSpec) -> np.ndarray:
    """``g(X_T) + f(T, X_T, g, sigma^T grad g) dt_N``."""
    grid = paths.grid
    T = grid.knots[-1]
    xT = paths.X[:, -1, :]
    gT = problem.terminal(xT)
    zT = problem.z_of(T, xT, problem.terminal_gradient(xT))
    return gT + problem.generator(T, xT, gT, zT) * grid.steps[-1]


def _ds_rows(terminal: np.ndarray, u: np.ndarray, F: np.ndarray) -> np.ndarray:
    # u, F rows are n = 2..N-1; label for subnet n-2 is u_n + F_n
    return np.concatenate([u + F, terminal[None]], axis=0)


def _dfk_rows(terminal: np.ndarray, F: np.ndarray) -> np.ndarray:
    out = np.empty((F.shape[0] + 1, terminal.size))
    out[-1] = terminal
    for j in range(F.shape[0] - 1, -1, -1):
        out[j] = out[j + 1] + F[j]
    return out


def build_ds_targets(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, mode: str = EVAL) -> TargetBatch:
    u, F = network_terms(stack, paths, problem, 2, mode)
    return TargetBatch(_ds_rows(terminal_target(paths, problem), u, F))


def build_dfk_targets(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, mode: str = EVAL) -> TargetBatch:
    _, F = network_terms(stack, paths, problem, 2, mode)
    return TargetBatch(_dfk_rows(terminal_target(paths, problem), F))


def build_targets(method: str, stack, paths, problem, mode: str = EVAL) -> TargetBatch:
    if method in ("DS", "DS_GT"):
        return build_ds_targets(stack, paths, problem, mode)
    if method == "DFK_GT":
        return build_dfk_targets(stack, paths, problem, mode)
    raise ContractViolation(f"{method} has no regression targets")


# --- losses -----------------------------------------------------------------------

def _step_residuals(stack, paths, targets, subnets: slice, mode, update_stats=False, rec=None):
    k0, k1, _ = subnets.indices(stack.n_subnets)
    xs = _stacked_states(paths, k0 + 1, k1 + 1)
    if rec is None:
        from .network import forward

        u = forward(stack, xs, mode, subnet=subnets, update_stats=update_stats)
    else:
        u = rec.forward(xs, mode, subnet=subnets, update_stats=update_stats)
    return u[..., 0] - targets.values[k0:k1]


def stepwise_loss(stack: SubnetStack, paths: PathBatch, targets: TargetBatch, n: int, mode: str = TRAIN) -> float:
    """Mean squared regression error of the subnet at ``t_{n-1}``, ``2 <= n <= N``."""
    N = paths.grid.N
    if not 2 <= n <= N:
        raise ContractViolation(f"step index n must be in [2, {N}], got {n}")
    r = _step_residuals(stack, paths, targets, slice(n - 2, n - 1), mode)
    return float(np.mean(r * r))


def step_losses(stack, paths, targets, mode: str = TRAIN) -> np.ndarray:
    """Per-step losses, entry k for the subnet at ``t_{k+1}``."""
    r = _step_residuals(stack, paths, targets, slice(None), mode)
    return np.mean(r * r, axis=1)


def global_loss(stack: SubnetStack, paths: PathBatch, targets: TargetBatch, mode: str = TRAIN) -> float:
    return float(step_losses(stack, paths, targets, mode).sum())


def regression_loss_and_grad(stack, paths, targets, subnets: slice = slice(None), update_stats=True, context=None):
    """Summed step loss over ``subnets`` and its parameter gradient (train mode)."""
    per_step = {}

    def evaluation(rec):
        r = _step_residuals(stack, paths, targets, subnets, TRAIN, update_stats, rec)
        B = r.shape[1]
        per_step["values"] = np.mean(r * r, axis=1)
        return per_step["values"].sum(), [2.0 * r / B]

    loss, grads = parameter_gradient(stack, evaluation, context)
    return loss, per_step["values"], grads


# --- estimators ---------------------------------------------------------------------

def estimate_u0(stack: SubnetStack, test_paths: PathBatch, targets: Optional[TargetBatch], problem: ProblemSpec, method: str) -> float:
    """Approximation of ``u(0, xi)`` from the first interior step."""
    method = method.upper()
    if method == "DBSDE":
        return float(stack.params["u0"][0])
    u, F = network_terms(stack, test_paths, problem, 1, EVAL)
    if method == "DFK_GT":
        if targets is None:
            targets = build_dfk_targets(stack, test_paths, problem)
        carried = targets.values[0]
    else:
        carried = u[0]
    return float(np.mean(carried + F[0]))


def _evaluate_regression(stack, test_paths, problem, method):
    """Test loss and estimate from one eval-mode pass over every subnet."""
    u, F = network_terms(stack, test_paths, problem, 1, EVAL)
    terminal = terminal_target(test_paths, problem)
    if method == "DFK_GT":
        rows = _dfk_rows(terminal, F[1:])
        carried = rows[0]
    else:
        rows = _ds_rows(terminal, u[1:], F[1:])
        carried = u[0]
    test_loss = float(np.mean((u - rows) ** 2, axis=1).sum())
    return test_loss, float(np.mean(carried + F[0]))


# --- deep BSDE ----------------------------------------------------------------------

def _rollout(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, grads_u: np.ndarray, keep: bool):
    grid = paths.grid
    N = grid.N
    B = paths.size
    y = np.full(B, stack.params["u0"][0])
    saved = []
    for n in range(N):
        t = grid.knots[n]
        x = paths.X[:, n, :]
        G = np.broadcast_to(stack.params["grad_u0"], x.shape) if n == 0 else grads_u[n - 1]
        z = problem.z_of(t, x, G)
        if keep:
            saved.append((t, x, y, z))
        y = y - problem.generator(t, x, y, z) * grid.steps[n] + np.einsum("bi,bi->b", z, paths.dW[:, n, :])
        bad = ~np.isfinite(y)
        if bad.any():
            raise NonFiniteTargetError(int(np.argmax(bad)), n + 1)
    return y, saved


def dbsde_rollout(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, mode: str = EVAL) -> np.ndarray:
    """Terminal values of the forward BSDE recursion (left-endpoint Euler)."""
    from .network import forward

    N = paths.grid.N
    grads_u = forward(stack, _stacked_states(paths, 1, N), mode, subnet=slice(0, N - 1), update_stats=False)
    y, _ = _rollout(stack, paths, problem, grads_u, keep=False)
    return y


def dbsde_loss(terminal_estimates: np.ndarray, paths: PathBatch, problem: ProblemSpec) -> float:
    r = problem.terminal(paths.X[:, -1, :]) - terminal_estimates
    return float(np.mean(r * r))


def dbsde_loss_and_grad(stack: SubnetStack, paths: PathBatch, problem: ProblemSpec, update_stats=True, context=None):
    """Terminal-matching loss and its exact gradient through the whole rollout."""
    grid = paths.grid
    N = grid.N

    def evaluation(rec):
        G = rec.forward(_stacked_states(paths, 1, N), TRAIN, subnet=slice(0, N - 1), update_stats=update_stats)
        yN, saved = _rollout(stack, paths, problem, G, keep=True)
        B = paths.size
        resid = yN - problem.terminal(paths.X[:, -1, :])
        loss = np.mean(resid * resid)
        lam = 2.0 * resid / B
        adj_G = np.zeros_like(G)
        for n in range(N - 1, -1, -1):
            t, x, y, z = saved[n]
            fy, fz = problem.generator_partials(t, x, y, z)
            dt = grid.steps[n]
            a_z = lam[:, None] * (paths.dW[:, n, :] - fz * dt)
            a_G = problem.diffusion_apply(t, x, a_z)
            if n == 0:
                rec.accumulate("grad_u0", a_G.sum(axis=0))
            else:
                adj_G[n - 1] = a_G
            lam = lam * (1.0 - fy * dt)
        rec.accumulate("u0", np.array([lam.sum()]))
        return loss, [adj_G]

    return parameter_gradient(stack, evaluation, context)


# --- training loops -------------------------------------------------------------------

class _Clock:
    def __init__(self, offset: float = 0.0):
        self.start = time.perf_counter() - offset

    def __call__(self) -> float:
        return time.perf_counter() - self.start


def _eval_points(cfg: SolverConfig) -> set:
    pts = set(range(0, cfg.iterations + 1, cfg.eval_every))
    pts.add(cfg.iterations)
    return pts


def _streams(cfg: SolverConfig):
    root = RngStream(cfg.seed)
    return root.child("init"), root.child("test"), root


def _train_paths(problem, grid, cfg, root: RngStream, iteration: int) -> PathBatch:
    return simulate_paths(problem, grid, cfg.batch, root.child("train", iteration), workers=cfg.workers)


def make_stack(problem: ProblemSpec, cfg: SolverConfig, rng: RngStream) -> SubnetStack:
    if cfg.method == "DBSDE":
        init_range = cfg.u0_init_range or DEFAULT_U0_RANGE.get(problem.name, (0.0, 1.0))
        return init_stack(
            rng,
            problem.d,
            cfg.N - 1,
            problem.d,
            hidden=cfg.hidden,
            activation=cfg.activation,
            with_initial=True,
            initial_range=init_range,
            grad_initial_range=cfg.grad_u0_init_range,
        )
    return init_stack(rng, problem.d, cfg.N - 1, 1, hidden=cfg.hidden, activation=cfg.activation)


def _check_loss(loss, method, iteration):
    if not math.isfinite(loss):
        raise NonFiniteLossError(loss, f"method={method}, iteration={iteration}")


def _record(trace, problem, iteration, loss_sum, loss_last, test_loss, estimate, clock):
    row = TraceRow(
        iter=iteration,
        loss_sum=float(loss_sum),
        loss_last_step=float(loss_last),
        test_loss=float(test_loss),
        u0_estimate=float(estimate),
        rel_error=problem.relative_error(estimate),
        runtime_s=clock(),
    )
    trace.append(row)
    log.info(
        "%s it=%d loss=%.4e test=%.4e u0=%.6f rel=%.3e t=%.1fs",
        trace.method, iteration, row.loss_sum, row.test_loss, row.u0_estimate, row.rel_error, row.runtime_s,
    )


def save_checkpoint(filename, stack: SubnetStack, adam: AdamState, iteration: int, cfg: SolverConfig, phase: int = -1) -> None:
    extra = {
        "iteration": iteration,
        "phase": phase,
        "adam_t": adam.t,
        "config": cfg.to_dict(),
    }
    save_stack(stack, filename, extra, {"adam_m": adam.m, "adam_v": adam.v})


def load_checkpoint(filename, cfg: Optional[SolverConfig] = None):
    """``(stack, adam, iteration, phase, config)`` from :func:`save_checkpoint`."""
    stack, extra, arrays = load_stack(filename)
    saved_cfg = SolverConfig.from_dict(extra["config"])
    cfg = cfg or saved_cfg
    adam = cfg.adam(arrays["adam_m"].size)
    adam.m[...] = arrays["adam_m"]
    adam.v[...] = arrays["adam_v"]
    adam.t = int(extra["adam_t"])
    return stack, adam, int(extra["iteration"]), int(extra["phase"]), saved_cfg


def _maybe_checkpoint(cfg, stack, adam, iteration, phase=-1):
    if cfg.checkpoint_every and cfg.checkpoint_dir and iteration % cfg.checkpoint_every == 0:
        out = Path(cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / f"{cfg.method.lower()}_{iteration:06d}.npz", stack, adam, iteration, cfg, phase)


def train_global(problem: ProblemSpec, cfg: SolverConfig, resume: Optional[str] = None):
    """Joint training of all N-1 subnets (DS_GT or DFK_GT)."""
    if cfg.method not in ("DS_GT", "DFK_GT"):
        raise ContractViolation(f"train_global handles DS_GT/DFK_GT, not {cfg.method}")
    grid = make_time_grid(problem.T, cfg.N)
    init_rng, test_rng, root = _streams(cfg)
    stack = make_stack(problem, cfg, init_rng)
    adam = cfg.adam(stack.params.size)
    start = 0
    if resume:
        stack, adam, start, _, _ = load_checkpoint(resume, cfg)
    test_paths = simulate_paths(problem, grid, cfg.test_paths, test_rng, workers=cfg.workers)
    trace = TrainingTrace(cfg.method)
    points = _eval_points(cfg)
    clock = _Clock()

    if start == 0:
        paths = _train_paths(problem, grid, cfg, root, 0)
        targets = build_targets(cfg.method, stack, paths, problem, cfg.target_mode)
        per_step = step_losses(stack, paths, targets, TRAIN)
        test_loss, est = _evaluate_regression(stack, test_paths, problem, cfg.method)
        _record(trace, problem, 0, per_step.sum(), per_step[0], test_loss, est, clock)

    for i in range(start + 1, cfg.iterations + 1):
        paths = _train_paths(problem, grid, cfg, root, i)
        targets = build_targets(cfg.method, stack, paths, problem, cfg.target_mode)
        loss, per_step, grads = regression_loss_and_grad(
            stack, paths, targets, context=f"method={cfg.method}, iteration={i}"
        )
        adam_step(adam, stack.params.buffer, grads.buffer)
        if i in points:
            test_loss, est = _evaluate_regression(stack, test_paths, problem, cfg.method)
            _record(trace, problem, i, loss, per_step[0], test_loss, est, clock)
        _maybe_checkpoint(cfg, stack, adam, i)
    return stack, trace


def ds_budgets(iterations: int, n_steps: int) -> list:
    """Iterations per step-wise phase, later times first; remainder to the last phase."""
    base, rest = divmod(iterations, n_steps)
    out = [base] * n_steps
    if n_steps:
        out[-1] += rest
    return out


def _ds_step_target(stack, paths, problem, n, mode):
    """Label row for the subnet at ``t_{n-1}``."""
    if n == paths.grid.N:
        return terminal_target(paths, problem)
    u, F = network_terms_single(stack, paths, problem, n, mode)
    return u + F


def network_terms_single(stack, paths, problem, n, mode=EVAL):
    grid = paths.grid
    u, grad = value_and_input_gradient(stack, paths.X[:, n, :], mode, subnet=n - 1)
    t = grid.knots[n]
    x = paths.X[:, n, :]
    F = problem.generator(t, x, u, problem.z_of(t, x, grad)) * grid.steps[n - 1]
    return u, F


def train_ds(problem: ProblemSpec, cfg: SolverConfig, resume: Optional[str] = None):
    """Step-wise training, from the subnet at ``t_{N-1}`` back to ``t_1``."""
    if cfg.method != "DS":
        raise ContractViolation(f"train_ds handles DS, not {cfg.method}")
    grid = make_time_grid(problem.T, cfg.N)
    N = grid.N
    init_rng, test_rng, root = _streams(cfg)
    stack = make_stack(problem, cfg, init_rng)
    budgets = ds_budgets(cfg.iterations, N - 1)
    # phase p trains step n = N - p, i.e. subnet N - p - 2
    ends = np.cumsum(budgets)
    test_paths = simulate_paths(problem, grid, cfg.test_paths, test_rng, workers=cfg.workers)
    trace = TrainingTrace(cfg.method)
    points = _eval_points(cfg)
    clock = _Clock()

    def phase_of(i):
        # iteration i (1-based) belongs to the first phase whose end >= i
        return int(np.searchsorted(ends, i, side="left"))

    def record(i, paths, phase, step_loss):
        n = N - phase
        targets = build_ds_targets(stack, paths, problem, cfg.target_mode)
        loss_sum = global_loss(stack, paths, targets, TRAIN)
        test_loss, est = _evaluate_regression(stack, test_paths, problem, "DS")
        if step_loss is None:
            step_loss = stepwise_loss(stack, paths, targets, n, TRAIN)
        _record(trace, problem, i, loss_sum, step_loss, test_loss, est, clock)

    start = 0
    adam, current = None, -1
    if resume:
        stack, adam, start, current, _ = load_checkpoint(resume, cfg)
    if start == 0:
        record(0, _train_paths(problem, grid, cfg, root, 0), 0, None)

    for i in range(start + 1, cfg.iterations + 1):
        phase = phase_of(i)
        n = N - phase
        k = n - 2
        idx = stack.params.slice_indices(k)
        if phase != current:
            adam, current = cfg.adam(idx.size), phase
        paths = _train_paths(problem, grid, cfg, root, i)
        row = _ds_step_target(stack, paths, problem, n, cfg.target_mode)
        full = np.zeros((N - 1, paths.size))
        full[k] = row
        targets = TargetBatch(full)
        loss, per_step, grads = regression_loss_and_grad(
            stack, paths, targets, slice(k, k + 1), context=f"method=DS, iteration={i}, step={n}"
        )
        params = stack.params.buffer[idx]
        adam_step(adam, params, grads.buffer[idx])
        stack.params.buffer[idx] = params
        if i in points:
            record(i, paths, phase, loss)
        _maybe_checkpoint(cfg, stack, adam, i, phase)
    return stack, trace


def train_dbsde(problem: ProblemSpec, cfg: SolverConfig, resume: Optional[str] = None):
    if cfg.method != "DBSDE":
        raise ContractViolation(f"train_dbsde handles DBSDE, not {cfg.method}")
    grid = make_time_grid(problem.T, cfg.N)
    init_rng, test_rng, root = _streams(cfg)
    stack = make_stack(problem, cfg, init_rng)
    adam = cfg.adam(stack.params.size)
    start = 0
    if resume:
        stack, adam, start, _, _ = load_checkpoint(resume, cfg)
    test_paths = simulate_paths(problem, grid, cfg.test_paths, test_rng, workers=cfg.workers)
    trace = TrainingTrace(cfg.method)
    points = _eval_points(cfg)
    clock = _Clock()

    def test_loss():
        return dbsde_loss(dbsde_rollout(stack, test_paths, problem, EVAL), test_paths, problem)

    if start == 0:
        paths = _train_paths(problem, grid, cfg, root, 0)
        loss = dbsde_loss(dbsde_rollout(stack, paths, problem, TRAIN), paths, problem)
        _check_loss(loss, "DBSDE", 0)
        _record(trace, problem, 0, loss, loss, test_loss(), stack.params["u0"][0], clock)

    for i in range(start + 1, cfg.iterations + 1):
        paths = _train_paths(problem, grid, cfg, root, i)
        loss, grads = dbsde_loss_and_grad(stack, paths, problem, context=f"method=DBSDE, iteration={i}")
        adam_step(adam, stack.params.buffer, grads.buffer)
        if i in points:
            _record(trace, problem, i, loss, loss, test_loss(), stack.params["u0"][0], clock)
        _maybe_checkpoint(cfg, stack, adam, i)
    return stack, trace


def solve(problem: ProblemSpec, cfg: SolverConfig, resume: Optional[str] = None):
    """Dispatch on ``cfg.method``; returns ``(stack, trace)``."""
    if cfg.method == "DS":
        return train_ds(problem, cfg, resume)
    if cfg.method == "DBSDE":
        return train_dbsde(problem, cfg, resume)
    return train_global(problem, cfg, resume)


def default_grid(problem: ProblemSpec, cfg: SolverConfig) -> TimeGrid:
    return make_time_grid(problem.T, cfg.N)
