import math

import numpy as np
import pytest
from conftest import make_problem
from hypothesis import given, settings
from hypothesis import strategies as st

from feynkac.network import EVAL, TRAIN, Recorder, forward, init_stack
from feynkac.problems import allen_cahn_problem, hjb_problem, pricing_diffrate_problem
from feynkac.sde_paths import PathBatch, make_time_grid, simulate_paths
from feynkac.solvers import (
    NonFiniteTargetError,
    SolverConfig,
    TargetBatch,
    TraceRow,
    TrainingTrace,
    build_dfk_targets,
    build_ds_targets,
    dbsde_loss,
    dbsde_loss_and_grad,
    dbsde_rollout,
    ds_budgets,
    estimate_u0,
    global_loss,
    load_checkpoint,
    regression_loss_and_grad,
    solve,
    step_losses,
    stepwise_loss,
)
from feynkac.tensor_core import ContractViolation, RngStream


def setup(problem, N=5, B=16, seed=0, out_dim=1, activation="tanh"):
    grid = make_time_grid(problem.T, N)
    paths = simulate_paths(problem, grid, B, RngStream(seed, 1))
    stack = init_stack(RngStream(seed, 2), problem.d, N - 1, out_dim, activation=activation, with_initial=out_dim > 1)
    return grid, paths, stack


def hjb_small(d=3):
    return hjb_problem(d)


# --- targets ----------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**40), N=st.integers(2, 6))
def test_monte_carlo_collapse(seed, N):
    problem = make_problem(d=4, g=lambda x: np.sin(x).sum(axis=1), grad_g=np.cos)
    grid, paths, stack = setup(problem, N=N, B=33, seed=seed, activation="relu")
    stack.params.buffer[:] += RngStream(seed, 9).normals(stack.params.size)
    direct = np.mean(problem.terminal(paths.X[:, -1, :]))
    est = estimate_u0(stack, paths, None, problem, "DFK_GT")
    assert est == pytest.approx(direct, rel=1e-12, abs=1e-15)
    np.testing.assert_array_equal(build_dfk_targets(stack, paths, problem).values, np.broadcast_to(problem.terminal(paths.X[:, -1]), (N - 1, 33)))


def test_ds_targets_linear_problem(linear_problem):
    grid, paths, stack = setup(linear_problem, N=4)
    t = build_ds_targets(stack, paths, linear_problem)
    np.testing.assert_array_equal(t.values[-1], linear_problem.terminal(paths.X[:, -1]))
    for n in range(2, 4):
        u = forward(stack, paths.X[:, n], EVAL, subnet=n - 1)[:, 0]
        np.testing.assert_array_equal(t.values[n - 2], u)


def test_ds_target_hjb_single_step_zero_network():
    problem = hjb_problem(1)
    grid, paths, stack = setup(problem, N=2, B=7)
    stack.params.buffer[:] = 0.0
    t = build_ds_targets(stack, paths, problem)
    xT = paths.X[:, -1, :]
    zT = math.sqrt(2.0) * problem.terminal_gradient(xT)
    expected = problem.terminal(xT) - np.sum(zT**2, axis=1) * 0.5
    assert t.values.shape == (1, 7)
    np.testing.assert_allclose(t.values[0], expected, rtol=1e-15)


@pytest.mark.parametrize("c", [0.7, -2.0])
def test_dfk_targets_constant_generator(c):
    problem = make_problem(d=2, f=lambda t, x, y, z: np.full_like(y, c))
    grid, paths, stack = setup(problem, N=6, seed=3, activation="relu")
    stack.params.buffer[:] += RngStream(4).normals(stack.params.size)
    vals = build_dfk_targets(stack, paths, problem).values
    gT = problem.terminal(paths.X[:, -1])
    for k in range(5):
        # row k is the target at t_{k+1}
        np.testing.assert_allclose(vals[k], gT + c * (problem.T - grid.knots[k + 1]), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(vals[:-1] - vals[1:], c * grid.steps[0], rtol=1e-11)


@pytest.mark.parametrize("factory", [hjb_problem, allen_cahn_problem, pricing_diffrate_problem])
def test_ds_and_dfk_coincide_for_two_steps(factory):
    problem = factory(3)
    grid, paths, stack = setup(problem, N=2, B=11)
    np.testing.assert_array_equal(build_ds_targets(stack, paths, problem).values, build_dfk_targets(stack, paths, problem).values)
    stack.params.buffer[:] = 0.0
    np.testing.assert_array_equal(build_ds_targets(stack, paths, problem).values, build_dfk_targets(stack, paths, problem).values)


def test_dfk_recursion_by_hand():
    problem = hjb_problem(3)
    grid, paths, stack = setup(problem, N=4, B=9)
    vals = build_dfk_targets(stack, paths, problem).values
    carried = problem.terminal(paths.X[:, -1]) - np.sum(2.0 * problem.terminal_gradient(paths.X[:, -1]) ** 2, axis=1) * grid.steps[-1]
    np.testing.assert_allclose(vals[2], carried, rtol=1e-14)
    for n in (3, 2):
        x = paths.X[:, n]
        from feynkac.network import input_gradient

        z = math.sqrt(2.0) * input_gradient(stack, x, EVAL, subnet=n - 1)
        carried = carried - np.sum(z * z, axis=1) * grid.steps[n - 1]
        np.testing.assert_allclose(vals[n - 2], carried, rtol=1e-13)


def test_non_finite_target_reports_path_and_step():
    with pytest.raises(NonFiniteTargetError) as info:
        TargetBatch(np.array([[0.0, 1.0], [np.nan, 0.0]]))
    assert (info.value.path, info.value.step) == (0, 2)


# --- losses ------------------------------------------------------------------------

def _constant_stack(problem, N, value):
    stack = init_stack(RngStream(0), problem.d, N - 1, 1)
    stack.params.buffer[:] = 0.0
    stack.params["b2"][...] = value
    return stack


def test_stepwise_loss_hand_values(linear_problem):
    grid = make_time_grid(1.0, 2)
    paths = simulate_paths(linear_problem, grid, 2, RngStream(0))
    stack = _constant_stack(linear_problem, 2, 0.0)
    # outputs (1, 3) against zero targets
    stack.params["b2"][0] = 0.0
    targets = TargetBatch(np.array([[-1.0, -3.0]]))
    assert stepwise_loss(stack, paths, targets, 2) == pytest.approx(5.0)
    stack.params["b2"][0] = 1.5
    assert stepwise_loss(stack, paths, TargetBatch(np.full((1, 2), -0.5)), 2) == pytest.approx(4.0)
    with pytest.raises(ContractViolation):
        stepwise_loss(stack, paths, targets, 1)


def test_global_loss_sums_steps(linear_problem):
    grid = make_time_grid(1.0, 3)
    paths = simulate_paths(linear_problem, grid, 4, RngStream(0))
    stack = _constant_stack(linear_problem, 3, 0.0)
    targets = TargetBatch(np.array([[math.sqrt(5.0)] * 4, [math.sqrt(7.0)] * 4]))
    assert global_loss(stack, paths, targets) == pytest.approx(12.0)
    assert global_loss(stack, paths, TargetBatch(np.zeros((2, 4)))) == 0.0


def test_global_loss_of_duplicated_steps():
    problem = make_problem(d=2)
    N = 5
    grid = make_time_grid(1.0, N)
    base = simulate_paths(problem, grid, 8, RngStream(1))
    X = np.repeat(base.X[:, 1:2, :], N + 1, axis=1)
    paths = PathBatch(X, base.dW, grid)
    stack = init_stack(RngStream(2), 2, N - 1, 1)
    for name in stack.params.arrays:
        stack.params[name][...] = stack.params[name][:1]
    targets = TargetBatch(np.tile(RngStream(3).normals(8), (N - 1, 1)))
    single = stepwise_loss(stack, paths, targets, 2)
    assert global_loss(stack, paths, targets) == pytest.approx((N - 1) * single, rel=1e-12)


def test_regression_gradient_treats_targets_as_constants():
    problem = hjb_problem(3)
    grid, paths, stack = setup(problem, N=4, B=6, seed=5)
    stack.params.buffer[:] += 0.1 * RngStream(6).normals(stack.params.size)
    targets = build_dfk_targets(stack, paths, problem)
    loss, per_step, grads = regression_loss_and_grad(stack, paths, targets, update_stats=False)
    assert loss == pytest.approx(per_step.sum())
    assert loss == pytest.approx(global_loss(stack, paths, targets, TRAIN))
    h = 1e-6
    idx = RngStream(7).uniforms(40)
    picks = (idx * stack.params.size).astype(int)
    for i in picks:
        keep = stack.params.buffer[i]
        stack.params.buffer[i] = keep + h
        lp = global_loss(stack, paths, targets, TRAIN)
        stack.params.buffer[i] = keep - h
        lm = global_loss(stack, paths, targets, TRAIN)
        stack.params.buffer[i] = keep
        fd = (lp - lm) / (2 * h)
        assert grads.buffer[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_later_parameters_only_move_targets():
    problem = hjb_problem(3)
    grid, paths, stack = setup(problem, N=4, B=6, seed=8)
    targets = build_dfk_targets(stack, paths, problem)
    _, _, grads = regression_loss_and_grad(stack, paths, targets, slice(0, 1), update_stats=False)
    later = stack.params.slice_indices(2)
    # the first step's loss does not depend on the subnet at t_3 once targets are fixed
    assert not grads.buffer[later].any()
    stack.params.buffer[later] += 0.5
    moved = build_dfk_targets(stack, paths, problem)
    assert not np.array_equal(moved.values[0], targets.values[0])
    _, _, again = regression_loss_and_grad(stack, paths, targets, slice(0, 1), update_stats=False)
    np.testing.assert_array_equal(again.buffer, grads.buffer)


def test_step_losses_shape(linear_problem):
    grid, paths, stack = setup(linear_problem, N=5)
    assert step_losses(stack, paths, build_ds_targets(stack, paths, linear_problem)).shape == (4,)


# --- estimators -----------------------------------------------------------------------

@pytest.mark.parametrize("method", ["DS", "DS_GT", "DFK_GT"])
def test_estimate_is_permutation_invariant(method):
    problem = allen_cahn_problem(4)
    grid, paths, stack = setup(problem, N=4, B=40, seed=2)
    perm = np.random.default_rng(0).permutation(40)
    shuffled = PathBatch(paths.X[perm], paths.dW[perm], grid)
    a = estimate_u0(stack, paths, None, problem, method)
    b = estimate_u0(stack, shuffled, None, problem, method)
    assert a == pytest.approx(b, rel=1e-12)


def test_ds_estimate_formula():
    problem = allen_cahn_problem(2)
    grid, paths, stack = setup(problem, N=3, B=10)
    u1 = forward(stack, paths.X[:, 1], EVAL, subnet=0)[:, 0]
    expected = np.mean(u1 + (u1 - u1**3) * grid.steps[0])
    assert estimate_u0(stack, paths, None, problem, "DS") == pytest.approx(expected, rel=1e-13)


# --- deep BSDE -------------------------------------------------------------------------

def test_rollout_constant_when_everything_is_zero(linear_problem):
    grid, paths, stack = setup(linear_problem, N=4, out_dim=3)
    stack.params.buffer[:] = 0.0
    stack.params["u0"][0] = 1.25
    np.testing.assert_array_equal(dbsde_rollout(stack, paths, linear_problem), np.full(16, 1.25))


def test_rollout_unit_gradient_network():
    problem = make_problem(d=1, sigma=1.0)
    grid, paths, stack = setup(problem, N=5, B=6, out_dim=1)
    stack = init_stack(RngStream(0), 1, 4, 1, with_initial=True)
    stack.params.buffer[:] = 0.0
    stack.params["b2"][...] = 1.0
    stack.params["u0"][0] = 0.4
    stack.params["grad_u0"][0] = -0.3
    dW = paths.dW[:, :, 0]
    expected = 0.4 - 0.3 * dW[:, 0] + dW[:, 1:].sum(axis=1)
    np.testing.assert_allclose(dbsde_rollout(stack, paths, problem), expected, rtol=1e-14)


def test_dbsde_loss_hand_value(linear_problem):
    grid, paths, _ = setup(linear_problem, N=2, B=2)
    gT = linear_problem.terminal(paths.X[:, -1])
    assert dbsde_loss(gT - np.array([1.0, -1.0]), paths, linear_problem) == pytest.approx(1.0)
    assert dbsde_loss(gT, paths, linear_problem) == 0.0


@pytest.mark.parametrize("factory", [hjb_problem, allen_cahn_problem, pricing_diffrate_problem])
def test_dbsde_gradient_through_rollout(factory):
    problem = factory(3)
    grid, paths, stack = setup(problem, N=4, B=8, seed=4, out_dim=3)
    stack.params.buffer[:] += 0.05 * RngStream(5).normals(stack.params.size)

    def loss():
        return dbsde_loss(dbsde_rollout(stack, paths, problem, TRAIN), paths, problem)

    value, grads = dbsde_loss_and_grad(stack, paths, problem, update_stats=False)
    assert value == pytest.approx(loss(), rel=1e-12)
    h = 1e-6
    worst = 0.0
    for i in range(stack.params.size):
        keep = stack.params.buffer[i]
        stack.params.buffer[i] = keep + h
        lp = loss()
        stack.params.buffer[i] = keep - h
        lm = loss()
        stack.params.buffer[i] = keep
        fd = (lp - lm) / (2 * h)
        scale = max(abs(fd), abs(grads.buffer[i]))
        if scale > 1e-6:
            worst = max(worst, abs(fd - grads.buffer[i]) / scale)
    assert worst < 1e-5


# --- training loops -------------------------------------------------------------------

def test_ds_budget_split():
    assert ds_budgets(2000, 19) == [105] * 18 + [110]
    assert sum(ds_budgets(7, 3)) == 7 and ds_budgets(0, 4) == [0, 0, 0, 0]


@pytest.mark.parametrize(
    "kwargs",
    [{"method": "ADAM"}, {"N": 1}, {"batch": 1}, {"test_paths": 0}, {"detach_targets": False}, {"target_mode": "x"}],
)
def test_config_validation(kwargs):
    with pytest.raises(ContractViolation):
        SolverConfig(**kwargs)


def test_config_roundtrip_and_unknown_fields():
    cfg = SolverConfig(method="dfk_gt", lr_boundaries=[10], lr_values=[1e-2, 1e-3], hidden=[4, 4])
    assert cfg.method == "DFK_GT"
    assert SolverConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractViolation, match="bogus"):
        SolverConfig.from_dict({"bogus": 1})


def test_trace_requires_increasing_iterations():
    trace = TrainingTrace("DS")
    trace.append(TraceRow(0, 1, 1, 1, 1, 1, 0.0))
    with pytest.raises(ContractViolation):
        trace.append(TraceRow(0, 1, 1, 1, 1, 1, 0.0))


def _strip_runtime(trace):
    return [(r.iter, r.loss_sum, r.loss_last_step, r.test_loss, r.u0_estimate) for r in trace.rows]


@pytest.mark.parametrize("method", ["DS", "DS_GT", "DFK_GT", "DBSDE"])
def test_training_is_deterministic(method):
    problem = allen_cahn_problem(3)
    cfg = SolverConfig(method=method, N=4, iterations=12, batch=8, test_paths=8, eval_every=4, seed=3)
    s1, t1 = solve(problem, cfg)
    s2, t2 = solve(problem, cfg)
    assert _strip_runtime(t1) == _strip_runtime(t2)
    assert s1.params.buffer.tobytes() == s2.params.buffer.tobytes()
    assert t1.iterations == [0, 4, 8, 12]
    runtimes = t1.column("runtime_s")
    assert np.all(np.diff(runtimes) >= 0)


def test_zero_iterations_gives_single_row():
    cfg = SolverConfig(method="DFK_GT", N=3, iterations=0, batch=4, test_paths=4)
    _, trace = solve(hjb_problem(2), cfg)
    assert trace.iterations == [0]


@pytest.mark.parametrize("method", ["DFK_GT", "DS", "DBSDE"])
def test_resume_from_checkpoint_matches_uninterrupted_run(method, tmp_path):
    problem = hjb_problem(3)
    base = dict(method=method, N=4, iterations=10, batch=8, test_paths=8, eval_every=5, seed=9)
    full_stack, full_trace = solve(problem, SolverConfig(**base, checkpoint_every=5, checkpoint_dir=str(tmp_path)))
    ckpt = tmp_path / f"{method.lower()}_000005.npz"
    _, adam, it, _, saved = load_checkpoint(ckpt)
    assert it == 5 and adam.t > 0 and saved.method == method
    resumed_stack, resumed_trace = solve(problem, SolverConfig(**base), resume=str(ckpt))
    assert resumed_stack.params.buffer.tobytes() == full_stack.params.buffer.tobytes()
    assert resumed_stack.stats.buffer.tobytes() == full_stack.stats.buffer.tobytes()
    assert _strip_runtime(resumed_trace) == _strip_runtime(full_trace)[-1:]


def test_ds_learns_constant_terminal():
    c = 0.3
    problem = make_problem(d=2, g=lambda x: np.full(x.shape[0], c), grad_g=np.zeros_like)
    cfg = SolverConfig(
        method="DS", N=3, iterations=16000, batch=64, test_paths=128, eval_every=16000,
        lr_boundaries=(2000, 6000, 12000), lr_values=(1e-2, 1e-3, 1e-4, 1e-5), seed=1,
    )
    stack, trace = solve(problem, cfg)
    grid = make_time_grid(1.0, 3)
    test = simulate_paths(problem, grid, 128, RngStream(1).child("test"))
    for n in (2, 3):
        assert stepwise_loss(stack, test, TargetBatch(np.full((2, 128), c)), n, EVAL) <= 1e-6
    assert abs(trace.final.u0_estimate - c) <= 1e-3


def test_dbsde_learns_constant_terminal():
    c = 0.8
    problem = make_problem(d=2, g=lambda x: np.full(x.shape[0], c), grad_g=np.zeros_like)
    cfg = SolverConfig(method="DBSDE", N=3, iterations=600, batch=64, test_paths=64, eval_every=600, u0_init_range=(0.0, 0.2), seed=2)
    stack, trace = solve(problem, cfg)
    assert abs(stack.params["u0"][0] - c) <= 1e-3
    assert trace.final.u0_estimate == stack.params["u0"][0]


def test_ds_regression_reaches_conditional_expectation():
    # f = 0, g = |x|^2, sigma = sqrt(2): u(t, x) = |x|^2 + 2 d (T - t)
    d = 2
    problem = make_problem(d=d)
    cfg = SolverConfig(
        method="DS", N=3, iterations=3000, batch=256, test_paths=512, eval_every=3000, seed=4,
        lr_boundaries=(1000,), lr_values=(1e-2, 1e-3),
    )
    stack, _ = solve(problem, cfg)
    grid = make_time_grid(1.0, 3)
    test = simulate_paths(problem, grid, 4096, RngStream(99))
    targets = build_ds_targets(stack, test, problem)
    for n in (1, 2):
        x = test.X[:, n]
        exact = np.sum(x * x, axis=1) + 2 * d * (1.0 - grid.knots[n])
        err = np.mean((forward(stack, x, EVAL, subnet=n - 1)[:, 0] - exact) ** 2)
        floor = np.var(targets.values[n - 1] - exact) / cfg.batch
        assert err < 10 * floor, (n, err, floor)
