import numpy as np
import pytest
from scipy.optimize import minimize

from lbsc.constraint_builder import ConstraintRow, SlackChannel
from lbsc.errors import QPInfeasibleError
from lbsc.qp_solver import (
    ACTIVE_TOLERANCE,
    DEFAULT_MAX_ITER,
    KKT_TOLERANCE,
    QPSolution,
    QProblem,
    SolveStatus,
    kkt_verify,
    solve,
)


def _row(coeff, rhs, channel=SlackChannel.SAFETY):
    return ConstraintRow(coeff_u=np.atleast_1d(coeff), rhs_const=rhs, slack_channel=channel)


def _conflict(k_eps: float, k_eta: float) -> QProblem:
    # u + 1 <= eps and -u + 1 <= eta cannot both hold with zero slack
    return QProblem(
        H=np.eye(1),
        k_eps=k_eps,
        k_eta=k_eta,
        rows=(_row(1.0, 1.0, SlackChannel.SAFETY), _row(-1.0, 1.0, SlackChannel.STABILITY)),
        u_min=[-10.0],
        u_max=[10.0],
    )


def _random_problem(rng: np.random.Generator) -> QProblem:
    m = 2
    A = rng.normal(size=(m, m))
    H = A @ A.T + 0.5 * np.eye(m)
    channels = [SlackChannel.SAFETY, SlackChannel.STABILITY, SlackChannel.NONE]
    u_feasible = rng.uniform(-2.0, 2.0, size=m)
    rows = []
    for _ in range(int(rng.integers(1, 7))):
        channel = channels[int(rng.integers(0, 3))]
        coeff = rng.normal(size=m)
        if channel is SlackChannel.NONE:
            rhs = -float(coeff @ u_feasible) - float(rng.uniform(0.0, 1.0))
        else:
            rhs = float(rng.normal())
        rows.append(_row(coeff, rhs, channel))
    k_eta = float(rng.uniform(1.0, 10.0))
    return QProblem(
        H=H,
        k_eps=k_eta * float(rng.uniform(1.0, 10.0)),
        k_eta=k_eta,
        rows=tuple(rows),
        u_min=np.full(m, -3.0),
        u_max=np.full(m, 3.0),
        u_ref=rng.normal(scale=2.0, size=m),
    )


def _oracle_constraints(problem: QProblem):
    """Every row as g(z) >= 0 over z = (u, eps, eta)."""
    m = problem.m
    out = []
    for row in problem.rows:
        idx = {SlackChannel.SAFETY: m, SlackChannel.STABILITY: m + 1}.get(row.slack_channel)
        out.append({"type": "ineq", "fun": lambda z, r=row, i=idx: (z[i] if i is not None else 0.0) - r.value(z[:m])})
    return out


def _slsqp(problem: QProblem):
    m = problem.m

    def objective(z):
        return problem.objective(z[:m], z[m], z[m + 1])

    u0 = np.clip(problem.u_ref, problem.u_min, problem.u_max)
    z0 = np.concatenate([u0, problem.slacks_for(u0)])
    bounds = list(zip(problem.u_min, problem.u_max)) + [(0.0, None), (0.0, None)]
    return minimize(objective, z0, method="SLSQP", bounds=bounds, constraints=_oracle_constraints(problem),
                    options={"ftol": 1e-14, "maxiter": 500})


def test_unconstrained_returns_reference():
    problem = QProblem(H=np.eye(1), k_eps=10.0, k_eta=1.0, rows=(), u_min=[-10.0], u_max=[10.0], u_ref=[3.0])
    sol = solve(problem)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.u_star.tolist() == pytest.approx([3.0])
    assert sol.eps == 0.0 and sol.eta == 0.0


def test_box_clips_reference():
    problem = QProblem(H=np.eye(2), k_eps=10.0, k_eta=1.0, rows=(), u_min=[-1.0, -1.0], u_max=[1.0, 1.0],
                       u_ref=[5.0, -5.0])
    sol = solve(problem)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.u_star.tolist() == pytest.approx([1.0, -1.0])
    assert sol.kkt_residual <= KKT_TOLERANCE


def test_matches_general_solver_on_random_problems(rng):
    for _ in range(500):
        problem = _random_problem(rng)
        sol = solve(problem)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.kkt_residual <= KKT_TOLERANCE

        # the returned point is feasible
        for row in problem.rows:
            slack = {SlackChannel.SAFETY: sol.eps, SlackChannel.STABILITY: sol.eta}.get(row.slack_channel, 0.0)
            assert row.value(sol.u_star) <= slack + 1e-8
        assert np.all(sol.u_star >= problem.u_min) and np.all(sol.u_star <= problem.u_max)

        ref = _slsqp(problem)
        ref_feasible = all(c["fun"](ref.x) >= -1e-9 for c in _oracle_constraints(problem))
        if ref.success and ref_feasible:
            assert sol.objective <= ref.fun + 1e-6 * (1.0 + abs(ref.fun))


def test_hard_rows_infeasible_in_box():
    problem = QProblem(H=np.eye(1), k_eps=10.0, k_eta=1.0, rows=(_row(1.0, 10.0, SlackChannel.NONE),),
                       u_min=[-1.0], u_max=[1.0])
    with pytest.raises(QPInfeasibleError):
        solve(problem)


def test_violated_row_without_input_dependence():
    problem = QProblem(H=np.eye(1), k_eps=10.0, k_eta=1.0, rows=(_row(0.0, 1.0, SlackChannel.NONE),),
                       u_min=[-1.0], u_max=[1.0])
    with pytest.raises(QPInfeasibleError):
        solve(problem)


def test_safety_slack_is_driven_to_zero_before_stability():
    sol = solve(_conflict(1e30, 1e20))
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.eps <= 1e-6
    assert sol.u_star[0] == pytest.approx(-1.0, abs=1e-6)
    assert sol.eta == pytest.approx(2.0, abs=1e-6)


def test_equal_weights_split_the_conflict():
    sol = solve(_conflict(1.0, 1.0))
    assert sol.u_star[0] == pytest.approx(0.0, abs=1e-9)
    assert sol.eps == pytest.approx(1.0, abs=1e-9)
    assert sol.eta == pytest.approx(1.0, abs=1e-9)
    assert sol.objective == pytest.approx(2.0)
    assert sol.kkt_residual <= KKT_TOLERANCE


def test_iteration_cap_reports_status():
    problem = QProblem(H=np.eye(2), k_eps=10.0, k_eta=1.0, rows=(), u_min=[-1.0, -1.0], u_max=[1.0, 1.0],
                       u_ref=[5.0, -5.0])
    sol = solve(problem, max_iter=1)
    assert sol.status is SolveStatus.MAX_ITER
    assert sol.iterations == 1
    assert np.all(np.isfinite(sol.u_star))


def test_kkt_verify_flags_perturbed_point():
    problem = QProblem(H=np.eye(1), k_eps=10.0, k_eta=1.0, rows=(), u_min=[-10.0], u_max=[10.0], u_ref=[3.0])
    good = solve(problem)
    assert kkt_verify(problem, good).max_residual <= KKT_TOLERANCE
    bad = QPSolution(u_star=np.array([3.5]), eps=0.0, eta=0.0, status=SolveStatus.OPTIMAL,
                     kkt_residual=float("nan"), iterations=0)
    assert kkt_verify(problem, bad).stationarity > 1e-3


def test_slacks_for_and_objective():
    problem = _conflict(4.0, 2.0)
    assert problem.slacks_for(np.array([0.5])) == pytest.approx((1.5, 0.5))
    assert problem.objective(np.array([1.0]), 0.5, 1.0) == pytest.approx(0.5 + 4.0 * 0.25 + 2.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"H": [[1.0, 2.0], [0.0, 1.0]]},
        {"H": [[1.0, 0.0], [0.0, -1.0]]},
        {"k_eps": 1.0, "k_eta": 2.0},
        {"k_eta": 0.0},
        {"u_min": [2.0, 0.0]},
        {"rows": (_row([1.0, 0.0, 0.0], 0.0),)},
    ],
)
def test_problem_validation(kwargs):
    base = dict(H=np.eye(2), k_eps=10.0, k_eta=1.0, rows=(), u_min=[-1.0, -1.0], u_max=[1.0, 1.0])
    base.update(kwargs)
    with pytest.raises(ValueError):
        QProblem(**base)


def test_soft_row_trades_slack_against_box():
    # -u + 2 <= eta with u capped at 1: the stability slack takes the remainder
    problem = QProblem(H=np.eye(1), k_eps=1e30, k_eta=1e20, rows=(_row(-1.0, 2.0, SlackChannel.STABILITY),),
                       u_min=[-1.0], u_max=[1.0])
    sol = solve(problem)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.u_star[0] == pytest.approx(1.0)
    assert sol.eta == pytest.approx(1.0)
    assert sol.eps <= 1e-12
    assert sol.kkt_residual <= KKT_TOLERANCE


def test_matches_general_solver_with_three_inputs(rng):
    for _ in range(100):
        base = _random_problem(rng)
        m = 3
        A = rng.normal(size=(m, m))
        rows = tuple(_row(rng.normal(size=m), row.rhs_const, row.slack_channel) for row in base.rows
                     if row.slack_channel is not SlackChannel.NONE)
        problem = QProblem(H=A @ A.T + 0.5 * np.eye(m), k_eps=base.k_eps, k_eta=base.k_eta, rows=rows,
                           u_min=np.full(m, -3.0), u_max=np.full(m, 3.0), u_ref=rng.normal(scale=2.0, size=m))
        sol = solve(problem)
        assert sol.status is SolveStatus.OPTIMAL
        assert sol.kkt_residual <= KKT_TOLERANCE
        ref = _slsqp(problem)
        if ref.success and all(c["fun"](ref.x) >= -1e-9 for c in _oracle_constraints(problem)):
            assert sol.objective <= ref.fun + 1e-6 * (1.0 + abs(ref.fun))


def _weak_stability_problem() -> QProblem:
    # car-4 scale: H = 1/M^2, a stability row that binds 1237 N below the reference force
    M = 1650.0
    a = 1.7e-5
    return QProblem(
        H=np.array([[1.0 / M**2]]),
        k_eps=1e30,
        k_eta=1e20,
        rows=(_row(-1.0 / M, -5.0, SlackChannel.SAFETY), _row(a, -a * 2000.0, SlackChannel.STABILITY)),
        u_min=[-4855.95],
        u_max=[4855.95],
        u_ref=[3237.3],
    )


def test_kkt_verify_accepts_weakly_active_soft_row_with_zero_slack():
    problem = _weak_stability_problem()
    # eta's true value is ~1e-20, far below what the row can resolve
    point = QPSolution(u_star=np.array([2000.0]), eps=0.0, eta=0.0, status=SolveStatus.OPTIMAL,
                       kkt_residual=float("nan"), iterations=0)
    assert abs(problem.rows[1].value(point.u_star)) <= 1e-15
    assert kkt_verify(problem, point).max_residual <= KKT_TOLERANCE
    sol = solve(problem)
    assert sol.u_star[0] == pytest.approx(2000.0, rel=1e-9)
    assert sol.eps <= 1e-12
    assert sol.eta <= 1e-12
    assert sol.kkt_residual <= KKT_TOLERANCE


def test_three_rows_through_the_optimal_vertex():
    rows = (
        _row([1.0, 0.0], -1.0, SlackChannel.NONE),
        _row([0.0, 1.0], -1.0, SlackChannel.NONE),
        _row([1.0, 1.0], -2.0, SlackChannel.NONE),
    )
    problem = QProblem(H=np.eye(2), k_eps=10.0, k_eta=1.0, rows=rows, u_min=[-10.0, -10.0], u_max=[10.0, 10.0],
                       u_ref=[3.0, 3.0])
    sol = solve(problem)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.u_star.tolist() == pytest.approx([1.0, 1.0], abs=1e-9)
    assert sol.kkt_residual <= KKT_TOLERANCE


def test_reported_slacks_cover_rows_at_every_stop(rng):
    for _ in range(200):
        problem = _random_problem(rng)
        for cap in (1, 2, DEFAULT_MAX_ITER):
            sol = solve(problem, max_iter=cap)
            eps_at_u, eta_at_u = problem.slacks_for(sol.u_star)
            assert sol.eps >= eps_at_u - ACTIVE_TOLERANCE * (1.0 + sol.eps)
            assert sol.eta >= eta_at_u - ACTIVE_TOLERANCE * (1.0 + sol.eta)
            assert sol.eps >= 0.0 and sol.eta >= 0.0
