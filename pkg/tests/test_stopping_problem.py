import numpy as np
import pytest
from scipy.stats import poisson

from adsched import experiments as E
from adsched.hmm_core import categorical_model, poisson_model
from adsched.simplex_grid import BeliefGrid
from adsched.stopping_problem import (
    CONTINUE,
    STOP,
    DPTooLargeError,
    StopProblem,
    check_assumptions,
    extract_stopping_sets,
    grid_lines,
    initial_values,
    observation_table,
    transition_operator,
    truncate_observations,
    value_iteration,
    verify_monotone_value,
    verify_nested,
    verify_threshold_on_lines,
)

from oracles import finite_horizon_single_stop

TOY_P = [[0.9, 0.1], [0.2, 0.8]]
TOY_G = [5.0, 1.0]
TOY_R = [4.0, 1.0]


@pytest.fixture(scope="module")
def synthetic_solution():
    problem = E.get("synthetic").problem(rho=0.9)
    return value_iteration(problem, BeliefGrid(40, 3))


def test_problem_validation():
    m = poisson_model(TOY_P, TOY_G)
    with pytest.raises(ValueError):
        StopProblem(m, [1.0, 2.0, 3.0], 1)
    with pytest.raises(ValueError):
        StopProblem(m, TOY_R, 0)
    with pytest.raises(ValueError):
        StopProblem(m, TOY_R, 1, rho=1.5)
    p = StopProblem(m, [[4, 1], [3, 1]], 2)
    np.testing.assert_array_equal(p.reward_for(2), [3, 1])
    assert not p.shared_reward


def test_assumptions_on_synthetic_problem():
    problem = E.get("synthetic").problem(rho=0.9)
    report = check_assumptions(problem)
    assert report.all_hold
    P = np.array(E.SYNTHETIC_P)
    r = np.array(E.SYNTHETIC_R)
    v = (np.eye(3) - 0.9 * P.T) @ r
    assert np.all(np.diff(v) <= 0)


def test_assumption_failures_report_witnesses():
    m = poisson_model([[0.5, 0.5], [0.5, 0.5]], [1.0, 5.0])
    report = check_assumptions(StopProblem(m, [1.0, 2.0], 1))
    assert not report.a1 and not report.a2
    assert report.witnesses["a1"] == (0, 1)
    assert any("FAILS" in line for line in report.lines())


def test_observation_table_mass():
    m = poisson_model(TOY_P, TOY_G)
    y_max = truncate_observations(m, 1e-10)
    assert poisson.sf(y_max - 1, 5.0) > 1e-10 >= poisson.sf(y_max, 5.0)
    table = observation_table(m, 1e-10)
    np.testing.assert_allclose(table.sum(axis=0), 1.0, atol=1e-14)


def test_transition_operator_rows_sum_to_one():
    problem = E.get("synthetic").problem()
    K = transition_operator(problem, BeliefGrid(10, 3))
    np.testing.assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_initial_values_closed_form():
    problem = E.get("synthetic").problem(rho=0.8, L=3)
    pi = np.array([[0.2, 0.3, 0.5]])
    P = problem.model.P
    r = np.array(E.SYNTHETIC_R)
    expect = pi @ (r + 0.8 * P @ r + 0.64 * P @ P @ r)
    assert initial_values(problem, pi)[0, 3] == pytest.approx(expect[0])
    assert initial_values(problem, pi)[0, 0] == 0.0


def test_zero_discount_stops_everywhere():
    problem = E.get("synthetic").problem(rho=0.0, L=2)
    sol = value_iteration(problem, BeliefGrid(10, 3))
    assert np.all(sol.policy[:, 1:] == STOP)
    np.testing.assert_allclose(sol.V[:, 1], sol.grid.points @ problem.reward_for(1))


def test_single_state_closed_form():
    m = poisson_model([[1.0]], [3.0])
    sol = value_iteration(StopProblem(m, [2.0], 3, rho=0.5))
    np.testing.assert_allclose(sol.V[0], [0.0, 2.0, 3.0, 3.5])


def test_dp_matches_backward_induction_oracle():
    m = poisson_model(TOY_P, TOY_G)
    problem = StopProblem(m, TOY_R, 1, rho=0.8)
    sol = value_iteration(problem, BeliefGrid(50, 2), tol=1e-10)
    pis = np.linspace(0.0, 1.0, 4001)
    horizon = int(np.ceil(np.log(1e-6 / 4.0) / np.log(0.8))) + 1
    ref = finite_horizon_single_stop(TOY_P, TOY_G, TOY_R, 0.8, pis, horizon=horizon)
    got = np.interp(sol.grid.points[:, 0], pis, ref)
    assert np.max(np.abs(sol.V[:, 1] - got)) < 1e-3


def test_refuses_large_state_space():
    problem = E.get("youtube").problem()
    with pytest.raises(DPTooLargeError):
        value_iteration(problem)


def test_categorical_problem_solves():
    m = categorical_model(E.BUZZ_P, E.normalize_rows(E.BUZZ_B), [0.0, 1.0])
    sol = value_iteration(StopProblem(m, E.BUZZ_R, 1, 0.9), BeliefGrid(100, 2))
    assert sol.converged
    # stopping at e_1 earns the maximal reward immediately
    assert sol.policy[sol.grid.vertex_index(0), 1] == STOP


def test_structure_on_synthetic(synthetic_solution):
    sol = synthetic_solution
    assert sol.converged
    ok, bad = verify_nested(sol)
    assert ok, bad[:5]
    lines = verify_threshold_on_lines(sol)
    assert lines.ok, lines.violations[:5]
    mono = verify_monotone_value(sol)
    assert mono.ok
    assert mono.comparable_pairs > 0
    masks = extract_stopping_sets(sol)
    assert masks[1].sum() <= masks[5].sum()


def test_line_checker_detects_double_switch(synthetic_solution):
    sol = synthetic_solution
    fake = sol.policy.copy()
    line = max(grid_lines(sol.grid, 0), key=len)
    fake[line, 1] = CONTINUE
    fake[line[len(line) // 3], 1] = STOP
    assert not verify_threshold_on_lines(sol, fake).ok


def test_grid_lines_cover_the_grid():
    grid = BeliefGrid(12, 3)
    lines = grid_lines(grid, 0)
    members = np.unique(np.concatenate(lines))
    assert len(members) == len(grid)
    for line in lines:
        assert np.all(np.diff(grid.counts[line, 0]) > 0)


def test_nested_checker_detects_violation(synthetic_solution):
    sol = synthetic_solution
    broken = type(sol)(sol.grid, sol.rho, sol.V, sol.Q, sol.policy.copy(), sol.iterations, sol.residual, sol.converged)
    k = int(np.nonzero(broken.policy[:, 1] == STOP)[0][0])
    broken.policy[k, 2] = CONTINUE
    ok, bad = verify_nested(broken)
    assert not ok and (k, 2) in bad


def test_solution_csv_export(tmp_path, synthetic_solution):
    synthetic_solution.to_csv(tmp_path / "sol.csv")
    paths = synthetic_solution.stop_sets_to_csv(tmp_path)
    assert len(paths) == 5
    header = (tmp_path / "sol.csv").read_text().splitlines()[0]
    assert header == "l,pi_1,pi_2,pi_3,V,Q_stop,Q_continue,action"
