import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsched.linear_policy import (
    InfeasiblePolicyError,
    LinearThresholdPolicy,
    always_stop,
    check_mlr_constraints,
    check_subset_constraints,
    decide,
    is_feasible,
    phi_to_theta,
)
from adsched.stopping_problem import CONTINUE, STOP


def test_decision_value_formula():
    pol = LinearThresholdPolicy([[2.0, 1.5, 0.4]])
    pi = np.array([0.1, 0.2, 0.3, 0.4])
    assert pol.decision_value(1, pi) == pytest.approx(0.2 + 2.0 * 0.3 + 1.5 * 0.4 - 0.4)
    assert decide(pol, 1, [1.0, 0, 0, 0]) == STOP
    assert decide(pol, 1, [0, 0, 0, 1.0]) == CONTINUE


def test_decision_values_vectorized():
    rng = np.random.default_rng(0)
    pol = phi_to_theta(rng.uniform(0, 2, (3, 4)))
    pis = rng.dirichlet(np.ones(5), 30)
    vals = pol.decision_values(pis)
    for l in range(1, 4):
        np.testing.assert_allclose(vals[:, l - 1], pol.decision_value(l, pis))


def test_two_state_policy_is_a_threshold_on_the_second_state():
    pol = LinearThresholdPolicy([[0.3]])
    assert decide(pol, 1, [0.8, 0.2]) == STOP
    assert decide(pol, 1, [0.6, 0.4]) == CONTINUE


def test_phi_to_theta_three_states():
    phi = np.array([[1.0, 2.0], [0.5, 7.0]])
    theta = phi_to_theta(phi).theta
    np.testing.assert_allclose(theta[:, 1], [4.0, 4.0])
    np.testing.assert_allclose(theta[0, 0], 2.0)
    np.testing.assert_allclose(theta[1, 0], 1.0 + np.sin(0.5) ** 2)


def test_always_stop_is_feasible_and_stops():
    pol = always_stop(3, 4)
    assert is_feasible(pol)
    rng = np.random.default_rng(1)
    assert np.all(pol.decision_values(rng.dirichlet(np.ones(4), 100)) <= 0)


def test_constraint_checks_flag_violations():
    bad = LinearThresholdPolicy([[0.5, 0.2, 1.0]])  # last weight below 1
    ok, msgs = check_mlr_constraints(bad)
    assert not ok and msgs
    bad2 = LinearThresholdPolicy([[1.0, 2.0, 1.0], [1.5, 2.0, 1.0]])  # weight grows with l
    assert not check_subset_constraints(bad2)[0]
    bad3 = LinearThresholdPolicy([[1.0, 2.0, 1.0], [1.0, 2.0, 0.5]])  # threshold not shared
    assert not check_subset_constraints(bad3)[0]


def test_serialization_roundtrip_and_rejection(tmp_path):
    pol = phi_to_theta(np.array([[0.3, 1.1, 0.7], [0.9, 0.2, 0.1]]))
    pol.save(tmp_path / "p.json")
    back = LinearThresholdPolicy.load(tmp_path / "p.json")
    np.testing.assert_array_equal(back.theta, pol.theta)
    np.testing.assert_array_equal(back.phi, pol.phi)
    bad = {"L": 1, "S": 3, "theta": [[0.5, 1.0]]}
    with pytest.raises(InfeasiblePolicyError):
        LinearThresholdPolicy.from_dict(bad)
    assert LinearThresholdPolicy.from_dict(bad, validate=False).theta[0, 0] == 0.5
    with pytest.raises(ValueError):
        LinearThresholdPolicy.from_dict({"L": 2, "S": 3, "theta": [[1.0, 1.0]]})


def test_decision_value_rejects_bad_level_and_dimension():
    pol = LinearThresholdPolicy([[1.0, 1.0]])
    with pytest.raises(ValueError):
        pol.decision_value(2, [0.3, 0.3, 0.4])
    with pytest.raises(ValueError):
        pol.decision_value(1, [0.5, 0.5])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 6), st.integers(2, 7), st.integers(0, 2**32 - 1), st.floats(0.1, 20.0))
def test_every_phi_maps_to_a_feasible_policy(L, S, seed, scale):
    phi = np.random.default_rng(seed).normal(0, scale, (L, S - 1))
    pol = phi_to_theta(phi)
    assert check_mlr_constraints(pol)[0]
    assert check_subset_constraints(pol)[0]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_feasible_policy_is_monotone_on_lines_through_first_vertex(S, seed):
    """Moving toward e_1 can only switch continue -> stop."""
    rng = np.random.default_rng(seed)
    pol = phi_to_theta(rng.uniform(0, 2, (2, S - 1)))
    pibar = np.r_[0.0, rng.dirichlet(np.ones(S - 1))]
    gammas = np.linspace(0, 1, 101)
    line = (1 - gammas)[:, None] * pibar + gammas[:, None] * np.eye(S)[0]
    for l in (1, 2):
        stop = pol.decision_value(l, line) <= 0
        first = np.argmax(stop) if stop.any() else len(stop)
        assert stop[first:].all()


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 5), st.integers(0, 2**32 - 1))
def test_feasible_policy_stop_sets_are_nested(S, seed):
    rng = np.random.default_rng(seed)
    pol = phi_to_theta(rng.uniform(0, 2, (4, S - 1)))
    vals = pol.decision_values(rng.dirichlet(np.ones(S), 500))
    stop = vals <= 0
    assert np.all(stop[:, :-1] <= stop[:, 1:])
