"""Simulation-based search for the best linear threshold policy (SPSA).

The objective is the finite-horizon discounted reward of a threshold policy,
estimated by Monte Carlo. Parameters live in the unconstrained ``phi`` space;
:func:`adsched.linear_policy.phi_to_theta` keeps every iterate feasible, so
no projection step is needed.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linear_policy import LinearThresholdPolicy, is_feasible, phi_to_theta
from .sim_eval import LinearPolicy, belief_paths, discounted_totals, simulate_paths, stop_times_on_paths
from .stopping_problem import StopProblem, check_assumptions

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpsaConfig:
    epsilon: float = 0.6
    varsigma: float = 10.0
    kappa: float = 0.602
    mu: float = 1.0
    upsilon: float = 0.101
    N: int = 200
    batch: int = 500
    iterations: int = 300
    restarts: int = 10
    seed: int = 0
    completion: str = "truncate"
    final_batch_factor: int = 10
    threads: int = 1

    def __post_init__(self):
        if not 0.5 < self.kappa <= 1.0:
            raise ValueError("kappa must lie in (0.5, 1]")
        for name in ("epsilon", "varsigma", "mu", "upsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch < 1 or self.N < 1 or self.restarts < 1 or self.iterations < 0:
            raise ValueError("batch, N and restarts must be >= 1 and iterations >= 0")


def gain_schedule(config: SpsaConfig, n: int) -> tuple[float, float]:
    """Step size a_n and perturbation size c_n at iteration n."""
    a = config.epsilon * (n + 1 + config.varsigma) ** (-config.kappa)
    c = config.mu * (n + 1) ** (-config.upsilon)
    return a, c


def spsa_gradient(objective: Callable[[np.ndarray], float], phi: np.ndarray, c: float, rng: np.random.Generator):
    """Two-sided simultaneous-perturbation gradient estimate.

    ``objective`` must use the same random numbers for both calls (the caller
    binds them). Returns ``(gradient, J_plus, J_minus, omega)``.
    """
    if c <= 0:
        raise ValueError("perturbation size must be positive")
    phi = np.asarray(phi, dtype=float)
    omega = rng.choice(np.array([-1.0, 1.0]), size=phi.shape)
    j_plus = float(objective(phi + c * omega))
    j_minus = float(objective(phi - c * omega))
    return (j_plus - j_minus) / (2.0 * c) * omega, j_plus, j_minus, omega


def spsa_step(phi: np.ndarray, gradient: np.ndarray, a: float) -> np.ndarray:
    """Ascent step: the objective is a reward."""
    return np.asarray(phi, dtype=float) + a * np.asarray(gradient, dtype=float)


def spsa_maximize(objective_factory: Callable[[int], Callable], phi0: np.ndarray, config: SpsaConfig, rng: np.random.Generator, on_iterate=None):
    """Run one SPSA chain. ``objective_factory(n)`` returns the objective for
    iteration n with its random numbers already fixed.

    Returns the list of ``(phi_n, J_n)`` pairs, n = 0..iterations, where
    ``J_n`` is the estimate at phi_n on iteration n's random numbers (the last
    entry is evaluated on a fresh draw).
    """
    phi = np.asarray(phi0, dtype=float).copy()
    history = []
    for n in range(config.iterations):
        a, c = gain_schedule(config, n)
        obj = objective_factory(n)
        j_here = float(obj(phi))
        history.append((phi.copy(), j_here))
        if on_iterate is not None:
            on_iterate(phi)
        grad, _, _, _ = spsa_gradient(obj, phi, c, rng)
        phi = spsa_step(phi, grad, a)
    history.append((phi.copy(), float(objective_factory(config.iterations)(phi))))
    if on_iterate is not None:
        on_iterate(phi)
    return history


class RewardEstimator:
    """Monte-Carlo estimate of the finite-horizon reward on a fixed set of paths."""

    def __init__(self, problem: StopProblem, N: int, batch: int, seed, completion: str = "truncate"):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        self.problem = problem
        self.completion = completion
        self.paths = simulate_paths(problem.model, N, batch, seed)
        self.beliefs = belief_paths(problem.model, self.paths.obs)

    def __call__(self, policy: LinearThresholdPolicy) -> float:
        times = stop_times_on_paths(LinearPolicy(policy), self.problem.model, self.problem.L, self.paths.obs, None, self.beliefs)
        totals = discounted_totals(self.problem, self.paths.states, times)
        if self.completion == "discard":
            full = (times >= 0).all(axis=1)
            return float(totals[full].mean()) if full.any() else 0.0
        if self.completion != "truncate":
            raise ValueError("completion must be 'truncate' or 'discard'")
        return float(totals.mean())


def estimate_reward(problem: StopProblem, policy: LinearThresholdPolicy, N: int, batch: int, seed, completion: str = "truncate") -> float:
    """Mean discounted reward of ``policy`` over ``batch`` rollouts of length N.

    With ``completion="truncate"`` a rollout that places fewer than L stops
    by N is scored on the stops it made; ``"discard"`` averages only over
    rollouts that placed all L stops.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return RewardEstimator(problem, N, batch, seed, completion)(policy)


def initial_phi(L: int, S: int, rng: np.random.Generator) -> np.ndarray:
    """Angles uniform on [0, pi/2], the two magnitude slots uniform on [0, 2]."""
    phi = rng.uniform(0.0, np.pi / 2, size=(L, S - 1))
    if S >= 2:
        phi[0, -1] = rng.uniform(0.0, 2.0)
    if S >= 3:
        phi[0, -2] = rng.uniform(0.0, 2.0)
    return phi


@dataclass
class OptimizationTrace:
    """Per-iteration estimates for every restart plus the selected policy."""

    records: list  # (restart, iteration, J_N, phi flattened)
    candidates: list  # (restart, phi, J high-precision)
    best_phi: np.ndarray
    best_theta: np.ndarray
    best_J: float
    reward_scale: float
    feasibility_failures: int = 0

    @property
    def best_policy(self) -> LinearThresholdPolicy:
        return LinearThresholdPolicy(self.best_theta, self.best_phi)

    def to_csv(self, path) -> None:
        width = len(self.records[0][3]) if self.records else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "restart", "J_N"] + [f"phi_{k}" for k in range(width)])
            for restart, it, J, phi in self.records:
                w.writerow([it, restart, repr(J)] + [repr(float(v)) for v in phi])


def optimize(problem: StopProblem, config: SpsaConfig = SpsaConfig(), phi0: Optional[np.ndarray] = None) -> OptimizationTrace:
    """Multi-restart SPSA over linear threshold policies.

    The objective is scaled by ``L * max|r|`` so the gain constants do not
    depend on the reward units. Each restart's final iterate is re-evaluated
    on ``final_batch_factor * batch`` common rollouts and the best is kept.
    """
    report = check_assumptions(problem)
    if not report.all_hold:
        logger.warning("structural assumptions violated; threshold optimality is not guaranteed")
    L, S = problem.L, problem.S
    scale = float(L * np.max(np.abs(problem.reward_table()))) or 1.0
    master = np.random.SeedSequence(config.seed)
    restart_seqs = master.spawn(config.restarts)
    failures = [0]

    def check(phi):
        if not is_feasible(phi_to_theta(phi)):
            failures[0] += 1

    def run_restart(k: int):
        seq = restart_seqs[k]
        init_seq, dir_seq, path_seq = seq.spawn(3)
        if phi0 is not None and k == 0:
            start = np.asarray(phi0, dtype=float).reshape(L, S - 1)
        else:
            start = initial_phi(L, S, np.random.default_rng(init_seq))
        path_seed_base = int(path_seq.generate_state(1)[0])

        def factory(n: int):
            est = RewardEstimator(problem, config.N, config.batch, path_seed_base + n, config.completion)
            return lambda phi: est(phi_to_theta(phi)) / scale

        hist = spsa_maximize(factory, start, config, np.random.default_rng(dir_seq), on_iterate=check)
        return k, hist

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(run_restart, range(config.restarts)))
    else:
        results = [run_restart(k) for k in range(config.restarts)]

    records = []
    finals = []
    for k, hist in results:
        for it, (phi, J) in enumerate(hist):
            records.append((k, it, J * scale, phi.ravel().copy()))
        finals.append((k, hist[-1][0]))

    final_seed = int(master.generate_state(2)[1])
    judge = RewardEstimator(problem, config.N, config.batch * config.final_batch_factor, final_seed, config.completion)
    candidates = [(k, phi, judge(phi_to_theta(phi))) for k, phi in finals]
    k_best, phi_best, J_best = max(candidates, key=lambda c: (c[2], -c[0]))
    theta = phi_to_theta(phi_best).theta
    return OptimizationTrace(records, candidates, phi_best, np.array(theta), J_best, scale, failures[0])
