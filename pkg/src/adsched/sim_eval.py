"""Monte-Carlo rollouts, baseline schedules and policy comparison.

Ad insertion has no effect on the viewer chain, so the state and observation
paths of a batch are drawn once from the master seed and every policy is
replayed on the same paths. That gives exact common random numbers for
paired comparisons.

Time convention: the decision at t = 0 uses the prior ``pi0``; for t >= 1
the belief is ``pi_t = T(pi_{t-1}, Y_t)``. ``Y_0`` is drawn but not used.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .hmm_core import FilterDegeneracyError, HmmModel, filter_batch, sample_paths
from .linear_policy import LinearThresholdPolicy
from .stopping_problem import STOP, GridSolution, StopProblem, value_iteration
from .simplex_grid import BeliefGrid

DEFAULT_HORIZON = 200
CHUNK = 2048


@dataclass(frozen=True)
class GridDPPolicy:
    solution: GridSolution
    name: str = "GridDP"
    uses_belief = True

    def stop_mask(self, beliefs: np.ndarray, remaining: np.ndarray, t: int) -> np.ndarray:
        out = np.zeros(len(remaining), dtype=bool)
        for l in np.unique(remaining):
            if l <= 0:
                continue
            sel = remaining == l
            q = self.solution.q_at(beliefs[sel], int(l))
            out[sel] = q[:, 0] >= q[:, 1]
        return out


@dataclass(frozen=True)
class LinearPolicy:
    policy: LinearThresholdPolicy
    name: str = "LinearThreshold"
    uses_belief = True

    def stop_mask(self, beliefs: np.ndarray, remaining: np.ndarray, t: int) -> np.ndarray:
        vals = self.policy.decision_values(beliefs)
        col = np.clip(remaining - 1, 0, self.policy.L - 1)
        v = np.take_along_axis(vals, col[:, None], axis=1)[:, 0]
        return (v <= 0.0) & (remaining > 0)


@dataclass(frozen=True)
class PeriodicPolicy:
    """Stops at t = round(k N / (L + 1)), k = 1..L."""

    N: int
    L: int
    name: str = "Periodic"
    uses_belief = False

    def slots(self) -> np.ndarray:
        k = np.arange(1, self.L + 1)
        raw = np.floor(k * self.N / (self.L + 1) + 0.5).astype(np.int64)
        # keep slots distinct when L is close to N
        for i in range(1, len(raw)):
            raw[i] = max(raw[i], raw[i - 1] + 1)
        return raw[raw < self.N]

    def schedule(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        slots = self.slots()
        out = np.full((batch, self.L), -1, dtype=np.int64)
        out[:, : len(slots)] = slots
        return out


@dataclass(frozen=True)
class RandomPolicy:
    """L distinct slots drawn uniformly from {0..N-1} for each rollout."""

    N: int
    L: int
    seed: int = 0
    name: str = "Random"
    uses_belief = False

    def schedule(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        k = min(self.L, self.N)
        keys = rng.random((batch, self.N))
        slots = np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1) if k < self.N else np.tile(np.arange(self.N), (batch, 1))
        out = np.full((batch, self.L), -1, dtype=np.int64)
        out[:, :k] = slots
        return out


Policy = Union[GridDPPolicy, LinearPolicy, PeriodicPolicy, RandomPolicy]


def as_policy(obj) -> Policy:
    if isinstance(obj, (GridDPPolicy, LinearPolicy, PeriodicPolicy, RandomPolicy)):
        return obj
    if isinstance(obj, GridSolution):
        return GridDPPolicy(obj)
    if isinstance(obj, LinearThresholdPolicy):
        return LinearPolicy(obj)
    raise TypeError(f"cannot use {type(obj).__name__} as a policy")


@dataclass
class RolloutResult:
    stop_times: np.ndarray  # strictly increasing, length <= L
    stop_states: np.ndarray
    stop_rewards: np.ndarray  # undiscounted r_l(X_tau)
    total: float
    rho: float

    def recompute_total(self) -> float:
        return float(np.sum(self.rho ** self.stop_times.astype(float) * self.stop_rewards))


@dataclass
class PathBatch:
    """Simulated state/observation paths shared by every policy under test."""

    states: np.ndarray  # (batch, N)
    obs: np.ndarray  # (batch, N)
    seed: object

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1]


def simulate_paths(model: HmmModel, N: int, batch: int, seed) -> PathBatch:
    if N < 1:
        raise ValueError("horizon must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    path_rng = np.random.default_rng([int(seed), 0])
    states, obs = sample_paths(model, N, batch, path_rng)
    return PathBatch(states, obs, seed)


def policy_rng(seed, policy) -> np.random.Generator:
    """Stream for a policy's own randomness, independent of the path stream."""
    return np.random.default_rng([int(seed), 1, int(getattr(policy, "seed", 0))])


def belief_paths(model: HmmModel, obs: np.ndarray) -> np.ndarray:
    """Filtered beliefs (batch, N, S) with the prior at t = 0."""
    batch, N = obs.shape
    out = np.empty((batch, N, model.S))
    out[:, 0] = model.pi0
    for t in range(1, N):
        out[:, t] = filter_batch(model, out[:, t - 1], obs[:, t])
    return out


def stop_times_on_paths(policy: Policy, model: HmmModel, L: int, obs: np.ndarray, rng: np.random.Generator, beliefs: Optional[np.ndarray] = None) -> np.ndarray:
    """(batch, L) stop times in order of occurrence, -1 where a stop never happened."""
    batch, N = obs.shape
    if not policy.uses_belief:
        return policy.schedule(batch, rng)
    times = np.full((batch, L), -1, dtype=np.int64)
    remaining = np.full(batch, L, dtype=np.int64)
    rows = np.arange(batch)
    if isinstance(policy, LinearPolicy) and beliefs is not None:
        vals = policy.policy.decision_values(beliefs)  # (batch, N, L)
        for t in range(N):
            active = remaining > 0
            if not active.any():
                break
            col = np.clip(remaining - 1, 0, L - 1)
            stop = active & (vals[rows, t, col] <= 0.0)
            times[rows[stop], L - remaining[stop]] = t
            remaining = remaining - stop
        return times
    pi = np.broadcast_to(model.pi0, (batch, model.S)).copy()
    for t in range(N):
        if t > 0:
            pi = filter_batch(model, pi, obs[:, t])
        active = remaining > 0
        if not active.any():
            break
        stop = np.zeros(batch, dtype=bool)
        stop[active] = policy.stop_mask(pi[active], remaining[active], t)
        times[rows[stop], L - remaining[stop]] = t
        remaining = remaining - stop
    return times


def discounted_totals(problem: StopProblem, states: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Sum of rho^tau r_l(X_tau) over the recorded stops of each rollout."""
    L = problem.L
    R = problem.reward_table()  # row l - 1 is reward with l stops remaining
    batch = times.shape[0]
    total = np.zeros(batch)
    for j in range(L):
        t = times[:, j]
        hit = t >= 0
        if not hit.any():
            continue
        x = states[hit, t[hit]]
        total[hit] += problem.rho ** t[hit].astype(float) * R[L - 1 - j, x]
    return total


def run_batch(problem: StopProblem, policy, paths: PathBatch, completion: str = "truncate") -> tuple[np.ndarray, np.ndarray]:
    """Per-rollout discounted totals and stop times for one policy.

    ``completion="discard"`` marks rollouts with fewer than L stops as NaN.
    """
    policy = as_policy(policy)
    rng = policy_rng(paths.seed, policy)
    model = problem.model
    times = np.empty((paths.batch, problem.L), dtype=np.int64)
    for lo in range(0, paths.batch, CHUNK):
        hi = min(lo + CHUNK, paths.batch)
        beliefs = belief_paths(model, paths.obs[lo:hi]) if isinstance(policy, LinearPolicy) else None
        times[lo:hi] = stop_times_on_paths(policy, model, problem.L, paths.obs[lo:hi], rng, beliefs)
    totals = discounted_totals(problem, paths.states, times)
    if completion == "discard":
        totals = np.where((times >= 0).all(axis=1), totals, np.nan)
    elif completion != "truncate":
        raise ValueError("completion must be 'truncate' or 'discard'")
    return totals, times


def rollout(problem: StopProblem, policy, N: int, seed) -> RolloutResult:
    """Simulate one session of ``N`` decision epochs."""
    paths = simulate_paths(problem.model, N, 1, seed)
    totals, times = run_batch(problem, policy, paths)
    t = times[0][times[0] >= 0]
    x = paths.states[0, t]
    R = problem.reward_table()
    rewards = np.array([R[problem.L - 1 - j, x[j]] for j in range(len(t))])
    return RolloutResult(t, x, rewards, float(totals[0]), problem.rho)


def _summary(totals: np.ndarray) -> tuple[float, float]:
    vals = totals[~np.isnan(totals)]
    if len(vals) == 0:
        return 0.0, 0.0
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, stderr


def evaluate(problem: StopProblem, policy, N: int, batch: int, master_seed, completion: str = "truncate") -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the discounted reward."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    paths = simulate_paths(problem.model, N, batch, master_seed)
    totals, _ = run_batch(problem, policy, paths, completion)
    return _summary(totals)


@dataclass
class PolicyScore:
    name: str
    mean: float
    stderr: float
    batch: int
    seed: object
    totals: np.ndarray = field(repr=False, default=None)


@dataclass
class ComparisonReport:
    scores: list
    N: int

    def by_name(self, name: str) -> PolicyScore:
        for s in self.scores:
            if s.name == name:
                return s
        raise KeyError(name)

    def ratio(self, num: str, den: str) -> float:
        a, b = self.by_name(num).mean, self.by_name(den).mean
        return a / b if b != 0 else (1.0 if a == 0 else float("inf"))

    def ratio_stderr(self, num: str, den: str) -> float:
        """Delta-method standard error of the paired mean ratio."""
        a, b = self.by_name(num), self.by_name(den)
        if b.mean == 0:
            return float("nan")
        ratio = a.mean / b.mean
        resid = a.totals - ratio * b.totals
        return float(resid.std(ddof=1) / np.sqrt(len(resid)) / abs(b.mean))

    def ratios(self, reference: str) -> dict:
        return {s.name: self.ratio(reference, s.name) for s in self.scores if s.name != reference}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "mean", "stderr", "batch", "seed"])
            for s in self.scores:
                w.writerow([s.name, repr(s.mean), repr(s.stderr), s.batch, s.seed])

    def bars_to_csv(self, path, reference: Optional[str] = None) -> None:
        """Figure data: one bar per policy, normalized to ``reference`` if given."""
        ref = self.by_name(reference).mean if reference else None
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "mean", "lower", "upper", "relative"])
            for s in self.scores:
                rel = s.mean / ref if ref else 1.0
                w.writerow([s.name, repr(s.mean), repr(s.mean - 1.96 * s.stderr), repr(s.mean + 1.96 * s.stderr), repr(rel)])


def compare(problem: StopProblem, policies: Sequence, N: int, batch: int, seed, names: Optional[Sequence[str]] = None) -> ComparisonReport:
    """Paired-seed evaluation of several policies on the same simulated paths."""
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    paths = simulate_paths(problem.model, N, batch, seed)
    scores = []
    used = set()
    for k, pol in enumerate(policies):
        pol = as_policy(pol)
        name = names[k] if names else pol.name
        base, i = name, 2
        while name in used:
            name = f"{base}_{i}"
            i += 1
        used.add(name)
        totals, _ = run_batch(problem, pol, paths)
        mean, stderr = _summary(totals)
        scores.append(PolicyScore(name, mean, stderr, batch, seed, totals))
    return ComparisonReport(scores, N)


def write_trace(path, model: HmmModel, policy, problem: StopProblem, N: int, seed) -> RolloutResult:
    """Dump one rollout as (t, state, observation, belief..., stops_remaining, action)."""
    result = rollout(problem, policy, N, seed)
    paths = simulate_paths(model, N, 1, seed)
    beliefs = belief_paths(model, paths.obs)[0]
    stops = set(result.stop_times.tolist())
    remaining = problem.L
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "state", "observation"] + [f"pi_{i + 1}" for i in range(model.S)] + ["stops_remaining", "action"])
        for t in range(N):
            action = 1 if t in stops else 2
            w.writerow([t, int(paths.states[0, t]) + 1, int(paths.obs[0, t])] + [repr(float(v)) for v in beliefs[t]] + [remaining, action])
            if action == 1:
                remaining -= 1
    return result


@dataclass
class DetectionResult:
    stop_time: Optional[int]  # None when the series ends without a detection
    beliefs: np.ndarray  # (T, S) posterior after each observation
    stop_set_threshold: Optional[float] = None

    @property
    def detected(self) -> bool:
        return self.stop_time is not None


def detect_change(
    model: HmmModel,
    reward,
    observations,
    rho: float = 0.9,
    solution: Optional[GridSolution] = None,
    resolution: int = 200,
) -> DetectionResult:
    """Single-stop detection: first time the filtered belief enters the stop set.

    The prior ``model.pi0`` describes the state one step before the first
    observation, so the belief after observation t is ``T(pi_{t-1}, y_t)``.
    """
    if model.S != 2:
        raise ValueError("change detection runs on a 2-state model")
    obs = np.asarray(observations, dtype=np.int64)
    if obs.ndim != 1 or len(obs) == 0:
        raise ValueError("need a nonempty observation series")
    if solution is None:
        problem = StopProblem(model, np.asarray(reward, dtype=float), 1, rho)
        solution = value_iteration(problem, BeliefGrid(resolution, 2))
    beliefs = np.empty((len(obs), 2))
    pi = model.pi0
    stop_time = None
    for t, y in enumerate(obs):
        pi = filter_batch(model, pi[None, :], np.array([y]))[0]
        beliefs[t] = pi
        if stop_time is None:
            q = solution.q_at(pi[None, :], 1)[0]
            if q[0] >= q[1]:
                stop_time = t
    mask = solution.policy[:, 1] == STOP
    thr = float(solution.grid.points[mask, 0].min()) if mask.any() else None
    return DetectionResult(stop_time, beliefs, thr)


def simulate_switch_series(model: HmmModel, n_after: int, seed, before: int = 1, after: int = 0, min_before: int = 1) -> tuple[np.ndarray, int]:
    """Observation series that sits in state ``before`` and jumps to ``after``.

    The dwell time before the jump is geometric with the model's own exit
    rate ``P[before, after]``, truncated below at ``min_before`` samples, so
    the switch is forced to happen. The series continues ``n_after`` samples
    past the jump. Returns ``(observations, switch_time)``.
    """
    rng = np.random.default_rng(seed)
    rate = float(model.P[before, after])
    if rate <= 0:
        raise ValueError("the model never leaves the pre-switch state")
    switch = int(rng.geometric(rate))
    while switch < min_before:
        switch = int(rng.geometric(rate))
    states = np.r_[np.full(switch, before), np.full(n_after, after)].astype(np.int64)
    obs = model.emission.sample(states, rng)
    return np.asarray(obs, dtype=np.int64), switch
