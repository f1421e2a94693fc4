"""Multiple-stopping POMDP: value iteration on a simplex grid and structural checks."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.stats import poisson

from .hmm_core import HmmModel, is_tp2, tp2_violations
from .simplex_grid import BeliefGrid

logger = logging.getLogger(__name__)

STOP, CONTINUE = 1, 2
DEFAULT_MASS_TOL = 1e-10
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERS = 2000
DEFAULT_RESOLUTION = {1: 1, 2: 200, 3: 100, 4: 30}
MAX_DP_STATES = 4


class DPTooLargeError(ValueError):
    """The belief grid for this many states is impractically large."""


@dataclass(frozen=True)
class StopProblem:
    """HMM plus stop rewards, number of stops and discount.

    ``r`` is either an S-vector shared by all stops or an (L, S) array whose
    row ``l - 1`` is the reward for stopping with ``l`` stops remaining.
    """

    model: HmmModel
    r: np.ndarray
    L: int
    rho: float = 0.9

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        S = self.model.S
        if r.shape not in ((S,), (self.L, S)):
            raise ValueError(f"reward must have shape ({S},) or ({self.L}, {S})")
        if not np.all(np.isfinite(r)):
            raise ValueError("rewards must be finite")
        if self.L < 1:
            raise ValueError("need at least one stop")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @property
    def S(self) -> int:
        return self.model.S

    @property
    def shared_reward(self) -> bool:
        return self.r.ndim == 1

    def reward_for(self, l: int) -> np.ndarray:
        """Stop-reward vector when ``l`` stops remain (1 <= l <= L)."""
        return self.r if self.r.ndim == 1 else self.r[l - 1]

    def reward_table(self) -> np.ndarray:
        """(L, S) reward table."""
        return np.broadcast_to(self.r, (self.L, self.S)) if self.r.ndim == 1 else self.r


@dataclass
class AssumptionReport:
    a1: bool
    a2: bool
    a3: bool
    a4: bool
    witnesses: dict = field(default_factory=dict)

    @property
    def all_hold(self) -> bool:
        return self.a1 and self.a2 and self.a3 and self.a4

    def lines(self) -> list[str]:
        names = {
            "a1": "rewards nonincreasing in state",
            "a2": "emission TP2 (nonincreasing Poisson means, or TP2 symbol matrix)",
            "a3": "transition matrix TP2",
            "a4": "(I - rho P') r nonincreasing",
        }
        out = []
        for key, text in names.items():
            ok = getattr(self, key)
            extra = "" if ok else f"  witness={self.witnesses.get(key)}"
            out.append(f"{key.upper()} {'holds' if ok else 'FAILS'}: {text}{extra}")
        return out


def _first_increase(v: np.ndarray, tol: float = 1e-12):
    for i in range(len(v) - 1):
        if v[i + 1] > v[i] + tol:
            return (i, i + 1)
    return None


def check_assumptions(problem: StopProblem) -> AssumptionReport:
    """Evaluate the monotonicity assumptions behind the threshold structure.

    Witness indices are 0-based state pairs ``(i, i+1)`` where the vector
    increases, or the TP2 minor ``(i1, i2, j1, j2)`` that is negative.
    """
    model = problem.model
    witnesses = {}
    rewards = problem.reward_table()

    w1 = next((w for w in (_first_increase(r) for r in rewards) if w), None)
    if w1:
        witnesses["a1"] = w1

    if model.is_poisson:
        w2 = _first_increase(model.emission.g)
    else:
        bad = tp2_violations(model.emission.B)
        w2 = bad[0] if bad else None
    if w2:
        witnesses["a2"] = w2

    bad = tp2_violations(model.P)
    if bad:
        witnesses["a3"] = bad[0]

    w4 = None
    for r in rewards:
        v = r - problem.rho * (model.P.T @ r)
        w4 = _first_increase(v)
        if w4:
            break
    if w4:
        witnesses["a4"] = w4

    return AssumptionReport(
        a1="a1" not in witnesses,
        a2="a2" not in witnesses,
        a3="a3" not in witnesses,
        a4="a4" not in witnesses,
        witnesses=witnesses,
    )


def truncate_observations(model: HmmModel, mass_tol: float = DEFAULT_MASS_TOL) -> int:
    """Largest observation index kept when summing over observations.

    For Poisson emissions: the smallest ``Y_max`` whose CDF reaches
    ``1 - mass_tol`` in every state. Categorical emissions are never truncated.
    """
    if not model.is_poisson:
        return model.emission.n_symbols - 1
    y_max = 0
    for g in model.emission.g:
        k = int(poisson.isf(mass_tol, g))
        while poisson.sf(k, g) > mass_tol:
            k += 1
        while k > 0 and poisson.sf(k - 1, g) <= mass_tol:
            k -= 1
        y_max = max(y_max, k)
    return y_max


def observation_table(model: HmmModel, mass_tol: float = DEFAULT_MASS_TOL) -> np.ndarray:
    """(Y_max + 1, S) likelihood table whose columns sum to exactly one per state.

    The last Poisson row holds the whole upper tail ``P(Y >= Y_max)``.
    """
    y_max = truncate_observations(model, mass_tol)
    if not model.is_poisson:
        return np.array(model.emission.B.T)
    ys = np.arange(y_max + 1)
    table = model.emission.pmf(ys)
    table[-1] = poisson.sf(y_max - 1, model.emission.g) if y_max > 0 else 1.0
    return table


def initial_values(problem: StopProblem, beliefs: np.ndarray) -> np.ndarray:
    """V_0(pi, l): expected reward of stopping l times in a row from pi.

    Column 0 is l = 0 (identically zero); shape (n, L + 1).
    """
    n = beliefs.shape[0]
    V0 = np.zeros((n, problem.L + 1))
    P = problem.model.P
    for l in range(1, problem.L + 1):
        acc = np.zeros(problem.S)
        Pj = np.eye(problem.S)
        for j in range(l):
            acc += problem.rho**j * (Pj @ problem.reward_for(l - j))
            Pj = Pj @ P
        V0[:, l] = beliefs @ acc
    return V0


def transition_operator(problem: StopProblem, grid: BeliefGrid, mass_tol: float = DEFAULT_MASS_TOL) -> sp.csr_matrix:
    """Sparse (n, n) matrix K with (K V)(pi) = sum_y V(T(pi, y)) sigma(pi, y).

    Posteriors off the grid are interpolated on the Freudenthal simplex.
    """
    table = observation_table(problem.model, mass_tol)
    pts = grid.points
    pred = pts @ problem.model.P
    unnorm = pred[:, None, :] * table[None, :, :]  # (n, Ny, S)
    sigma = unnorm.sum(axis=2)
    keep = sigma > 0.0
    rows_pt, rows_y = np.nonzero(keep)
    post = unnorm[rows_pt, rows_y] / sigma[rows_pt, rows_y, None]
    idx, w = grid.barycentric(post)
    vals = (w * sigma[rows_pt, rows_y, None]).ravel()
    rows = np.repeat(rows_pt, grid.S)
    K = sp.coo_matrix((vals, (rows, idx.ravel())), shape=(len(grid), len(grid))).tocsr()
    K.sum_duplicates()
    return K


@dataclass
class GridSolution:
    """Converged (or flagged) value-iteration output on a belief grid.

    Tables are indexed ``[grid point, l]``; ``V`` has L + 1 columns with
    ``V[:, 0] == 0``. ``Q`` has shape (n, L + 1, 2) with column 0 unused and
    action order (stop, continue). ``policy`` holds 1 (stop) or 2 (continue).
    """

    grid: BeliefGrid
    rho: float
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float
    converged: bool
    residuals: list = field(default_factory=list, repr=False)

    @property
    def L(self) -> int:
        return self.V.shape[1] - 1

    @property
    def W(self) -> np.ndarray:
        """W(pi, l) = V(pi, l) - V(pi, l - 1) for l = 1..L, shape (n, L)."""
        return np.diff(self.V, axis=1)

    @property
    def stop_sets(self) -> np.ndarray:
        return extract_stopping_sets(self)

    def q_at(self, beliefs, l: int) -> np.ndarray:
        """Interpolated (stop, continue) Q values at arbitrary beliefs."""
        return self.grid.interpolate(self.Q[:, l, :], beliefs)

    def action_at(self, beliefs, l: int) -> np.ndarray:
        q = self.q_at(beliefs, l)
        return np.where(q[..., 0] >= q[..., 1], STOP, CONTINUE)

    def to_csv(self, path) -> None:
        """Rows (l, pi_1..pi_S, V, Q_stop, Q_continue, action)."""
        S = self.grid.S
        pts = self.grid.points
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["l"] + [f"pi_{i + 1}" for i in range(S)] + ["V", "Q_stop", "Q_continue", "action"])
            for l in range(1, self.L + 1):
                for k in range(len(self.grid)):
                    w.writerow(
                        [l]
                        + [repr(float(v)) for v in pts[k]]
                        + [repr(float(self.V[k, l])), repr(float(self.Q[k, l, 0])), repr(float(self.Q[k, l, 1])), int(self.policy[k, l])]
                    )

    def stop_sets_to_csv(self, out_dir, prefix: str = "stop_set") -> list[Path]:
        out_dir = Path(out_dir)
        masks = extract_stopping_sets(self)
        pts = self.grid.points
        paths = []
        for l in range(1, self.L + 1):
            path = out_dir / f"{prefix}_l{l}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([f"pi_{i + 1}" for i in range(self.grid.S)] + ["stop"])
                for k in range(len(self.grid)):
                    w.writerow([repr(float(v)) for v in pts[k]] + [int(masks[l][k])])
            paths.append(path)
        return paths


def _bellman(K: sp.csr_matrix, R: np.ndarray, V: np.ndarray, rho: float) -> np.ndarray:
    """Q tables (n, L + 1, 2) for one Bellman backup of V."""
    EV = K @ V  # (n, L + 1)
    Q = np.zeros(V.shape + (2,))
    Q[:, 1:, 0] = R + rho * EV[:, :-1]
    Q[:, 1:, 1] = rho * EV[:, 1:]
    return Q


def value_iteration(
    problem: StopProblem,
    grid: Optional[BeliefGrid] = None,
    tol: float = DEFAULT_TOL,
    max_iters: int = DEFAULT_MAX_ITERS,
    mass_tol: float = DEFAULT_MASS_TOL,
    force: bool = False,
) -> GridSolution:
    """Successive approximation of the multiple-stopping Bellman equation.

    All stop levels are updated together from the previous iterate. The
    iteration starts from the "stop l times in a row" values and ends when
    the sup-norm change drops below ``tol``.
    """
    S = problem.S
    if S > MAX_DP_STATES and not force:
        raise DPTooLargeError(
            f"dynamic programming over a {S}-state belief simplex is impractical; "
            "use the linear threshold optimizer or pass force=True"
        )
    if grid is None:
        grid = BeliefGrid(DEFAULT_RESOLUTION.get(S, 10), S)
    if grid.S != S:
        raise ValueError("grid dimension does not match the model")
    report = check_assumptions(problem)
    if not report.all_hold:
        logger.warning("structural assumptions violated: %s", "; ".join(l for l in report.lines() if "FAILS" in l))

    pts = grid.points
    R = pts @ problem.reward_table().T  # (n, L)
    K = transition_operator(problem, grid, mass_tol)
    rho = problem.rho
    V = initial_values(problem, pts)
    residuals = []
    converged = False
    Q = _bellman(K, R, V, rho)
    it = 0
    while it < max_iters:
        V_new = np.zeros_like(V)
        V_new[:, 1:] = np.maximum(Q[:, 1:, 0], Q[:, 1:, 1])
        res = float(np.max(np.abs(V_new - V)))
        V = V_new
        it += 1
        residuals.append(res)
        Q = _bellman(K, R, V, rho)
        if res < tol:
            converged = True
            break
    if not converged:
        logger.warning("value iteration stopped after %d iterations, residual %.3g", it, residuals[-1] if residuals else float("nan"))
    # report the values that the final Q tables are consistent with
    V[:, 1:] = np.maximum(Q[:, 1:, 0], Q[:, 1:, 1])
    policy = np.zeros(V.shape, dtype=np.int8)
    policy[:, 1:] = np.where(Q[:, 1:, 0] >= Q[:, 1:, 1], STOP, CONTINUE)
    return GridSolution(
        grid=grid,
        rho=rho,
        V=V,
        Q=Q,
        policy=policy,
        iterations=it,
        residual=residuals[-1] if residuals else 0.0,
        converged=converged,
        residuals=residuals,
    )


def extract_stopping_sets(solution: GridSolution) -> dict[int, np.ndarray]:
    """Boolean stop masks over the grid, keyed by stops remaining."""
    return {l: solution.policy[:, l] == STOP for l in range(1, solution.L + 1)}


def verify_nested(solution: GridSolution) -> tuple[bool, list[tuple[int, int]]]:
    """Check S^{l-1} is contained in S^l; violations are (grid index, l)."""
    masks = extract_stopping_sets(solution)
    violations = []
    for l in range(2, solution.L + 1):
        bad = np.nonzero(masks[l - 1] & ~masks[l])[0]
        violations.extend((int(k), l) for k in bad)
    return not violations, violations


def grid_lines(grid: BeliefGrid, vertex: int) -> list[np.ndarray]:
    """Grid points on lines through a vertex, ordered by increasing mass on it.

    Each line keeps the relative proportions of the other coordinates fixed;
    the vertex itself ends every line.
    """
    counts = grid.counts
    others = np.delete(counts, vertex, axis=1)
    groups: dict[tuple, list[int]] = {}
    for k, row in enumerate(others):
        total = int(row.sum())
        if total == 0:
            continue
        g = 0
        for v in row:
            g = gcd(g, int(v))
        key = tuple(int(v) // g for v in row)
        groups.setdefault(key, []).append(k)
    apex = grid.vertex_index(vertex)
    lines = []
    for members in groups.values():
        members = sorted(members, key=lambda k: counts[k, vertex])
        lines.append(np.array(members + [apex], dtype=np.int64))
    return lines


@dataclass
class LineCheck:
    ok: bool
    first_violations: list  # (l, grid index) on lines through e_1
    last_violations: list  # (l, grid index) on lines through e_S
    n_lines: int

    @property
    def violations(self) -> list:
        return self.first_violations + self.last_violations


def _single_switch(actions: np.ndarray, before: int, after: int) -> Optional[int]:
    """Position of the first entry that breaks the pattern before* after*."""
    seen_after = False
    for pos, a in enumerate(actions):
        if a == after:
            seen_after = True
        elif seen_after:
            return pos
    return None


def verify_threshold_on_lines(solution: GridSolution, policy: Optional[np.ndarray] = None) -> LineCheck:
    """Along each grid line the action switches at most once.

    Moving toward e_1 it may only change from continue to stop; moving toward
    e_S only from stop to continue. ``policy`` overrides the solution's table
    (used to test the detector itself).
    """
    grid = solution.grid
    table = solution.policy if policy is None else policy
    first, last = [], []
    lines_1 = grid_lines(grid, 0) if grid.S > 1 else []
    lines_S = grid_lines(grid, grid.S - 1) if grid.S > 1 else []
    for l in range(1, solution.L + 1):
        for line in lines_1:
            pos = _single_switch(table[line, l], CONTINUE, STOP)
            if pos is not None:
                first.append((l, int(line[pos])))
        for line in lines_S:
            pos = _single_switch(table[line, l], STOP, CONTINUE)
            if pos is not None:
                last.append((l, int(line[pos])))
    return LineCheck(not first and not last, first, last, len(lines_1) + len(lines_S))


@dataclass
class MonotoneCheck:
    value_ok: bool
    w_ok: bool
    value_violations: list  # (l, i, j): grid i >=_r grid j but V(i) < V(j) - tol
    w_violations: list  # (l, k): W(k, l) > W(k, l - 1) + tol
    comparable_pairs: int

    @property
    def ok(self) -> bool:
        return self.value_ok and self.w_ok


def mlr_comparable_pairs(grid: BeliefGrid, chunk: int = 512):
    """Yield (i, j) index arrays with grid point i >=_r grid point j, i != j.

    Uses exact integer arithmetic on the grid counts.
    """
    k = grid.counts
    n, S = k.shape
    iu, ju = np.triu_indices(S, 1)
    for start in range(0, n, chunk):
        a = k[start : start + chunk]
        # a >=_r b  iff  a(j) b(i) <= b(j) a(i)  for all i < j
        ok = np.ones((a.shape[0], n), dtype=bool)
        for i, j in zip(iu, ju):
            ok &= a[:, j, None] * k[None, :, i] <= k[None, :, j] * a[:, i, None]
        ii, jj = np.nonzero(ok)
        ii = ii + start
        keep = ii != jj
        yield ii[keep], jj[keep]


def verify_monotone_value(solution: GridSolution, tol: float = 1e-9) -> MonotoneCheck:
    """V increasing in the MLR order on the grid and W nonincreasing in l."""
    V = solution.V
    value_bad = []
    pairs = 0
    for ii, jj in mlr_comparable_pairs(solution.grid):
        pairs += len(ii)
        for l in range(1, solution.L + 1):
            bad = np.nonzero(V[ii, l] < V[jj, l] - tol)[0]
            value_bad.extend((l, int(ii[b]), int(jj[b])) for b in bad[:100])
    W = solution.W
    w_bad = []
    for l in range(2, solution.L + 1):
        bad = np.nonzero(W[:, l - 1] > W[:, l - 2] + tol)[0]
        w_bad.extend((l, int(k)) for k in bad)
    return MonotoneCheck(not value_bad, not w_bad, value_bad, w_bad, pairs)
