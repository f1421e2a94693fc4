"""Hidden Markov model with Poisson or categorical emissions.

State index 0 is the highest-engagement state. All ordering predicates
(MLR, FOSD, TP2) use that convention: a belief concentrated on low indices
dominates one concentrated on high indices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.special import gammaln

STOCHASTIC_TOL = 1e-12
ORDER_TOL = 1e-12
BELIEF_TOL = 1e-10


class FilterDegeneracyError(ValueError):
    """Raised when an observation has zero probability under the predicted belief."""


@dataclass(frozen=True)
class PoissonEmission:
    g: np.ndarray

    kind = "poisson"

    def __post_init__(self):
        g = np.asarray(self.g, dtype=float)
        if g.ndim != 1 or not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise ValueError("Poisson means must be a vector of positive finite reals")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)

    @property
    def n_states(self) -> int:
        return self.g.shape[0]

    def log_pmf(self, y) -> np.ndarray:
        """Log-likelihood table of shape ``y.shape + (S,)``."""
        y = np.asarray(y)
        if np.any(y < 0):
            raise ValueError("Poisson observations must be nonnegative")
        yf = y.astype(float)[..., None]
        return yf * np.log(self.g) - self.g - gammaln(yf + 1.0)

    def pmf(self, y) -> np.ndarray:
        return np.exp(self.log_pmf(y))

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.poisson(self.g[states])

    def to_dict(self) -> dict:
        return {"kind": "poisson", "g": self.g.tolist()}


@dataclass(frozen=True)
class CategoricalEmission:
    B: np.ndarray

    kind = "categorical"

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or np.any(B < 0):
            raise ValueError("categorical emission matrix must be 2-D and nonnegative")
        if np.any(np.abs(B.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("rows of the emission matrix must sum to 1")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    @property
    def n_states(self) -> int:
        return self.B.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.B.shape[1]

    def _check(self, y):
        y = np.asarray(y)
        if np.any(y < 0) or np.any(y >= self.n_symbols):
            raise ValueError(f"symbol index out of range [0, {self.n_symbols})")
        return y.astype(int)

    def pmf(self, y) -> np.ndarray:
        return self.B.T[self._check(y)]

    def log_pmf(self, y) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pmf(y))

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        cum = np.cumsum(self.B, axis=1)
        u = rng.random(np.shape(states))
        idx = (u[..., None] > cum[states]).sum(axis=-1)
        return np.minimum(idx, self.n_symbols - 1)

    def to_dict(self) -> dict:
        return {"kind": "categorical", "B": self.B.tolist()}


Emission = Union[PoissonEmission, CategoricalEmission]


@dataclass(frozen=True)
class HmmModel:
    """S-state Markov chain ``(P, pi0)`` observed through ``emission``."""

    P: np.ndarray
    pi0: np.ndarray
    emission: Emission

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        pi0 = np.asarray(self.pi0, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValueError("P must be a square matrix with at least one state")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("P must be row-stochastic")
        if pi0.shape != (P.shape[0],) or np.any(pi0 < 0) or abs(pi0.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("pi0 must be a probability vector over the S states")
        if self.emission.n_states != P.shape[0]:
            raise ValueError("emission has a different number of states than P")
        P.setflags(write=False)
        pi0.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "pi0", pi0)

    @property
    def S(self) -> int:
        return self.P.shape[0]

    @property
    def is_poisson(self) -> bool:
        return isinstance(self.emission, PoissonEmission)

    def with_pi0(self, pi0) -> "HmmModel":
        return HmmModel(self.P, pi0, self.emission)

    def stationary(self) -> np.ndarray:
        """Stationary distribution of P (left eigenvector for eigenvalue 1)."""
        w, v = np.linalg.eig(self.P.T)
        k = int(np.argmin(np.abs(w - 1.0)))
        p = np.abs(np.real(v[:, k]))
        return p / p.sum()

    # serialization
    def to_dict(self) -> dict:
        return {
            "S": self.S,
            "P": self.P.tolist(),
            "pi0": self.pi0.tolist(),
            "emission": self.emission.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HmmModel":
        em = doc["emission"]
        kind = em.get("kind")
        if kind == "poisson":
            emission = PoissonEmission(np.array(em["g"], dtype=float))
        elif kind == "categorical":
            emission = CategoricalEmission(np.array(em["B"], dtype=float))
        else:
            raise ValueError(f"unknown emission kind {kind!r}")
        model = cls(np.array(doc["P"], dtype=float), np.array(doc["pi0"], dtype=float), emission)
        if "S" in doc and int(doc["S"]) != model.S:
            raise ValueError(f"declared S={doc['S']} does not match P ({model.S} states)")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "HmmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def poisson_model(P, g, pi0=None) -> HmmModel:
    P = np.asarray(P, dtype=float)
    if pi0 is None:
        pi0 = np.full(P.shape[0], 1.0 / P.shape[0])
    return HmmModel(P, pi0, PoissonEmission(np.asarray(g, dtype=float)))


def categorical_model(P, B, pi0=None) -> HmmModel:
    P = np.asarray(P, dtype=float)
    if pi0 is None:
        pi0 = np.full(P.shape[0], 1.0 / P.shape[0])
    return HmmModel(P, pi0, CategoricalEmission(np.asarray(B, dtype=float)))


def obs_likelihood(model: HmmModel, state: int, y: int) -> float:
    """Probability of observing ``y`` in ``state``."""
    if not 0 <= state < model.S:
        raise ValueError(f"state index {state} out of range for S={model.S}")
    if y < 0 or int(y) != y:
        raise ValueError("observation must be a nonnegative integer")
    return float(model.emission.pmf(int(y))[state])


def _check_belief(pi, S: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.shape[-1] != S:
        raise ValueError(f"belief has dimension {pi.shape[-1]}, model has {S} states")
    if np.any(pi < -BELIEF_TOL) or np.any(np.abs(pi.sum(axis=-1) - 1.0) > BELIEF_TOL):
        raise ValueError("belief must be a probability vector")
    return pi


def belief_update(model: HmmModel, pi, y) -> tuple[np.ndarray, float]:
    """One step of the HMM filter.

    Returns the posterior ``T(pi, y)`` and the normalizer
    ``sigma(pi, y) = 1' B_y P' pi``.

    Raises
    ------
    FilterDegeneracyError
        If ``y`` has zero probability under the one-step prediction.
    """
    pi = _check_belief(pi, model.S)
    pred = pi @ model.P
    logb = model.emission.log_pmf(int(y))
    shift = np.max(logb)
    if not np.isfinite(shift):
        raise FilterDegeneracyError(f"observation {y} is impossible in every state")
    unnorm = pred * np.exp(logb - shift)
    total = unnorm.sum()
    if total <= 0.0:
        raise FilterDegeneracyError(f"observation {y} has zero probability under the predicted belief")
    return unnorm / total, float(total * np.exp(shift))


def filter_batch(model: HmmModel, pis: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized filter step for many (belief, observation) pairs.

    ``pis`` has shape (n, S), ``ys`` shape (n,). Rows whose observation is
    impossible raise :class:`FilterDegeneracyError`.
    """
    pred = pis @ model.P
    logb = model.emission.log_pmf(ys)
    shift = np.max(logb, axis=-1, keepdims=True)
    if not np.all(np.isfinite(shift)):
        raise FilterDegeneracyError("observation impossible in every state")
    unnorm = pred * np.exp(logb - shift)
    total = unnorm.sum(axis=-1, keepdims=True)
    if np.any(total <= 0.0):
        raise FilterDegeneracyError("observation has zero probability under the predicted belief")
    return unnorm / total


def sample_paths(model: HmmModel, horizon: int, batch: int, rng: np.random.Generator):
    """Simulate ``batch`` independent state/observation paths of length ``horizon``.

    Returns integer arrays ``states`` and ``obs`` of shape (batch, horizon).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cum0 = np.cumsum(model.pi0)
    cumP = np.cumsum(model.P, axis=1)
    u = rng.random((horizon, batch))
    states = np.empty((horizon, batch), dtype=np.int64)
    states[0] = np.minimum((u[0][:, None] > cum0).sum(axis=1), model.S - 1)
    for t in range(1, horizon):
        prev = states[t - 1]
        states[t] = np.minimum((u[t][:, None] > cumP[prev]).sum(axis=1), model.S - 1)
    states = states.T.copy()
    obs = model.emission.sample(states, rng)
    return states, np.asarray(obs, dtype=np.int64)


def sample_trajectory(model: HmmModel, horizon: int, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    states, obs = sample_paths(model, horizon, 1, rng)
    return states[0], obs[0]


def is_tp2(matrix, tol: float = ORDER_TOL) -> bool:
    """True iff every 2x2 minor of ``matrix`` is >= -tol."""
    A = np.asarray(matrix, dtype=float)
    if A.ndim != 2:
        raise ValueError("expected a matrix")
    return not tp2_violations(A, tol)


def tp2_violations(matrix, tol: float = ORDER_TOL) -> list[tuple[int, int, int, int]]:
    A = np.asarray(matrix, dtype=float)
    n, m = A.shape
    if n < 2 or m < 2:
        return []
    # minors[i1, i2, j1, j2] = A[i1,j1] A[i2,j2] - A[i1,j2] A[i2,j1]
    minors = np.einsum("ac,bd->abcd", A, A) - np.einsum("ad,bc->abcd", A, A)
    iu = np.triu(np.ones((n, n), dtype=bool), 1)[:, :, None, None]
    ju = np.triu(np.ones((m, m), dtype=bool), 1)[None, None, :, :]
    bad = np.argwhere((minors < -tol) & iu & ju)
    return [tuple(int(v) for v in row) for row in bad]


def mlr_geq(p1, p2, tol: float = ORDER_TOL) -> bool:
    """``p1 >=_r p2``: p1(j) p2(i) <= p2(j) p1(i) for all i < j."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise ValueError("beliefs must have the same dimension")
    lhs = np.outer(p2, p1)  # lhs[i, j] = p2(i) p1(j)
    diff = lhs - lhs.T  # p1(j)p2(i) - p2(j)p1(i)
    return bool(np.all(np.triu(diff, 1) <= tol))


def fosd_geq(p1, p2, tol: float = ORDER_TOL) -> bool:
    """First-order dominance with state 0 best: upper tail sums of p1 never exceed p2's."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape:
        raise ValueError("beliefs must have the same dimension")
    t1 = np.cumsum(p1[::-1])[::-1]
    t2 = np.cumsum(p2[::-1])[::-1]
    return bool(np.all(t1 <= t2 + tol))


def line_point(endpoint: str, pibar, gamma: float) -> np.ndarray:
    """Point ``(1-gamma) pibar + gamma e`` on a line through a simplex vertex.

    ``endpoint`` is ``"first"`` (e_1, requires pibar[0] == 0) or ``"last"``
    (e_S, requires pibar[-1] == 0).
    """
    pibar = np.asarray(pibar, dtype=float)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    e = np.zeros_like(pibar)
    if endpoint == "first":
        if abs(pibar[0]) > ORDER_TOL:
            raise ValueError("pibar must have zero mass on the first state")
        e[0] = 1.0
    elif endpoint == "last":
        if abs(pibar[-1]) > ORDER_TOL:
            raise ValueError("pibar must have zero mass on the last state")
        e[-1] = 1.0
    else:
        raise ValueError("endpoint must be 'first' or 'last'")
    return (1.0 - gamma) * pibar + gamma * e
