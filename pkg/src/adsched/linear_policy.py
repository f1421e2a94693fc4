"""Linear threshold scheduling policies and their angle parametrization.

A policy holds one coefficient row ``theta[l - 1]`` of length S - 1 per
stops-remaining level ``l``. With 0-based states the decision value is::

    pi[1] + sum_{i=0}^{S-3} theta_l[i] * pi[i + 2] - theta_l[S - 2]

and the policy stops when it is <= 0. The last coefficient is the
threshold; the first S - 2 weight the low-engagement states.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .stopping_problem import CONTINUE, STOP

FEAS_TOL = 1e-12


class InfeasiblePolicyError(ValueError):
    pass


@dataclass(frozen=True)
class LinearThresholdPolicy:
    theta: np.ndarray
    phi: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] < 1:
            raise ValueError("theta must be an (L, S - 1) array")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        if self.phi is not None:
            phi = np.array(self.phi, dtype=float)
            phi.setflags(write=False)
            object.__setattr__(self, "phi", phi)

    @property
    def L(self) -> int:
        return self.theta.shape[0]

    @property
    def S(self) -> int:
        return self.theta.shape[1] + 1

    def decision_value(self, l: int, pi) -> np.ndarray:
        """Affine statistic for ``l`` stops remaining; works on stacked beliefs."""
        if not 1 <= l <= self.L:
            raise ValueError(f"stops remaining {l} outside 1..{self.L}")
        pi = np.asarray(pi, dtype=float)
        if pi.shape[-1] != self.S:
            raise ValueError(f"belief dimension {pi.shape[-1]} does not match policy S={self.S}")
        th = self.theta[l - 1]
        if self.S == 1:
            return np.zeros(pi.shape[:-1])
        return pi[..., 1] + pi[..., 2:] @ th[:-1] - th[-1]

    def decision_values(self, pis: np.ndarray) -> np.ndarray:
        """Decision values for every level at once: shape ``pis.shape[:-1] + (L,)``."""
        pis = np.asarray(pis, dtype=float)
        if self.S == 1:
            return np.zeros(pis.shape[:-1] + (self.L,))
        lin = pis[..., 2:] @ self.theta[:, :-1].T
        return pis[..., 1, None] + lin - self.theta[:, -1]

    # serialization
    def to_dict(self) -> dict:
        doc = {"L": self.L, "S": self.S, "theta": self.theta.tolist()}
        if self.phi is not None:
            doc["phi"] = self.phi.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict, validate: bool = True) -> "LinearThresholdPolicy":
        theta = np.array(doc["theta"], dtype=float)
        if theta.shape != (int(doc["L"]), int(doc["S"]) - 1):
            raise ValueError(f"theta has shape {theta.shape}, expected ({doc['L']}, {int(doc['S']) - 1})")
        policy = cls(theta, doc.get("phi"))
        if validate:
            ok1, bad1 = check_mlr_constraints(policy)
            ok2, bad2 = check_subset_constraints(policy)
            if not (ok1 and ok2):
                raise InfeasiblePolicyError(f"policy violates threshold constraints: {bad1 + bad2}")
        return policy

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LinearThresholdPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def decide(policy: LinearThresholdPolicy, l: int, pi) -> int:
    """1 (stop) if the decision value is <= 0, else 2 (continue)."""
    return STOP if float(policy.decision_value(l, pi)) <= 0.0 else CONTINUE


def phi_to_theta(phi) -> LinearThresholdPolicy:
    """Map unconstrained parameters to a feasible threshold policy.

    ``phi`` has shape (L, S - 1). With 0-based columns ``t = S - 2`` (the
    threshold) and ``w = S - 3`` (the largest weight)::

        theta_l[t] = phi_1[t]^2
        theta_l[w] = 1 + phi_1[w]^2 * prod_{k=2..l} sin^2(phi_k[w])
        theta_l[i] = theta_l[w] * prod_{k=1..l} sin^2(phi_k[i])      i < w

    The running product in the last line keeps the weights nonincreasing in
    l, which the nesting constraint needs once S >= 4.
    """
    phi = np.array(phi, dtype=float)
    if phi.ndim != 2:
        raise ValueError("phi must be an (L, S - 1) array")
    L, m = phi.shape
    theta = np.empty((L, m))
    if m == 0:
        return LinearThresholdPolicy(theta, phi)
    theta[:, -1] = phi[0, -1] ** 2
    if m >= 2:
        s2 = np.sin(phi[:, -2]) ** 2
        cum = np.cumprod(np.concatenate([[1.0], s2[1:]]))
        theta[:, -2] = 1.0 + phi[0, -2] ** 2 * cum
        if m >= 3:
            inner = np.cumprod(np.sin(phi[:, :-2]) ** 2, axis=0)
            theta[:, :-2] = theta[:, -2, None] * inner
    return LinearThresholdPolicy(theta, phi)


def check_mlr_constraints(policy: LinearThresholdPolicy, tol: float = FEAS_TOL) -> tuple[bool, list[str]]:
    """Conditions making the policy monotone on lines through e_1 and e_S."""
    bad = []
    for l, th in enumerate(policy.theta, start=1):
        if th[-1] < -tol:
            bad.append(f"l={l}: threshold {th[-1]:.6g} < 0")
        if len(th) >= 2:
            w = th[-2]
            for i in range(len(th) - 1):
                if th[i] < -tol:
                    bad.append(f"l={l}: weight {i} = {th[i]:.6g} < 0")
            if w < 1.0 - tol:
                bad.append(f"l={l}: last weight {w:.6g} < 1")
            for i in range(len(th) - 2):
                if th[i] > w + tol:
                    bad.append(f"l={l}: weight {i} = {th[i]:.6g} exceeds last weight {w:.6g}")
    return not bad, bad


def check_subset_constraints(policy: LinearThresholdPolicy, tol: float = FEAS_TOL) -> tuple[bool, list[str]]:
    """Shared threshold across levels and weights nonincreasing as l grows."""
    bad = []
    th = policy.theta
    for l in range(2, policy.L + 1):
        prev, cur = th[l - 2], th[l - 1]
        if abs(prev[-1] - cur[-1]) > tol:
            bad.append(f"l={l}: threshold {cur[-1]:.6g} differs from l={l - 1} value {prev[-1]:.6g}")
        for i in range(len(cur) - 1):
            if prev[i] < cur[i] - tol:
                bad.append(f"l={l}: weight {i} = {cur[i]:.6g} exceeds l={l - 1} value {prev[i]:.6g}")
    return not bad, bad


def is_feasible(policy: LinearThresholdPolicy) -> bool:
    return check_mlr_constraints(policy)[0] and check_subset_constraints(policy)[0]


def always_stop(L: int, S: int) -> LinearThresholdPolicy:
    """Feasible policy that stops at every belief (threshold >= 1 suffices)."""
    theta = np.zeros((L, S - 1))
    if S >= 3:
        theta[:, -2] = 1.0
    if S >= 2:
        theta[:, -1] = 2.0
    return LinearThresholdPolicy(theta)
