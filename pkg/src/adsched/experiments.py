"""Built-in model parameters for the reproduction experiments.

The constants below are the printed tables, digit for digit. Two printed
tables are not exactly stochastic (a Twitch transition row sums to 0.99 and
a Buzz emission row to 0.9999); :func:`build_model` renormalizes rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hmm_core import HmmModel, categorical_model, poisson_model
from .stopping_problem import StopProblem

SYNTHETIC_P = (
    (0.2, 0.1, 0.7),
    (0.1, 0.1, 0.8),
    (0.0, 0.1, 0.9),
)
SYNTHETIC_G = (12.0, 7.0, 2.0)
SYNTHETIC_R = (9.0, 3.0, 1.0)

YOUTUBE_P = (
    (0.94, 0.06, 0.00, 0.00, 0.00),
    (0.02, 0.94, 0.04, 0.00, 0.00),
    (0.00, 0.02, 0.96, 0.02, 0.00),
    (0.00, 0.00, 0.06, 0.91, 0.03),
    (0.00, 0.00, 0.00, 0.01, 0.99),
)
YOUTUBE_G = (184.0, 139.0, 102.0, 66.0, 37.0)

TWITCH_P = (
    (0.97, 0.03, 0.00, 0.00, 0.00),
    (0.01, 0.96, 0.03, 0.00, 0.00),
    (0.00, 0.02, 0.95, 0.03, 0.00),
    (0.00, 0.00, 0.02, 0.96, 0.01),
    (0.00, 0.00, 0.00, 0.02, 0.98),
)
TWITCH_G = (55.24, 42.40, 34.65, 28.30, 20.6)

BUZZ_P = (
    (1.0, 0.0),
    (0.1462, 0.8538),
)
BUZZ_B = (
    (0.1489, 0.4467, 0.4044),
    (0.3727, 0.5325, 0.0947),
)
BUZZ_R = (10.0, 1.0)


def normalize_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a / a.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Experiment:
    name: str
    kind: str  # "poisson" or "categorical"
    P: tuple
    emission: tuple
    reward: Optional[tuple]  # None: reward equals the Poisson means (alpha = 1)
    L: int
    prior: str  # "stationary" or "last"
    description: str

    def build_model(self) -> HmmModel:
        P = normalize_rows(self.P)
        if self.kind == "poisson":
            model = poisson_model(P, self.emission)
        else:
            model = categorical_model(P, normalize_rows(self.emission))
        if self.prior == "stationary":
            return model.with_pi0(model.stationary())
        pi0 = np.zeros(model.S)
        pi0[-1] = 1.0
        return model.with_pi0(pi0)

    def reward_vector(self, alpha=1.0) -> np.ndarray:
        if self.reward is not None:
            return np.asarray(self.reward, dtype=float)
        return np.asarray(alpha, dtype=float) * np.asarray(self.emission, dtype=float)

    def problem(self, rho: float = 0.9, L: Optional[int] = None, alpha=1.0) -> StopProblem:
        return StopProblem(self.build_model(), self.reward_vector(alpha), L or self.L, rho)


EXPERIMENTS = {
    "synthetic": Experiment(
        "synthetic", "poisson", SYNTHETIC_P, SYNTHETIC_G, SYNTHETIC_R, 5, "stationary",
        "3-state toy channel (popular / interesting / boring)",
    ),
    "youtube": Experiment(
        "youtube", "poisson", YOUTUBE_P, YOUTUBE_G, None, 5, "stationary",
        "5-state YouTube Live entertainment channel",
    ),
    "twitch": Experiment(
        "twitch", "poisson", TWITCH_P, TWITCH_G, None, 5, "stationary",
        "5-state Twitch gaming channel",
    ),
    "buzz-change": Experiment(
        "buzz-change", "categorical", BUZZ_P, BUZZ_B, BUZZ_R, 1, "last",
        "2-state valuation change detection from quantized trade volume",
    ),
}


def get(name: str) -> Experiment:
    try:
        return EXPERIMENTS[name]
    except KeyError:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}") from None
