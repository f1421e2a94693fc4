"""Baum-Welch fitting of Poisson / categorical HMMs, model-order selection,
pseudo-residual diagnostics and count quantization."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numba import njit
from scipy.cluster.vq import kmeans2
from scipy.special import gammaln
from scipy.stats import norm, poisson, rankdata

from .hmm_core import CategoricalEmission, HmmModel, PoissonEmission, sample_paths

logger = logging.getLogger(__name__)

MIN_RATE = 1e-8
MIN_PROB = 1e-300


@dataclass
class CountSeries:
    counts: np.ndarray
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or len(counts) < 2:
            raise ValueError("a count series needs at least two samples")
        if not np.all(np.isfinite(counts)) or np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise ValueError("counts must be finite nonnegative integers")
        self.counts = counts.astype(np.int64)

    def __len__(self) -> int:
        return len(self.counts)

    @classmethod
    def from_csv(cls, path, column: str = "viewers") -> "CountSeries":
        """Read a CSV with a ``viewers`` column (and optional ``timestamp``).

        A single-column file without a recognised header is read as raw counts.
        Raises ValueError naming the offending line on malformed input.
        """
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        rows = [r for r in rows if any(cell.strip() for cell in r)]
        if not rows:
            raise ValueError(f"{path}: empty file")
        header = [h.strip().lower() for h in rows[0]]
        start = 1
        if column in header:
            col = header.index(column)
        elif len(header) == 1:
            col = 0
            try:
                float(header[0])
                start = 0
            except ValueError:
                start = 1
        else:
            raise ValueError(f"{path}:1: no '{column}' column in header {rows[0]}")
        ts_col = header.index("timestamp") if "timestamp" in header else None
        counts, stamps = [], []
        for lineno, row in enumerate(rows[start:], start=start + 1):
            try:
                v = float(row[col])
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{lineno}: cannot read a count from {row}") from None
            if v < 0 or v != int(v):
                raise ValueError(f"{path}:{lineno}: count {row[col]!r} is not a nonnegative integer")
            counts.append(int(v))
            if ts_col is not None:
                stamps.append(row[ts_col])
        return cls(np.array(counts), np.array(stamps) if ts_col is not None else None)


@dataclass
class FitResult:
    model: HmmModel
    loglik: float
    aic: float
    bic: float
    n_params: int
    iterations: int
    converged: bool
    rank_deficient: bool = False
    loglik_trace: list = field(default_factory=list, repr=False)

    @property
    def S(self) -> int:
        return self.model.S


def n_free_params(S: int, kind: str = "poisson", n_symbols: int = 0) -> int:
    """Transition rows, emission parameters and initial distribution."""
    emission = S if kind == "poisson" else S * (n_symbols - 1)
    return S * (S - 1) + emission + (S - 1)


@njit(cache=True)
def _forward(b, P, pi0):
    T, S = b.shape
    alpha = np.empty((T, S))
    c = np.empty(T)
    a = pi0 * b[0]
    s = a.sum()
    c[0] = s
    alpha[0] = a / s if s > 0 else a
    for t in range(1, T):
        for j in range(S):
            acc = 0.0
            for i in range(S):
                acc += alpha[t - 1, i] * P[i, j]
            alpha[t, j] = acc * b[t, j]
        s = 0.0
        for j in range(S):
            s += alpha[t, j]
        c[t] = s
        if s > 0:
            for j in range(S):
                alpha[t, j] /= s
    return alpha, c


@njit(cache=True)
def _backward(b, P, c):
    T, S = b.shape
    beta = np.empty((T, S))
    for j in range(S):
        beta[T - 1, j] = 1.0
    tmp = np.empty(S)
    for t in range(T - 2, -1, -1):
        for j in range(S):
            tmp[j] = b[t + 1, j] * beta[t + 1, j]
        for i in range(S):
            acc = 0.0
            for j in range(S):
                acc += P[i, j] * tmp[j]
            beta[t, i] = acc / c[t + 1]
    return beta


@njit(cache=True)
def _xi_sum(alpha, beta, b, P, c):
    T, S = b.shape
    out = np.zeros((S, S))
    for t in range(T - 1):
        for i in range(S):
            ai = alpha[t, i] / c[t + 1]
            for j in range(S):
                out[i, j] += ai * P[i, j] * b[t + 1, j] * beta[t + 1, j]
    return out


def _scaled_emissions(logb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = logb.max(axis=1)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    return np.exp(logb - shift[:, None]), shift


def forward_backward(logb: np.ndarray, P: np.ndarray, pi0: np.ndarray):
    """Scaled forward-backward. Returns (gamma, xi_sum, loglik)."""
    b, shift = _scaled_emissions(logb)
    P = np.ascontiguousarray(P, dtype=float)
    alpha, c = _forward(b, P, np.asarray(pi0, dtype=float))
    if np.any(c <= 0):
        return None, None, -np.inf
    beta = _backward(b, P, c)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = _xi_sum(alpha, beta, b, P, c)
    loglik = float(np.log(c).sum() + shift.sum())
    return gamma, xi, loglik


def log_likelihood(model: HmmModel, obs) -> float:
    obs = np.asarray(obs)
    logb = model.emission.log_pmf(obs)
    b, shift = _scaled_emissions(logb)
    _, c = _forward(b, np.ascontiguousarray(model.P), np.asarray(model.pi0, dtype=float))
    if np.any(c <= 0):
        return -np.inf
    return float(np.log(c).sum() + shift.sum())


def _sort_states(P, pi0, em_param, kind):
    """Relabel states so the first has the highest mean count."""
    if kind == "poisson":
        order = np.argsort(-em_param, kind="stable")
    else:
        means = em_param @ np.arange(em_param.shape[1])
        order = np.argsort(means, kind="stable")  # symbol 0 is the highest bin
    return P[np.ix_(order, order)], pi0[order], em_param[order]


def _renorm(a, axis=-1):
    a = np.maximum(a, 0.0)
    s = a.sum(axis=axis, keepdims=True)
    return np.where(s > 0, a / np.where(s > 0, s, 1.0), 1.0 / a.shape[axis])


def _initial_params(y, S, kind, n_symbols, rng, restart):
    P = np.full((S, S), 0.1 / (S - 1)) if S > 1 else np.ones((1, 1))
    if S > 1:
        np.fill_diagonal(P, 0.9)
    pi0 = np.full(S, 1.0 / S)
    if kind == "poisson":
        if restart == 0:
            ys = np.sort(y)[::-1]
            g = np.array([chunk.mean() for chunk in np.array_split(ys, S)], dtype=float)
        elif restart == 1:
            # k-means copes with states of very unequal occupancy
            centroids, _ = kmeans2(y.astype(float)[:, None], S, minit="++", seed=rng)
            g = np.sort(centroids[:, 0])[::-1]
        else:
            g = np.quantile(y, np.sort(rng.uniform(0.01, 0.99, S)))[::-1].astype(float)
            P = 0.5 * P + 0.5 * rng.dirichlet(np.ones(S), S)
        g = np.maximum(g, MIN_RATE) + 1e-3 * np.arange(S)[::-1]
        return P, pi0, g
    freq = np.bincount(y, minlength=n_symbols) + 1.0
    ys = np.sort(y)
    B = np.empty((S, n_symbols))
    for k, chunk in enumerate(np.array_split(ys, S)):
        B[k] = np.bincount(chunk, minlength=n_symbols) + 0.5 * freq / freq.sum() * len(chunk)
    if restart > 0:
        B = B * rng.uniform(0.5, 1.5, B.shape)
        P = 0.5 * P + 0.5 * rng.dirichlet(np.ones(S), S)
    return P, pi0, _renorm(B)


def _log_emissions(y, param, kind):
    if kind == "poisson":
        yf = y.astype(float)[:, None]
        return yf * np.log(param) - param - gammaln(yf + 1.0)
    with np.errstate(divide="ignore"):
        return np.log(param.T[y])


def _run_em(y, S, kind, n_symbols, P, pi0, param, tol, max_iters):
    trace = []
    converged = False
    for it in range(max_iters):
        gamma, xi, ll = forward_backward(_log_emissions(y, param, kind), P, pi0)
        if gamma is None:
            break
        trace.append(ll)
        if len(trace) > 1:
            gain = trace[-1] - trace[-2]
            if gain < -1e-8 * max(1.0, abs(trace[-2])):
                logger.warning("EM log-likelihood decreased by %.3g", -gain)
            if abs(gain) < tol * abs(trace[-2]):
                converged = True
                break
        pi0 = _renorm(gamma[0])
        P = _renorm(xi) if S > 1 else np.ones((1, 1))
        w = gamma.sum(axis=0)
        if kind == "poisson":
            param = np.maximum((gamma * y[:, None]).sum(axis=0) / np.maximum(w, MIN_PROB), MIN_RATE)
        else:
            onehot = np.zeros((len(y), n_symbols))
            onehot[np.arange(len(y)), y] = 1.0
            param = _renorm(gamma.T @ onehot)
    if trace:
        # parameters were updated after the last evaluated likelihood unless we converged
        final_ll = trace[-1] if converged else _final_ll(y, param, kind, P, pi0)
        if not converged and final_ll >= trace[-1] - 1e-8 * max(1.0, abs(trace[-1])):
            trace.append(final_ll)
    return P, pi0, param, trace, converged


def _final_ll(y, param, kind, P, pi0):
    _, _, ll = forward_backward(_log_emissions(y, param, kind), P, pi0)
    return ll


def _build(P, pi0, param, kind) -> HmmModel:
    P = _renorm(P)
    pi0 = _renorm(pi0)
    emission = PoissonEmission(param) if kind == "poisson" else CategoricalEmission(_renorm(param))
    return HmmModel(P, pi0, emission)


def fit_em(
    series,
    S: int,
    seed=0,
    tol: float = 1e-7,
    max_iters: int = 500,
    restarts: int = 5,
    kind: str = "poisson",
    n_symbols: Optional[int] = None,
) -> FitResult:
    """Maximum-likelihood HMM by Baum-Welch, best of ``restarts`` starts.

    States are returned sorted so state 0 has the largest mean count (for
    categorical data, the most mass on low symbol indices).
    """
    y = series.counts if isinstance(series, CountSeries) else np.asarray(series, dtype=np.int64)
    T = len(y)
    if S < 1:
        raise ValueError("need at least one state")
    if T <= S:
        raise ValueError("series must be longer than the number of states")
    if kind == "categorical":
        n_symbols = int(n_symbols or y.max() + 1)
        if y.min() < 0 or y.max() >= n_symbols:
            raise ValueError("symbols out of range")
    elif kind != "poisson":
        raise ValueError("kind must be 'poisson' or 'categorical'")
    k = n_free_params(S, kind, n_symbols or 0)

    if kind == "poisson" and S == 1:
        g = np.array([max(y.mean(), MIN_RATE)])
        ll = float(poisson.logpmf(y, g[0]).sum())
        model = HmmModel(np.ones((1, 1)), np.ones(1), PoissonEmission(g))
        return FitResult(model, ll, -2 * ll + 2 * k, -2 * ll + k * float(np.log(T)), k, 0, True, False, [ll])

    if S > 1 and np.all(y == y[0]):
        P, pi0, param = _initial_params(y, S, kind, n_symbols, None, 0)
        if kind == "poisson":
            param = np.full(S, max(float(y[0]), MIN_RATE))
        model = _build(P, pi0, param, kind)
        ll = log_likelihood(model, y)
        return FitResult(model, ll, -2 * ll + 2 * k, -2 * ll + k * float(np.log(T)), k, 0, False, True, [ll])

    rng = np.random.default_rng(seed)
    best = None
    for restart in range(max(1, restarts)):
        P, pi0, param = _initial_params(y, S, kind, n_symbols, rng, restart)
        P, pi0, param, trace, converged = _run_em(y, S, kind, n_symbols, P, pi0, param, tol, max_iters)
        if not trace:
            continue
        if best is None or trace[-1] > best[3][-1]:
            best = (P, pi0, param, trace, converged)
    if best is None:
        raise RuntimeError("every EM restart degenerated")
    P, pi0, param, trace, converged = best
    P, pi0, param = _sort_states(P, pi0, param, kind)
    model = _build(P, pi0, param, kind)
    ll = trace[-1]
    distinct = len(np.unique(np.round(param, 6), axis=0)) if param.ndim > 1 else len(np.unique(np.round(param, 6)))
    return FitResult(model, ll, -2 * ll + 2 * k, -2 * ll + k * float(np.log(T)), k, len(trace), converged, distinct < S, trace)


@dataclass
class Selection:
    best: FitResult
    fits: dict  # S -> FitResult

    def score_rows(self) -> list[tuple]:
        return [(S, f.loglik, f.aic, f.bic) for S, f in sorted(self.fits.items())]

    def scores_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["S", "loglik", "AIC", "BIC"])
            for S, ll, aic, bic in self.score_rows():
                w.writerow([S, repr(float(ll)), repr(float(aic)), repr(float(bic))])


def select_model(series, S_range: Iterable[int], seed=0, restarts: int = 5, **kw) -> Selection:
    """Fit every order in ``S_range`` and keep the BIC minimizer."""
    S_values = sorted(set(int(s) for s in S_range))
    if not S_values:
        raise ValueError("S_range is empty")
    fits = {S: fit_em(series, S, seed=seed, restarts=restarts, **kw) for S in S_values}
    best_S = min(S_values, key=lambda S: (fits[S].bic, S))
    return Selection(fits[best_S], fits)


@dataclass
class PseudoResiduals:
    z: np.ndarray  # normal-quantile pseudo-residuals
    u: np.ndarray  # mid-point uniform pseudo-residuals
    outliers: np.ndarray  # predictive probability of the observed value was zero

    def qq_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(theoretical, sample) standard-normal quantile pairs."""
        zs = np.sort(self.z[~self.outliers])
        n = len(zs)
        theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
        return theo, zs

    def to_csv(self, path) -> None:
        theo, zs = self.qq_pairs()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theoretical_quantile", "sample_quantile"])
            for a, b in zip(theo, zs):
                w.writerow([repr(float(a)), repr(float(b))])


def _predictive_cdfs(model: HmmModel, y: np.ndarray):
    """Per-state CDF at y and y - 1 for the observed sequence."""
    if model.is_poisson:
        g = model.emission.g
        hi = poisson.cdf(y[:, None], g)
        lo = poisson.cdf(y[:, None] - 1, g)
    else:
        cum = np.cumsum(model.emission.B, axis=1)
        hi = cum[:, y].T
        lo = np.where(y[:, None] > 0, cum[:, np.maximum(y - 1, 0)].T, 0.0)
    return lo, hi


def pseudo_residuals(model: HmmModel, series, randomized: bool = False, rng=None) -> PseudoResiduals:
    """One-step-ahead PIT residuals mapped to normal quantiles.

    By default each residual uses the mid-point of ``[F(y - 1), F(y)]``.
    The mid-point is not exactly uniform for discrete laws, so goodness-of-fit
    tests should use ``randomized=True``, which draws the point uniformly on
    that interval and is exactly uniform under the true model.
    """
    y = series.counts if isinstance(series, CountSeries) else np.asarray(series, dtype=np.int64)
    T = len(y)
    logb = model.emission.log_pmf(y)
    b, _ = _scaled_emissions(logb)
    lo, hi = _predictive_cdfs(model, y)
    u = np.empty(T)
    outlier = np.zeros(T, dtype=bool)
    draws = np.random.default_rng(rng).random(T) if randomized else None
    filt = model.pi0
    pred = model.pi0
    for t in range(T):
        pred = model.pi0 if t == 0 else filt @ model.P
        f_lo = float(pred @ lo[t])
        f_hi = float(pred @ hi[t])
        u[t] = f_lo + (f_hi - f_lo) * (draws[t] if randomized else 0.5)
        if f_hi - f_lo <= 0.0:
            outlier[t] = True
        post = pred * b[t]
        s = post.sum()
        filt = post / s if s > 0 else pred
    u = np.clip(u, 1e-16, 1 - 1e-16)
    return PseudoResiduals(norm.ppf(u), u, outlier)


def quantize(series, levels: int = 3) -> np.ndarray:
    """Empirical-quantile binning; the highest counts map to symbol 0."""
    if levels < 2:
        raise ValueError("need at least two levels")
    y = series.counts if isinstance(series, CountSeries) else np.asarray(series, dtype=float)
    n = len(y)
    if np.all(y == y[0]):
        warnings.warn("constant series: every sample falls in the top bin", RuntimeWarning, stacklevel=2)
        return np.zeros(n, dtype=np.int64)
    ranks = rankdata(y, method="average") - 1.0
    bins = np.minimum((ranks * levels / n).astype(np.int64), levels - 1)
    return (levels - 1 - bins).astype(np.int64)


def simulate_series(model: HmmModel, T: int, seed=0, interval_minutes: int = 5) -> CountSeries:
    """Viewer-count series drawn from ``model`` with uniform timestamps."""
    _, obs = sample_paths(model, T, 1, np.random.default_rng(seed))
    stamps = np.arange(T) * interval_minutes * 60
    return CountSeries(obs[0], stamps)


def write_series_csv(series: CountSeries, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if series.timestamps is not None:
            w.writerow(["timestamp", "viewers"])
            for ts, y in zip(series.timestamps, series.counts):
                w.writerow([ts, int(y)])
        else:
            w.writerow(["viewers"])
            for y in series.counts:
                w.writerow([int(y)])
