"""Uniform grid on the probability simplex with Freudenthal interpolation.

Grid points are beliefs ``k / M`` for every composition ``k`` of ``M`` into
``S`` nonnegative integer parts. Off-grid beliefs are interpolated linearly
inside the Freudenthal (Kuhn) simplex that contains them, which is exact at
grid points and continuous everywhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
import scipy.sparse as sp


def compositions(M: int, S: int) -> np.ndarray:
    """All compositions of M into S nonnegative parts, lexicographically descending."""
    if S == 1:
        return np.array([[M]], dtype=np.int64)
    rows = []
    for first in range(M, -1, -1):
        tail = compositions(M - first, S - 1)
        rows.append(np.column_stack([np.full(len(tail), first, dtype=np.int64), tail]))
    return np.vstack(rows)


@dataclass(frozen=True)
class BeliefGrid:
    M: int
    S: int
    counts: np.ndarray = field(init=False, repr=False)
    _lookup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.M < 1 or self.S < 1:
            raise ValueError("grid resolution and state count must be positive")
        counts = compositions(self.M, self.S)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        # dense index over the cumulative tail sums c_j = sum_{i>=j} k_i, j = 1..S-1
        shape = (self.M + 1,) * (self.S - 1)
        lookup = np.full(shape, -1, dtype=np.int64)
        if self.S > 1:
            tails = self._tails(counts)
            lookup[tuple(tails.T)] = np.arange(len(counts))
        object.__setattr__(self, "_lookup", lookup)

    @staticmethod
    def _tails(counts: np.ndarray) -> np.ndarray:
        return np.cumsum(counts[:, ::-1], axis=1)[:, ::-1][:, 1:]

    @property
    def points(self) -> np.ndarray:
        return self.counts / self.M

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def expected_size(self) -> int:
        return comb(self.M + self.S - 1, self.S - 1)

    def index_of(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=np.int64)
        if self.S == 1:
            return np.zeros(counts.shape[:-1], dtype=np.int64)
        tails = np.cumsum(counts[..., ::-1], axis=-1)[..., ::-1][..., 1:]
        return self._lookup[tuple(np.moveaxis(tails, -1, 0))]

    def vertex_index(self, state: int) -> int:
        k = np.zeros(self.S, dtype=np.int64)
        k[state] = self.M
        return int(self.index_of(k))

    def barycentric(self, beliefs) -> tuple[np.ndarray, np.ndarray]:
        """Containing-simplex vertices and weights for each belief.

        Returns ``(idx, w)`` with shape ``beliefs.shape[:-1] + (S,)``; the
        interpolant of a grid function ``f`` is ``(f[idx] * w).sum(-1)``.
        """
        b = np.asarray(beliefs, dtype=float)
        lead = b.shape[:-1]
        b = np.clip(b.reshape(-1, self.S), 0.0, None)
        n = b.shape[0]
        S, M = self.S, self.M
        if S == 1:
            return np.zeros(lead + (1,), dtype=np.int64), np.ones(lead + (1,))
        # x_j = M * sum_{i>=j} b_i, j = 1..S-1, lies in M >= x_1 >= ... >= x_{S-1} >= 0
        x = M * np.cumsum(b[:, ::-1], axis=1)[:, ::-1][:, 1:]
        x = np.clip(x, 0.0, float(M))
        base = np.floor(x)
        base = np.minimum(base, M - 1)
        d = x - base
        # fractional parts inherit the ordering of x within each unit cube when
        # base coordinates tie; sort descending to walk the Kuhn simplex
        order = np.argsort(-d, axis=1, kind="stable")
        d_sorted = np.take_along_axis(d, order, axis=1)
        weights = np.empty((n, S))
        weights[:, 0] = 1.0 - d_sorted[:, 0]
        weights[:, 1:-1] = d_sorted[:, :-1] - d_sorted[:, 1:]
        weights[:, -1] = d_sorted[:, -1]
        verts = np.empty((n, S, S - 1), dtype=np.int64)
        cur = base.astype(np.int64)
        verts[:, 0] = cur
        rows = np.arange(n)
        for k in range(S - 1):
            cur = cur.copy()
            cur[rows, order[:, k]] += 1
            verts[:, k + 1] = cur
        # zero-weight vertices may leave the ordered region; replace them by the
        # base vertex so every lookup stays valid
        valid = np.all(np.diff(verts, axis=2) <= 0, axis=2) & (verts[:, :, 0] <= M)
        if np.any(~valid & (weights > 1e-12)):
            raise ValueError("belief outside the simplex")
        verts = np.where(valid[..., None], verts, verts[:, :1])
        weights = np.where(valid, weights, 0.0)
        idx = self._lookup[tuple(np.moveaxis(verts, -1, 0))]
        return idx.reshape(lead + (S,)), weights.reshape(lead + (S,))

    def interpolate(self, values: np.ndarray, beliefs) -> np.ndarray:
        """Interpolate grid values (shape (n,) or (n, k)) at arbitrary beliefs."""
        idx, w = self.barycentric(beliefs)
        values = np.asarray(values)
        if values.ndim == 1:
            return (values[idx] * w).sum(axis=-1)
        return np.einsum("...s,...sk->...k", w, values[idx])

    def interpolation_matrix(self, beliefs) -> sp.csr_matrix:
        """Sparse (m, n) matrix mapping grid values to values at ``m`` beliefs."""
        idx, w = self.barycentric(np.asarray(beliefs).reshape(-1, self.S))
        m = idx.shape[0]
        rows = np.repeat(np.arange(m), self.S)
        return sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(m, len(self)))
