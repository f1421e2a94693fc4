from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adsched.simplex_grid import BeliefGrid, compositions


@pytest.mark.parametrize("M,S", [(1, 1), (5, 2), (10, 3), (6, 4), (4, 5)])
def test_grid_size_and_points(M, S):
    grid = BeliefGrid(M, S)
    assert len(grid) == comb(M + S - 1, S - 1) == grid.expected_size
    np.testing.assert_allclose(grid.points.sum(axis=1), 1.0)
    assert len({tuple(r) for r in grid.counts}) == len(grid)


def test_compositions_order():
    np.testing.assert_array_equal(compositions(2, 2), [[2, 0], [1, 1], [0, 2]])


def test_index_lookup_roundtrip():
    grid = BeliefGrid(7, 4)
    np.testing.assert_array_equal(grid.index_of(grid.counts), np.arange(len(grid)))
    assert grid.points[grid.vertex_index(2)][2] == 1.0


def test_interpolation_exact_at_grid_points():
    grid = BeliefGrid(9, 3)
    f = np.random.default_rng(0).normal(size=len(grid))
    np.testing.assert_allclose(grid.interpolate(f, grid.points), f, atol=1e-12)


@pytest.mark.parametrize("S", [2, 3, 4])
def test_interpolation_reproduces_linear_functions(S):
    rng = np.random.default_rng(S)
    grid = BeliefGrid(8, S)
    c = rng.normal(size=S)
    beliefs = rng.dirichlet(np.ones(S), 500)
    got = grid.interpolate(grid.points @ c, beliefs)
    np.testing.assert_allclose(got, beliefs @ c, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_barycentric_weights_are_convex(S, M, seed):
    rng = np.random.default_rng(seed)
    grid = BeliefGrid(M, S)
    beliefs = rng.dirichlet(np.full(S, 0.3), 20)
    idx, w = grid.barycentric(beliefs)
    assert np.all(w >= -1e-12)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose((grid.points[idx] * w[..., None]).sum(axis=1), beliefs, atol=1e-12)


def test_interpolation_matrix_matches_interpolate():
    rng = np.random.default_rng(4)
    grid = BeliefGrid(6, 3)
    f = rng.normal(size=len(grid))
    beliefs = rng.dirichlet(np.ones(3), 40)
    A = grid.interpolation_matrix(beliefs)
    np.testing.assert_allclose(A @ f, grid.interpolate(f, beliefs), atol=1e-12)


def test_interpolation_is_continuous_across_cells():
    grid = BeliefGrid(5, 3)
    f = np.random.default_rng(2).normal(size=len(grid))
    a = np.array([0.4, 0.35, 0.25])
    for direction in np.eye(3) - 1 / 3:
        lo = grid.interpolate(f, a - 1e-9 * direction)
        hi = grid.interpolate(f, a + 1e-9 * direction)
        assert abs(lo - hi) < 1e-6
