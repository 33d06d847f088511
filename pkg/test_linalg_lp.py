#!/usr/bin/env python3
"""
Tests for the linear algebra and LP primitives.
"""

import numpy as np
import pytest
from scipy.optimize import linprog

from errors import ScaleExceededError, SingularMatrixError
from linalg_lp import (Definiteness, LinearProgram, LPStatus, lp_solve, null_space_basis, pd_on_subspace, rank,
                       solve_linear, vertex_enumerate)


def test_solve_linear_sensitivity_block():
    z = solve_linear([[2, 1], [1, 0]], [-2, 0])
    assert z == pytest.approx([0.0, -2.0], abs=1e-12)


def test_solve_linear_matrix_rhs():
    A = np.array([[4.0, 1.0], [2.0, 3.0]])
    assert solve_linear(A, np.eye(2)) == pytest.approx(np.linalg.inv(A), abs=1e-12)


def test_solve_linear_singular():
    with pytest.raises(SingularMatrixError):
        solve_linear([[1, 2], [2, 4]], [1, 2])


def test_rank_and_null_space():
    A = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    assert rank(A) == 1
    N = null_space_basis(A)
    assert N.shape == (3, 2)
    assert np.abs(A @ N).max() < 1e-12
    assert N.T @ N == pytest.approx(np.eye(2), abs=1e-12)


def test_null_space_of_empty_system_is_everything():
    assert null_space_basis(None, cols=3) == pytest.approx(np.eye(3))


def test_pd_on_full_space():
    result = pd_on_subspace([[2.0]], np.eye(1))
    assert result.status == Definiteness.POSITIVE
    assert result.margin == pytest.approx(2.0)


def test_pd_depends_on_subspace():
    Q = np.diag([1.0, -1.0])
    assert pd_on_subspace(Q, np.eye(2)).status == Definiteness.NOT_POSITIVE
    assert pd_on_subspace(Q, np.array([[1.0], [0.0]])).status == Definiteness.POSITIVE
    assert pd_on_subspace(Q, np.zeros((2, 0))).margin == float('inf')


def test_pd_degenerate():
    assert pd_on_subspace(np.zeros((2, 2)), np.eye(2)).status == Definiteness.DEGENERATE


def test_lp_optimal_with_certificate():
    lp = LinearProgram(c=[-1, -1], A_in=[[1, 1], [-1, 0], [0, -1]], b_in=[1, 0, 0])
    result = lp_solve(lp)
    assert result.status == LPStatus.OPTIMAL
    assert result.optimum == pytest.approx(-1.0)
    assert result.duality_gap <= 1e-8
    assert lp.b_in @ result.certificate == pytest.approx(-1.0)


def test_lp_equality_constraints():
    lp = LinearProgram(c=[1, 2], A_eq=[[1, 1]], b_eq=[3], A_in=[[-1, 0], [0, -1]], b_in=[0, 0])
    result = lp_solve(lp)
    assert result.optimal
    assert result.solution == pytest.approx([3.0, 0.0])
    assert result.optimum == pytest.approx(3.0)


def test_lp_unbounded_returns_ray():
    result = lp_solve(LinearProgram(c=[-1], A_in=[[-1]], b_in=[0]))
    assert result.status == LPStatus.UNBOUNDED
    assert result.optimum == float('-inf')
    assert result.certificate[0] > 0


def test_lp_infeasible():
    result = lp_solve(LinearProgram(c=[1], A_in=[[1], [-1]], b_in=[-1, -1]))
    assert result.status == LPStatus.INFEASIBLE


def test_lp_unconstrained():
    assert lp_solve(LinearProgram(c=[0, 0])).optimum == 0.0
    assert lp_solve(LinearProgram(c=[1, 0])).status == LPStatus.UNBOUNDED


def test_lp_redundant_equalities():
    lp = LinearProgram(c=[1, 1], A_eq=[[1, 1], [2, 2]], b_eq=[1, 2], A_in=[[-1, 0], [0, -1]], b_in=[0, 0])
    result = lp_solve(lp)
    assert result.optimal
    assert result.optimum == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(50))
def test_lp_matches_reference_solver(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    m = int(rng.integers(1, 5))
    A = rng.standard_normal((m, n))
    z0 = rng.uniform(-0.5, 0.5, n)
    b = A @ z0 + rng.uniform(0.0, 1.0, m)
    box = np.vstack([np.eye(n), -np.eye(n)])
    A_in = np.vstack([A, box])
    b_in = np.concatenate([b, np.ones(2 * n)])
    c = rng.standard_normal(n)

    result = lp_solve(LinearProgram(c=c, A_in=A_in, b_in=b_in))
    reference = linprog(c, A_ub=A_in, b_ub=b_in, bounds=[(None, None)] * n, method='highs')
    assert result.status == LPStatus.OPTIMAL
    assert result.optimum == pytest.approx(reference.fun, abs=1e-7)
    assert result.duality_gap <= 1e-8 * (1.0 + abs(result.optimum)) * (1.0 + np.max(np.abs(b_in)))

    vertices = vertex_enumerate(A_in=A_in, b_in=b_in, bound=4096)
    assert min(float(c @ v) for v in vertices) == pytest.approx(result.optimum, abs=1e-7)


def test_vertex_enumerate_multiplier_simplex():
    vertices = vertex_enumerate(A_eq=[[1, 1]], b_eq=[2], A_in=-np.eye(2), b_in=np.zeros(2))
    assert len(vertices) == 2
    assert vertices[0] == pytest.approx([0.0, 2.0])
    assert vertices[1] == pytest.approx([2.0, 0.0])


def test_vertex_enumerate_empty():
    assert vertex_enumerate(A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0]) == []


def test_vertex_enumerate_bound():
    with pytest.raises(ScaleExceededError):
        vertex_enumerate(A_in=np.vstack([np.eye(3), -np.eye(3)]), b_in=np.ones(6), bound=4)
