#!/usr/bin/env python3
"""
Tests for polyhedral sets, tangent cones and second-order tangent sets,
including the definitional parabolic oracle on seeded random polyhedra.
"""

import numpy as np
import pytest

from cones import PolyhedralSet, outer_regularity_probe, parabolic_residuals, passes_parabolic_oracle
from errors import DimensionMismatchError, NotInSetError


def unit(v):
    return v / np.linalg.norm(v)


def random_oracle_triple(seed):
    """Polyhedron K, point y in K, tangent direction d and w in T2_K(y; d) with clear margins."""
    rng = np.random.default_rng(seed)
    n = 3
    d = unit(rng.standard_normal(n))
    w = unit(rng.standard_normal(n))
    y = rng.uniform(-1.0, 1.0, n)

    tight = []
    for _ in range(2):
        a = rng.standard_normal(n)
        a -= (a @ d) * d
        if a @ w > 0:
            a = -a
        tight.append(a)
    slack = rng.standard_normal(n)
    slack -= (slack @ d) * d + rng.uniform(0.5, 1.0) * d
    inactive = [rng.standard_normal(n) for _ in range(2)]

    A = np.vstack(tight + [slack] + inactive)
    b = A @ y
    b[3:] += rng.uniform(0.5, 1.0, 2)

    C = e = None
    if seed % 2:
        c = rng.standard_normal(n)
        q, _ = np.linalg.qr(np.column_stack([d, w]))
        c -= q @ (q.T @ c)
        C = c[None, :]
        e = C @ y
    K = PolyhedralSet.h_form(A, b, C, e, dim=n)
    return K, y, d, w, np.array(tight)


def test_product_membership_and_projection():
    K = PolyhedralSet.product(['R-', '0', 'R'])
    assert K.contains([-1.0, 0.0, 5.0]).member
    certificate = K.contains([2.0, 3.0, 4.0])
    assert not certificate.member
    assert certificate.violation == pytest.approx(3.0)
    assert certificate.nearest_point == pytest.approx([0.0, 0.0, 4.0])
    assert K.distance([2.0, 3.0, 4.0]) == pytest.approx(np.sqrt(13.0))


def test_product_tangent_cone_frees_inactive_factors():
    K = PolyhedralSet.product(['R-', 'R-', '0'])
    T = K.tangent_cone([-1.0, 0.0, 0.0])
    assert T.to_dict() == {'form': 'product', 'factors': ['R', 'R-', '0']}
    T2 = K.second_order_tangent([-1.0, 0.0, 0.0], [3.0, -1.0, 0.0])
    assert T2.to_dict() == {'form': 'product', 'factors': ['R', 'R', '0']}


def test_h_form_tangent_and_second_order_tangent():
    K = PolyhedralSet.h_form(A=[[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], b=[1.0, 0.0, 0.0])
    y = [1.0, 0.0]
    T = K.tangent_cone(y)
    assert T.contains([-1.0, 0.5]).member
    assert not T.contains([1.0, 0.0]).member
    T2 = K.second_order_tangent(y, [-1.0, 0.0])
    assert T2.contains([5.0, 0.0]).member
    assert T2.contains([-5.0, 2.0]).member
    assert not T2.contains([0.0, -1.0]).member


def test_tangent_cone_rejects_points_outside():
    K = PolyhedralSet.product(['R-'])
    with pytest.raises(NotInSetError):
        K.tangent_cone([1.0])
    with pytest.raises(NotInSetError):
        K.second_order_tangent([0.0], [1.0])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        PolyhedralSet.product(['R-']).contains([0.0, 0.0])


def test_h_form_projection():
    K = PolyhedralSet.h_form(A=[[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], b=[1.0, 0.0, 0.0])
    assert K.project([1.0, 1.0]) == pytest.approx([0.5, 0.5])
    assert K.project([-1.0, -1.0]) == pytest.approx([0.0, 0.0])
    assert K.project([2.0, -1.0]) == pytest.approx([1.0, 0.0])


def test_empty_h_form_is_rejected():
    with pytest.raises(ValueError):
        PolyhedralSet.h_form(A=[[1.0], [-1.0]], b=[-1.0, -1.0])


def test_same_set_across_forms():
    product = PolyhedralSet.product(['R-', '0'])
    h = PolyhedralSet.h_form(A=[[1.0, 0.0]], b=[0.0], C=[[0.0, 1.0]], e=[0.0])
    assert product.same_set(h)
    assert not product.same_set(PolyhedralSet.product(['R-', 'R-']))


def test_dict_round_trip():
    K = PolyhedralSet.h_form(A=[[1.0, 1.0]], b=[1.0], dim=2)
    again = PolyhedralSet.from_dict(K.to_dict())
    assert again.A == pytest.approx(K.A)
    assert again.b == pytest.approx(K.b)
    with pytest.raises(ValueError):
        PolyhedralSet.from_dict({'form': 'v'})


def test_parabolic_oracle_on_half_line():
    K = PolyhedralSet.product(['R-'])
    assert passes_parabolic_oracle(K, [0.0], [0.0], [-1.0])
    assert not passes_parabolic_oracle(K, [0.0], [0.0], [1.0])
    assert parabolic_residuals(K, [0.0], [0.0], [1.0])[-1] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(50))
def test_second_order_tangent_matches_parabolic_oracle(seed):
    K, y, d, w, _ = random_oracle_triple(seed)
    T2 = K.second_order_tangent(y, d)
    assert T2.contains(w).member
    assert passes_parabolic_oracle(K, y, d, w)
    for generator in T2.sample_generators():
        assert passes_parabolic_oracle(K, y, d, generator)


@pytest.mark.parametrize("seed", range(20))
def test_non_members_fail_parabolic_oracle(seed):
    K, y, d, w, tight = random_oracle_triple(seed)
    a = tight[seed % 2]
    w_bad = w + (1.0 - a @ w) * a / (a @ a)
    assert not K.second_order_tangent(y, d).contains(w_bad).member
    assert not passes_parabolic_oracle(K, y, d, w_bad)


def test_outer_regularity_of_polyhedra():
    simplex = PolyhedralSet.h_form(A=[[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], b=[1.0, 0.0, 0.0])
    assert outer_regularity_probe(simplex, [1.0, 0.0], [-1.0, 0.0], seed=2).regular
    orthant = PolyhedralSet.product(['R-', 'R-'])
    report = outer_regularity_probe(orthant, [0.0, 0.0], [-1.0, 0.0], seed=3)
    assert report.regular
    assert len(report.distances) == len(report.t_grid)
