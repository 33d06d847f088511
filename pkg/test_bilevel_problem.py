#!/usr/bin/env python3
"""
Tests for bilevel problem data, the lower-level multiplier polytope,
constraint qualifications and KKT tracking.
"""

import numpy as np
import pytest

from bilevel_problem import BilevelProblem, LowerLevelAnalyzer, cq_report, kkt_track, multiplier_polytope
from errors import DimensionMismatchError, InfeasibleReferenceError


def test_dimensions(kink_problem):
    bp = kink_problem
    assert (bp.n, bp.m, bp.N) == (1, 1, 2)
    assert (bp.p, bp.q, bp.r, bp.s) == (0, 1, 0, 2)
    assert bp.to_dict()['dims'] == {'n': 1, 'm': 1, 'p': 0, 'q': 1, 'r': 0, 's': 2}


def test_kkt_map_vanishes_at_reference(qp_problem):
    assert qp_problem.kkt_residual([1.0], [0.0], np.zeros(0), [2.0]) == pytest.approx(0.0, abs=1e-12)
    assert qp_problem.kkt_residual([1.0], [0.0], np.zeros(0), [1.0]) == pytest.approx(1.0)


def test_infeasible_lower_reference_is_rejected(qp_problem):
    with pytest.raises(InfeasibleReferenceError):
        BilevelProblem(qp_problem.F, qp_problem.f, [1.0], [0.5], G=qp_problem.G, g=qp_problem.g)


def test_wrong_multiplier_size_is_rejected(qp_problem):
    with pytest.raises(DimensionMismatchError):
        BilevelProblem(qp_problem.F, qp_problem.f, [1.0], [0.0], G=qp_problem.G, g=qp_problem.g,
                       xi_star=[1.0, 2.0])


def test_reference_multiplier_is_estimated(kink_problem):
    point = LowerLevelAnalyzer(kink_problem).reference_kkt()
    assert point.residual <= 1e-8
    assert point.xi.sum() == pytest.approx(2.0)
    assert np.all(point.xi >= -1e-9)


def test_kink_bilevel_multiplier_vertices(kink_problem):
    polytope = multiplier_polytope(kink_problem)
    assert polytope.pointed
    assert len(polytope.vertices) == 2
    assert [xi.tolist() for _, xi in polytope.vertices] == [pytest.approx([0.0, 2.0]), pytest.approx([2.0, 0.0])]
    assert all(mu.size == 0 for mu, _ in polytope.vertices)
    assert polytope.contains(np.zeros(0), [1.0, 1.0])
    assert not polytope.contains(np.zeros(0), [3.0, -1.0])


def test_kink_bilevel_constraint_qualifications(kink_problem):
    report = cq_report(kink_problem)
    assert report.active == (0, 1)
    assert report.mfcq_holds
    assert not report.licq_holds
    assert report.licq_rank == 1
    assert report.crcq_consistent
    assert report.ssosc_holds
    assert report.strongly_active == (0, 1)
    assert report.numeric_route
    assert not report.exact_route
    assert report.to_dict()['licq'] == {'holds': False, 'rank': 1}


def test_qp_fixture_exact_route(qp_problem):
    report = cq_report(qp_problem)
    assert report.exact_route
    assert not report.numeric_route
    assert report.licq_rank == 1
    # the strongly active gradient spans R^1, so the SSOSC subspace is trivial
    assert report.ssosc_margin == float('inf')


@pytest.mark.parametrize("x,y,xi", [(0.5, 0.5, [3.0, 0.0]), (-0.5, 0.5, [0.0, 3.0])])
def test_kink_bilevel_tracking(kink_problem, x, y, xi):
    point = kkt_track(kink_problem, [x])
    assert point.y == pytest.approx([y], abs=1e-8)
    assert point.xi == pytest.approx(xi, abs=1e-7)
    assert point.residual <= 1e-10


def test_degenerate_tracking_follows_min(degenerate_problem):
    analyzer = LowerLevelAnalyzer(degenerate_problem)
    assert analyzer.kkt_track([0.3]).y == pytest.approx([0.0], abs=1e-9)
    assert analyzer.kkt_track([-0.3]).y == pytest.approx([-0.3], abs=1e-9)


def test_tracking_outside_trust_radius(kink_problem):
    with pytest.raises(ValueError):
        kkt_track(kink_problem, [2.0])
    with pytest.raises(DimensionMismatchError):
        kkt_track(kink_problem, [0.1, 0.1])
