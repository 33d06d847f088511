#!/usr/bin/env python3
"""
Tests for the piecewise sensitivity of the lower-level solution mapping.
"""

import numpy as np
import pytest

from bilevel_problem import LowerLevelAnalyzer
from errors import SensitivityRefusedError
from sensitivity import SensitivityAnalyzer, enumerate_W, solution_map_dd1, solution_map_dd2
from verification_config import VerificationSettings


def test_strict_complementarity_gives_one_piece(qp_problem):
    matrices = enumerate_W(qp_problem)
    assert len(matrices) == 1
    assert matrices[0].tolist() == [0.0]
    piece = SensitivityAnalyzer(qp_problem).assemble(matrices[0])
    assert piece.H[:, 0] == pytest.approx([0.0, -2.0])
    assert piece.branch_rows.shape == (0, 1)
    assert piece.A @ piece.H == pytest.approx(piece.rhs)


def test_qp_first_order_jet(qp_problem):
    for d in (1.0, -1.0, 0.25):
        jet = solution_map_dd1(qp_problem, None, [d])
        assert jet.y1 == pytest.approx([0.0], abs=1e-12)
        assert jet.xi1 == pytest.approx([2.0 * d])
        assert not jet.numeric


def test_degenerate_index_gives_two_pieces(degenerate_problem):
    analyzer = SensitivityAnalyzer(degenerate_problem)
    assert [W.tolist() for W in analyzer.enumerate_W()] == [[0.0], [1.0]]
    inactive, active = analyzer.pieces()
    assert inactive.degenerate == (0,)
    assert inactive.H[:, 0] == pytest.approx([0.0, -2.0])
    assert inactive.branch_rows[:, 0] == pytest.approx([-2.0])
    assert active.H[:, 0] == pytest.approx([-1.0, 0.0])
    assert active.branch_rows[:, 0] == pytest.approx([1.0])


@pytest.mark.parametrize("d", [1.0, -1.0, 0.5, -2.0])
def test_degenerate_jet_is_min(degenerate_problem, d):
    jet = solution_map_dd1(degenerate_problem, None, [d])
    assert jet.y1 == pytest.approx([min(d, 0.0)], abs=1e-12)
    assert jet.piece_trace['first_order'] == ([[0]] if d > 0 else [[1]])


def test_degenerate_zero_direction_is_accepted_by_both_pieces(degenerate_problem):
    jet = SensitivityAnalyzer(degenerate_problem).dd1([0.0])
    assert jet.y1 == pytest.approx([0.0])
    assert jet.piece_trace['first_order'] == [[0], [1]]


def test_degenerate_second_order_jet(degenerate_problem):
    up = solution_map_dd2(degenerate_problem, None, [1.0], [3.0])
    assert up.y2 == pytest.approx([0.0], abs=1e-12)
    down = solution_map_dd2(degenerate_problem, None, [-1.0], [3.0])
    assert down.y2 == pytest.approx([3.0])
    assert down.piece_trace['second_order'] == [[1]]


def test_jet_serializes(degenerate_problem):
    data = solution_map_dd2(degenerate_problem, None, [-1.0], [0.5]).to_dict()
    assert data['y1'] == pytest.approx([-1.0])
    assert data['y2'] == pytest.approx([0.5])
    assert data['numeric'] is False


def test_exact_assembly_refused_without_licq(kink_problem):
    analyzer = SensitivityAnalyzer(kink_problem)
    assert not analyzer.exact
    assert analyzer.numeric_available
    with pytest.raises(SensitivityRefusedError):
        analyzer.assemble([0.0, 0.0])
    with pytest.raises(SensitivityRefusedError):
        analyzer.second_order_systems([1.0])


@pytest.mark.parametrize("d", [1.0, -1.0])
def test_numeric_jet_tracks_kink(kink_problem, d):
    jet = SensitivityAnalyzer(kink_problem).solution_jet([d], [0.0])
    assert jet.numeric
    assert jet.y1 == pytest.approx([-abs(d)], abs=1e-6)
    assert jet.y2 == pytest.approx([0.0], abs=1e-5)


def test_numeric_second_order_piece(kink_problem):
    piece = SensitivityAnalyzer(kink_problem).numeric_second_order_piece([1.0])
    assert piece.offset[0] == pytest.approx(0.0, abs=1e-5)
    assert piece.slope[0] == pytest.approx([-1.0], abs=1e-5)


def test_numeric_route_needs_finite_differences(kink_problem):
    analyzer = SensitivityAnalyzer(kink_problem, VerificationSettings(allow_finite_differences=False))
    assert not analyzer.numeric_available
    with pytest.raises(SensitivityRefusedError):
        analyzer.solution_jet([1.0])


def extrapolated_slopes(bp, d_x, exponents=range(6, 15)):
    """Richardson-extrapolated difference quotients of tracked (y, xi) along d_x."""
    analyzer = LowerLevelAnalyzer(bp)
    base = analyzer.kkt_track(bp.x_star)
    quotients = []
    for k in exponents:
        t = 2.0 ** -k
        point = analyzer.kkt_track(bp.x_star + t * np.asarray(d_x, dtype=float))
        quotients.append(np.concatenate([point.y - base.y, point.xi - base.xi]) / t)
    extrapolated = [2.0 * fine - coarse for coarse, fine in zip(quotients, quotients[1:])]
    return extrapolated[-1], base


@pytest.mark.parametrize("fixture_name", ['qp_problem', 'degenerate_problem'])
@pytest.mark.parametrize("d", [1.0, -1.0, 0.5, -0.3])
def test_tracked_quotients_match_exact_derivative(request, fixture_name, d):
    bp = request.getfixturevalue(fixture_name)
    slope, _ = extrapolated_slopes(bp, [d])
    jet = solution_map_dd1(bp, None, [d])
    assert not jet.numeric
    assert slope[:bp.m] == pytest.approx(jet.y1, abs=1e-5)
    assert slope[bp.m:] == pytest.approx(jet.xi1, abs=1e-5)


@pytest.mark.parametrize("d", [1.0, -1.0, 0.5])
def test_tracked_quotients_match_numeric_route(kink_problem, d):
    slope, _ = extrapolated_slopes(kink_problem, [d])
    jet = SensitivityAnalyzer(kink_problem).solution_jet([d])
    assert jet.numeric
    # multipliers at x* are not unique, only y is compared
    assert slope[:kink_problem.m] == pytest.approx(jet.y1, abs=1e-5)
    assert jet.y1 == pytest.approx([-abs(d)], abs=1e-5)
