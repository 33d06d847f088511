#!/usr/bin/env python3
"""
Tests for the first- and second-order checks on min f(x) s.t. G(x) in K.
"""

import numpy as np
import pytest

from conftest import build_fixture
from errors import DimensionMismatchError, InfeasibleReferenceError, NotInSetError
from nsopt_checker import (DirectionSampler, MscqVerdict, NonsmoothChecker, NonsmoothProgram, SecondOrderStatus,
                           dedupe, sphere_directions)


def test_sphere_directions_are_deterministic_units():
    first = sphere_directions(3, 20, seed=5)
    second = sphere_directions(3, 20, seed=5)
    assert len(first) == 26
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)


def test_dedupe_drops_repeats():
    kept = dedupe([np.array([1.0, 0.0]), np.array([1.0, 1e-12]), np.array([0.0, 1.0])], 1e-8)
    assert len(kept) == 2


def test_program_rejects_infeasible_reference(abs_program):
    with pytest.raises(InfeasibleReferenceError):
        NonsmoothProgram(abs_program.f, abs_program.G, abs_program.K, np.array([0.0, -1.0]))


def test_program_rejects_wrong_sizes(abs_program):
    with pytest.raises(DimensionMismatchError):
        NonsmoothProgram(abs_program.f, abs_program.G, abs_program.K, np.zeros(3))


def test_abs_fixture_first_order_holds(abs_program, settings):
    report = NonsmoothChecker(abs_program, settings).first_order_check()
    assert report.holds
    assert report.exact
    assert report.pieces_checked == 2
    assert report.witness is None


def test_abs_fixture_sampled_first_order_is_flagged(abs_program, settings):
    report = NonsmoothChecker(abs_program, settings).first_order_check(
        DirectionSampler(count=32, seed=2, enumerate_pieces=False))
    assert report.holds
    assert not report.exact
    assert report.directions_tested == 36
    assert report.caveats


def test_abs_fixture_critical_cone_is_a_ray(abs_program, settings):
    directions = NonsmoothChecker(abs_program, settings).critical_cone_sample()
    assert len(directions) == 1
    assert directions[0] == pytest.approx([0.0, 1.0], abs=1e-9)


def test_abs_fixture_second_order_margin(abs_program, settings):
    checker = NonsmoothChecker(abs_program, settings)
    assert checker.second_order_value([0.0, 1.0]).soc_value == pytest.approx(2.0, abs=1e-8)
    sweep = checker.sufficient_sweep()
    assert sweep.status == SecondOrderStatus.SUFFICIENT_CERTIFIED
    assert sweep.margin == pytest.approx(2.0, abs=1e-8)
    assert not sweep.witnesses
    assert sweep.epi_probes == ['consistent']


def test_second_order_value_outside_tangent_cone(abs_program, settings):
    with pytest.raises(NotInSetError):
        NonsmoothChecker(abs_program, settings).second_order_value([0.0, -1.0])


def test_abs_fixture_quadratic_growth(abs_program, settings):
    gamma = NonsmoothChecker(abs_program, settings).growth_grid_check(radius=0.1)
    assert gamma >= 0.5


def test_abs_fixture_mscq_bounded(abs_program, settings):
    report = NonsmoothChecker(abs_program, settings).mscq_probe()
    assert report.verdict == MscqVerdict.BOUNDED
    assert report.ratios
    assert report.max_ratio < 1.5


def test_cubic_is_necessary_only(settings):
    checker = NonsmoothChecker(build_fixture('cubic_fixture.json'), settings)
    assert checker.first_order_check().holds
    assert checker.second_order_value([1.0]).soc_value == pytest.approx(0.0, abs=1e-12)
    sweep = checker.sufficient_sweep()
    assert sweep.status == SecondOrderStatus.NECESSARY_ONLY
    assert sweep.margin == pytest.approx(0.0, abs=1e-12)
    assert len(sweep.witnesses) == 2


def test_descent_toy_has_witness(settings):
    checker = NonsmoothChecker(build_fixture('descent_toy.json'), settings)
    report = checker.first_order_check()
    assert not report.holds
    assert report.witness == pytest.approx([-1.0])
    assert report.witness_value == pytest.approx(-1.0)
    assert checker.confirm_descent(report.witness)
    sweep = checker.sufficient_sweep()
    assert sweep.status == SecondOrderStatus.NECESSARY_VIOLATED


def test_squared_equality_mscq_suspect(settings):
    report = NonsmoothChecker(build_fixture('squared_eq.json'), settings).mscq_probe()
    assert report.verdict == MscqVerdict.SUSPECT
    assert report.shell_maxima[-1][1] > 4.0 * report.shell_maxima[0][1]
