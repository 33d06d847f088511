#!/usr/bin/env python3
"""
Tests for tolerances and run settings.
"""

import pytest

from verification_config import Tolerances, VerificationSettings, load_settings, validate_settings


def test_scaled_tolerances():
    scaled = Tolerances().scaled(10.0)
    assert scaled.feasibility == pytest.approx(1e-7)
    assert scaled.pivot == pytest.approx(1e-9)
    with pytest.raises(ValueError):
        Tolerances().scaled(0.0)


def test_tolerances_from_dict_rejects_unknown_keys():
    assert Tolerances.from_dict({'kkt': 1e-5}).kkt == 1e-5
    with pytest.raises(ValueError):
        Tolerances.from_dict({'epsilon': 1e-5})


def test_effective_tolerances_follow_scale():
    settings = VerificationSettings(tol_scale=100.0)
    assert settings.effective_tolerances().rank == pytest.approx(1e-7)
    assert VerificationSettings().effective_tolerances() == Tolerances()


def test_t_grid_decreases():
    grid = VerificationSettings().t_grid()
    assert grid[0] == 2.0 ** -4
    assert grid[-1] == 2.0 ** -20
    assert all(a > b for a, b in zip(grid, grid[1:]))


def test_with_overrides_ignores_none():
    settings = VerificationSettings(seed=5).with_overrides(seed=None, samples=12)
    assert settings.seed == 5
    assert settings.samples == 12


def test_settings_dict_round_trip():
    settings = VerificationSettings(seed=9, tolerances=Tolerances(kkt=1e-6))
    again = VerificationSettings.from_dict(settings.to_dict())
    assert again == settings


def test_load_settings_from_environment(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv('NSOPT_SEED', '42')
    monkeypatch.setenv('NSOPT_SAMPLES', '16')
    monkeypatch.setenv('NSOPT_ALLOW_FD', 'no')
    settings = load_settings()
    assert settings.seed == 42
    assert settings.samples == 16
    assert not settings.allow_finite_differences


def test_load_settings_rejects_bad_values(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv('NSOPT_SAMPLES', 'many')
    with pytest.raises(ValueError):
        load_settings()


@pytest.mark.parametrize("overrides", [
    {'samples': 0},
    {'tol_scale': -1.0},
    {'grid_min_exponent': 10, 'grid_max_exponent': 5},
    {'growth_radius': 0.0},
])
def test_validate_settings(overrides):
    with pytest.raises(ValueError):
        validate_settings(VerificationSettings(**overrides))
