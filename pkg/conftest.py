"""Shared pytest fixtures: shipped problem files and small settings."""

from pathlib import Path

import pytest

from problem_file import parse_problem
from verification_config import VerificationSettings

FIXTURES_DIR = Path(__file__).parent / 'fixtures'


def fixture_path(name: str) -> Path:
    return FIXTURES_DIR / name


def build_fixture(name: str):
    """Parse and build a shipped problem file (NonsmoothProgram or BilevelProblem)."""
    return parse_problem(fixture_path(name)).build()


@pytest.fixture
def settings():
    return VerificationSettings(seed=7, samples=64)


@pytest.fixture
def abs_program():
    return build_fixture('abs_fixture.json')


@pytest.fixture
def kink_problem():
    return build_fixture('paper_example.json')


@pytest.fixture
def qp_problem():
    return build_fixture('qp_fixture.json')


@pytest.fixture
def degenerate_problem():
    return build_fixture('degenerate_fixture.json')
