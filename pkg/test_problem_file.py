#!/usr/bin/env python3
"""
Tests for problem file parsing, validation and serialization.
"""

import json

import pytest

from bilevel_problem import BilevelProblem
from conftest import fixture_path
from errors import ProblemFileError
from nsopt_checker import NonsmoothProgram
from problem_file import ProblemFile, ProblemKind, load_problem, parse_problem, serialize_problem


def fixture_text(name):
    return fixture_path(name).read_text(encoding='utf-8')


def cycle_data():
    def composing(target):
        return {'input_dim': 1, 'nodes': [{'id': 'x', 'op': 'variable'},
                                          {'id': 'out', 'op': 'compose', 'args': ['x'], 'expression': target}],
                'output': 'out'}

    return {
        'format_version': '1.0',
        'kind': 'nonsmooth_p',
        'expressions': {'a': composing('b'), 'b': composing('a')},
        'sets': {'K': {'form': 'product', 'factors': ['R-']}},
        'points': {'x_star': [0]},
        'roles': {'f': 'a', 'G': 'b'},
    }


@pytest.mark.parametrize("name,kind,program_type", [
    ('abs_fixture.json', ProblemKind.NONSMOOTH_P, NonsmoothProgram),
    ('descent_toy.json', ProblemKind.NONSMOOTH_P, NonsmoothProgram),
    ('paper_example.json', ProblemKind.BILEVEL, BilevelProblem),
    ('degenerate_fixture.json', ProblemKind.BILEVEL, BilevelProblem),
])
def test_shipped_fixtures_parse(name, kind, program_type):
    problem = parse_problem(fixture_path(name))
    assert problem.kind == kind
    assert isinstance(problem.build(), program_type)


def test_roles_rename_expressions():
    program = parse_problem(fixture_path('descent_toy.json')).build()
    assert program.f is program.G


def test_serialized_problem_keeps_its_digest(tmp_path):
    problem = parse_problem(fixture_path('paper_example.json'))
    target = tmp_path / 'copy.json'
    text = serialize_problem(problem, target)
    assert target.read_text(encoding='utf-8') == text
    again = parse_problem(target)
    assert again.digest() == problem.digest()
    assert again.to_dict() == problem.to_dict()


def test_digest_tracks_content():
    data = json.loads(fixture_text('abs_fixture.json'))
    first = ProblemFile.from_dict(data)
    assert first.digest() == ProblemFile.from_dict(json.loads(fixture_text('abs_fixture.json'))).digest()
    data['points']['x_star'] = [0, 1]
    assert ProblemFile.from_dict(data).digest() != first.digest()


def test_truncated_file_reports_position(tmp_path):
    target = tmp_path / 'broken.json'
    target.write_text(fixture_text('abs_fixture.json')[:200], encoding='utf-8')
    with pytest.raises(ProblemFileError) as excinfo:
        parse_problem(target)
    issue = excinfo.value.issues[0]
    assert issue.path == '$'
    assert issue.line is not None and issue.column is not None


def test_unknown_atom_reports_position():
    text = fixture_text('abs_fixture.json').replace('"op": "abs"', '"op": "sign"')
    with pytest.raises(ProblemFileError) as excinfo:
        load_problem(text)
    issues = excinfo.value.issues
    assert [issue.path for issue in issues] == ['expressions.f.nodes[2].op']
    assert issues[0].line == text.count('\n', 0, text.index('"op": "sign"')) + 1
    assert 'sign' in str(excinfo.value)


def test_every_issue_is_collected():
    data = json.loads(fixture_text('abs_fixture.json'))
    data['format_version'] = '2.0'
    data['extra'] = True
    data['points'] = {'x_star': []}
    with pytest.raises(ProblemFileError) as excinfo:
        ProblemFile.from_dict(data)
    paths = {issue.path for issue in excinfo.value.issues}
    assert {'format_version', 'extra', 'points.x_star'} <= paths


def test_nonsmooth_file_needs_a_set():
    data = json.loads(fixture_text('abs_fixture.json'))
    data['sets'] = {}
    with pytest.raises(ProblemFileError) as excinfo:
        ProblemFile.from_dict(data)
    assert [issue.path for issue in excinfo.value.issues] == ['sets.K']


def test_compose_cycle_is_rejected():
    problem = ProblemFile.from_dict(cycle_data())
    with pytest.raises(ProblemFileError, match='compose cycle'):
        problem.build()


def test_dimension_errors_surface_as_problem_file_errors():
    data = json.loads(fixture_text('abs_fixture.json'))
    data['points']['x_star'] = [0, 0, 0]
    with pytest.raises(ProblemFileError):
        ProblemFile.from_dict(data).build()


def test_tolerance_overrides():
    data = json.loads(fixture_text('abs_fixture.json'))
    data['tolerances'] = {'kkt': 1e-6}
    tolerances = ProblemFile.from_dict(data).tolerance_overrides()
    assert tolerances.kkt == 1e-6
    assert tolerances.feasibility == 1e-8
    data['tolerances'] = {'kkt': -1.0}
    with pytest.raises(ProblemFileError):
        ProblemFile.from_dict(data)
