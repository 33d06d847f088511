#!/usr/bin/env python3
"""
End-to-end tests of the command-line verifier: exit codes and reports.
"""

import json
import re

import pytest

from conftest import fixture_path
from nsopt_verify import build_parser, main


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for name in ('NSOPT_SEED', 'NSOPT_SAMPLES', 'NSOPT_TOL_SCALE', 'NSOPT_LOG_FILE', 'NSOPT_ALLOW_FD'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def run_json(capsys, *argv):
    code, out = run(capsys, *argv, '--json')
    return code, json.loads(out)


@pytest.mark.parametrize("argv,expected", [
    (['check-first', fixture_path('descent_toy.json')], 1),
    (['check-first', fixture_path('abs_fixture.json')], 0),
    (['check-second', fixture_path('abs_fixture.json')], 0),
    (['check-second', fixture_path('cubic_fixture.json'), '--mode', 'necessary'], 0),
    (['check-second', fixture_path('cubic_fixture.json')], 1),
    (['probe-mscq', fixture_path('squared_eq.json')], 2),
    (['check-cq', fixture_path('paper_example.json')], 0),
    (['bilevel', 'first', fixture_path('qp_fixture.json')], 0),
    (['bilevel', 'dual', fixture_path('qp_fixture.json')], 0),
    (['bilevel', 'dual', fixture_path('paper_example.json')], 2),
])
def test_exit_codes(capsys, argv, expected):
    code, out = run(capsys, *argv)
    assert code == expected
    assert f"(exit {expected})" in out


def test_descent_witness_in_report(capsys):
    code, report = run_json(capsys, 'check-first', fixture_path('descent_toy.json'))
    assert code == 1
    first = report['checks']['first_order']
    assert first['verdict'] == 'failed'
    assert first['details']['witness'] == pytest.approx([-1.0])
    assert first['details']['descent_confirmed'] is True


def test_kink_bilevel_second_order(capsys):
    code, report = run_json(capsys, 'bilevel', 'second', fixture_path('paper_example.json'), '--form', 'both')
    assert code == 0
    check = report['checks']['second_order_sufficient']
    assert 'strict bi-local minimizer' in check['summary']
    assert check['details']['margin'] == pytest.approx(4.0, abs=1e-6)
    assert check['details']['numeric'] is True
    assert report['cq_provenance'] == 'assumed'
    assert any('FP second-order values not evaluated' in caveat for caveat in report['caveats'])


def test_track_reports_lower_solution(capsys):
    code, report = run_json(capsys, 'bilevel', 'track', fixture_path('paper_example.json'), '--at', '0.5')
    assert code == 0
    details = report['checks']['kkt_track']['details']
    assert details['y'] == pytest.approx([0.5], abs=1e-8)
    assert details['x'] == [0.5]


def test_json_output_is_deterministic(capsys):
    argv = ['check-second', fixture_path('abs_fixture.json'), '--seed', '3', '--json']
    _, first = run(capsys, *argv)
    _, second = run(capsys, *argv)
    assert first == second
    report = json.loads(first)
    assert report['seed'] == 3
    assert len(report['problem']['digest']) == 64


def test_truncated_file_is_an_input_error(capsys, tmp_path):
    target = tmp_path / 'broken.json'
    target.write_text(fixture_path('abs_fixture.json').read_text(encoding='utf-8')[:120], encoding='utf-8')
    assert main(['check-first', str(target)]) == 3


@pytest.mark.parametrize("argv", [
    ['check-first', 'missing.json'],
    ['check-first', str(fixture_path('paper_example.json'))],
    ['bilevel', 'first', str(fixture_path('abs_fixture.json'))],
    ['check-first', str(fixture_path('abs_fixture.json')), '--tol-scale', '0'],
    ['check-first'],
    ['no-such-command', 'x.json'],
])
def test_input_errors(argv):
    assert main(argv) == 3


def test_parser_lists_examples():
    assert 'Examples:' in build_parser().epilog


def test_epilog_fixtures_ship():
    names = set(re.findall(r'fixtures/(\w+\.json)', build_parser().epilog))
    assert 'paper_example.json' in names
    for name in names:
        assert fixture_path(name).is_file(), name
