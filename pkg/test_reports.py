#!/usr/bin/env python3
"""
Tests for verification reports and their JSON form.
"""

import json

import numpy as np

from reports import EXIT_CODES, VerificationReport, combine_verdicts, format_summary, jsonable
from verification_config import CqProvenance, Verdict


def make_report():
    return VerificationReport(command='check-first', problem_name='toy', kind='nonsmooth_p',
                              problem_digest='ab' * 32, seed=1, samples=8)


def test_jsonable_handles_numpy_and_infinities():
    data = jsonable({'a': np.array([1.0, 2.0]), 'b': np.float64(np.inf), 'c': np.bool_(True), 'd': (np.int64(3),),
                     'e': -float('inf'), 'f': Verdict.FAILED})
    assert data == {'a': [1.0, 2.0], 'b': '+inf', 'c': True, 'd': [3], 'e': '-inf', 'f': 'failed'}
    json.dumps(data)


def test_combine_verdicts():
    assert combine_verdicts([]) == Verdict.INCONCLUSIVE
    assert combine_verdicts([Verdict.CERTIFIED, Verdict.INCONCLUSIVE]) == Verdict.INCONCLUSIVE
    assert combine_verdicts([Verdict.INCONCLUSIVE, Verdict.FAILED]) == Verdict.FAILED
    assert combine_verdicts([Verdict.CERTIFIED]) == Verdict.CERTIFIED


def test_report_verdict_and_exit_code():
    report = make_report()
    assert report.exit_code == EXIT_CODES[Verdict.INCONCLUSIVE]
    report.add('first_order', Verdict.CERTIFIED, {'margin': np.float64(2.0)})
    assert report.exit_code == 0
    report.add('mscq_probe', Verdict.FAILED)
    assert report.exit_code == 1


def test_json_is_sorted_and_stable():
    report = make_report()
    report.cq_provenance = CqProvenance.PROBED
    report.add('first_order', Verdict.CERTIFIED, {'witness': None, 'values': np.array([0.5])})
    text = report.to_json()
    assert text == make_report_json_again()
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert data['cq_provenance'] == 'probed'
    assert data['checks']['first_order']['details']['values'] == [0.5]


def make_report_json_again():
    report = make_report()
    report.cq_provenance = CqProvenance.PROBED
    report.add('first_order', Verdict.CERTIFIED, {'values': np.array([0.5]), 'witness': None})
    return report.to_json()


def test_summary_banner():
    report = make_report()
    report.add('first_order', Verdict.FAILED, summary='descent direction [-1.0]')
    report.caveats.append('sampled')
    text = format_summary(report)
    assert '=' * 50 in text
    assert '❌ first_order: failed (descent direction [-1.0])' in text
    assert 'ℹ️  sampled' in text
    assert text.rstrip().endswith('=' * 50)
    assert 'Overall: failed (exit 1)' in text
