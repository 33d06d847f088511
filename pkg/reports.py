#!/usr/bin/env python3
"""
Verification reports: what was checked, with which seeds and tolerances, and
the certificate or witness behind every verdict.

JSON output is deterministic (sorted keys, no timestamps) so two runs on the
same file with the same seed produce identical bytes.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from verification_config import CqProvenance, Verdict

EXIT_CODES = {
    Verdict.CERTIFIED: 0,
    Verdict.FAILED: 1,
    Verdict.INCONCLUSIVE: 2,
}
EXIT_INPUT_ERROR = 3


def jsonable(value):
    """Plain JSON types; infinities become "+inf"/"-inf"."""
    if hasattr(value, 'to_dict'):
        return jsonable(value.to_dict())
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return '+inf' if value > 0 else '-inf'
        return value
    return value


def combine_verdicts(verdicts: List[Verdict]) -> Verdict:
    """A failure dominates, then inconclusive; an empty list certifies nothing."""
    if not verdicts:
        return Verdict.INCONCLUSIVE
    if Verdict.FAILED in verdicts:
        return Verdict.FAILED
    if Verdict.INCONCLUSIVE in verdicts:
        return Verdict.INCONCLUSIVE
    return Verdict.CERTIFIED


@dataclass
class CheckResult:
    """One named check inside a report."""
    name: str
    verdict: Verdict
    details: Dict = field(default_factory=dict)
    summary: str = ''

    def to_dict(self) -> Dict:
        return {'verdict': self.verdict.value, 'summary': self.summary, 'details': jsonable(self.details)}


@dataclass
class VerificationReport:
    command: str
    problem_name: str
    kind: str
    problem_digest: str
    cq_provenance: CqProvenance = CqProvenance.ASSUMED
    checks: List[CheckResult] = field(default_factory=list)
    regularity: List[Dict] = field(default_factory=list)
    seed: int = 0
    samples: int = 0
    tolerances: Dict = field(default_factory=dict)
    caveats: List[str] = field(default_factory=list)

    def add(self, name: str, verdict: Verdict, details: Optional[Dict] = None, summary: str = '') -> CheckResult:
        result = CheckResult(name, verdict, details or {}, summary)
        self.checks.append(result)
        return result

    @property
    def verdict(self) -> Verdict:
        return combine_verdicts([check.verdict for check in self.checks])

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            'command': self.command,
            'problem': {'name': self.problem_name, 'kind': self.kind, 'digest': self.problem_digest},
            'cq_provenance': self.cq_provenance.value,
            'verdict': self.verdict.value,
            'exit_code': self.exit_code,
            'checks': {check.name: check.to_dict() for check in self.checks},
            'regularity': jsonable(self.regularity),
            'seed': self.seed,
            'samples': self.samples,
            'tolerances': jsonable(self.tolerances),
            'caveats': list(self.caveats),
        }

    def to_json(self) -> str:
        return json.dumps(jsonable(self.to_dict()), sort_keys=True, indent=2)


def format_summary(report: VerificationReport) -> str:
    """Human-readable summary in banner style."""
    lines = [
        "",
        "=" * 50,
        f"OPTIMALITY VERIFICATION - {report.command.upper()}",
        "=" * 50,
        f"Problem: {report.problem_name or '(unnamed)'} ({report.kind})",
        f"Digest: {report.problem_digest[:16]}",
        f"CQ provenance: {report.cq_provenance.value}",
        f"Seed: {report.seed}   Samples: {report.samples}",
    ]
    for check in report.checks:
        marker = {Verdict.CERTIFIED: '✅', Verdict.FAILED: '❌', Verdict.INCONCLUSIVE: '⚠️ '}[check.verdict]
        line = f"{marker} {check.name}: {check.verdict.value}"
        if check.summary:
            line += f" ({check.summary})"
        lines.append(line)
    for caveat in report.caveats:
        lines.append(f"ℹ️  {caveat}")
    lines.append(f"Overall: {report.verdict.value} (exit {report.exit_code})")
    lines.append("=" * 50)
    return "\n".join(lines)
