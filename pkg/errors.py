"""
Exception hierarchy for the verification toolkit.
"""

from dataclasses import dataclass
from typing import List, Optional


class VerificationError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionMismatchError(VerificationError, ValueError):
    pass


class SingularMatrixError(VerificationError):
    """A square system is singular to the pivot tolerance."""


class ScaleExceededError(VerificationError):
    """Desk-scale guard tripped (too many pieces, vertices, subsets)."""


class LPStalledError(VerificationError):
    """Simplex hit its iteration limit or lost feasibility."""


class InfeasibleReferenceError(VerificationError, ValueError):
    """The reference point violates the problem's constraints."""


class NotInSetError(VerificationError, ValueError):
    """A point or direction is outside the set an operation requires."""


class InvalidProbePathError(VerificationError, ValueError):
    """A probe path does not satisfy t * w(t) -> 0."""


class NotPiecewiseLinearError(VerificationError):
    """Directional derivatives are not piecewise linear here (l2 kink)."""


class SensitivityRefusedError(VerificationError):
    """The exact sensitivity system needs SSOSC and LICQ."""


class SensitivityInconsistencyError(VerificationError):
    """No accepting piece, or accepting pieces disagree."""


class TrackingError(VerificationError):
    """Semismooth Newton did not converge."""


class EquivalenceViolation(VerificationError):
    """SP and FP forms produced different answers."""


@dataclass
class SchemaIssue:
    path: str
    message: str
    line: Optional[int] = None
    column: Optional[int] = None

    def __str__(self) -> str:
        where = self.path
        if self.line is not None:
            where = f"{where} (line {self.line}, column {self.column})"
        return f"{where}: {self.message}"


class ProblemFileError(VerificationError, ValueError):
    """Problem file failed to parse or validate."""

    def __init__(self, issues: List[SchemaIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(issue) for issue in self.issues))
