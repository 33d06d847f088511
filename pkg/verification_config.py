#!/usr/bin/env python3
"""
Verification configuration for the optimality toolkit.
Central tolerance record plus run settings read from the environment.
"""

import os
from dataclasses import dataclass, asdict, field, replace
from enum import Enum
from typing import Dict, List, Optional

from dotenv import load_dotenv


class CqProvenance(Enum):
    """Where a constraint qualification came from."""
    ASSUMED = "assumed"
    PROBED = "probed"
    CERTIFIED_GMFCQ = "certified_gmfcq"


class Verdict(Enum):
    """Outcome of a single check."""
    CERTIFIED = "certified"
    FAILED = "failed"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class Tolerances:
    """All numerical thresholds used by the toolkit."""
    pivot: float = 1e-10
    feasibility: float = 1e-8
    dedup: float = 1e-8
    activity: float = 1e-9
    membership: float = 1e-9
    degeneracy: float = 1e-7  # z_i = g_i + xi_i classification
    kkt: float = 1e-8
    newton: float = 1e-10
    solve_residual: float = 1e-9
    equivalence: float = 1e-7
    rank: float = 1e-9

    def scaled(self, factor: float) -> 'Tolerances':
        """Multiply every threshold by factor (the --tol-scale knob)."""
        if factor <= 0:
            raise ValueError(f"Tolerance scale must be positive, got {factor}")
        return Tolerances(**{name: value * factor for name, value in asdict(self).items()})

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'Tolerances':
        """Create from dictionary, keeping defaults for missing keys."""
        known = set(asdict(cls()).keys())
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown tolerance keys: {sorted(unknown)}")
        values = {}
        for key, value in data.items():
            value = float(value)
            if not value > 0:
                raise ValueError(f"Tolerance {key} must be positive, got {value}")
            values[key] = value
        return cls(**values)


DEFAULT_TOLERANCES = Tolerances()


@dataclass
class VerificationSettings:
    """Run settings: seeds, sample counts, probe radii."""
    seed: int = 0
    samples: int = 256
    tol_scale: float = 1.0
    grid_min_exponent: int = 4
    grid_max_exponent: int = 20
    mscq_radius: float = 0.1
    growth_radius: float = 0.2
    trust_radius: float = 1.0
    crcq_radius: float = 1e-2
    fd_step: float = 1e-4
    allow_finite_differences: bool = True
    max_pieces: int = 4096
    log_file: Optional[str] = None
    tolerances: Tolerances = field(default_factory=Tolerances)

    def t_grid(self) -> List[float]:
        """Strictly decreasing probe grid t = 2^-k."""
        return [2.0 ** (-k) for k in range(self.grid_min_exponent, self.grid_max_exponent + 1)]

    def effective_tolerances(self) -> Tolerances:
        if self.tol_scale == 1.0:
            return self.tolerances
        return self.tolerances.scaled(self.tol_scale)

    def with_overrides(self, **kwargs) -> 'VerificationSettings':
        """Copy with selected fields replaced; None values are ignored."""
        updates = {key: value for key, value in kwargs.items() if value is not None}
        return replace(self, **updates)

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        data = asdict(self)
        data['tolerances'] = self.tolerances.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'VerificationSettings':
        """Create from dictionary."""
        data = dict(data)
        if 'tolerances' in data:
            data['tolerances'] = Tolerances.from_dict(data['tolerances'])
        return cls(**data)


def _env_bool(name: str, default: bool) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


def load_settings(env_file: Optional[str] = None) -> VerificationSettings:
    """Load settings from .env / process environment (NSOPT_* variables)."""
    load_dotenv(env_file)

    try:
        settings = VerificationSettings(
            seed=int(os.getenv('NSOPT_SEED', '0')),
            samples=int(os.getenv('NSOPT_SAMPLES', '256')),
            tol_scale=float(os.getenv('NSOPT_TOL_SCALE', '1.0')),
            grid_min_exponent=int(os.getenv('NSOPT_GRID_MIN_EXPONENT', '4')),
            grid_max_exponent=int(os.getenv('NSOPT_GRID_MAX_EXPONENT', '20')),
            mscq_radius=float(os.getenv('NSOPT_MSCQ_RADIUS', '0.1')),
            growth_radius=float(os.getenv('NSOPT_GROWTH_RADIUS', '0.2')),
            trust_radius=float(os.getenv('NSOPT_TRUST_RADIUS', '1.0')),
            crcq_radius=float(os.getenv('NSOPT_CRCQ_RADIUS', '1e-2')),
            fd_step=float(os.getenv('NSOPT_FD_STEP', '1e-4')),
            allow_finite_differences=_env_bool('NSOPT_ALLOW_FD', True),
            max_pieces=int(os.getenv('NSOPT_MAX_PIECES', '4096')),
            log_file=os.getenv('NSOPT_LOG_FILE') or None,
        )
    except ValueError as e:
        raise ValueError(f"Invalid NSOPT_* environment value: {e}") from e

    validate_settings(settings)
    return settings


def validate_settings(settings: VerificationSettings) -> None:
    """Raise ValueError for settings no check can run with."""
    if settings.samples < 1:
        raise ValueError(f"samples must be at least 1, got {settings.samples}")
    if settings.tol_scale <= 0:
        raise ValueError(f"tol_scale must be positive, got {settings.tol_scale}")
    if not 0 < settings.grid_min_exponent < settings.grid_max_exponent:
        raise ValueError("probe grid exponents must satisfy 0 < min < max")
    for name in ('mscq_radius', 'growth_radius', 'trust_radius', 'crcq_radius', 'fd_step'):
        if getattr(settings, name) <= 0:
            raise ValueError(f"{name} must be positive")
