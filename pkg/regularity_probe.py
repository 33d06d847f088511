#!/usr/bin/env python3
"""
Numeric probes of second-order graphical / epigraphical regularity.

Along parabolic paths x + t d + t^2/2 w(t) the residual

    r(t^2) = g(x + t d + t^2/2 w(t)) - g(x) - t g'(x;d) - t^2/2 g''(x;d,w(t))

must be o(t^2). We tabulate |r|/t^2 on the grid t = 2^-k and classify the
trend; the limit itself cannot be checked exactly.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from errors import InvalidProbePathError
from expressions import PiecewiseExpr
from verification_config import VerificationSettings


class PathFamily(Enum):
    CONSTANT_W = "constant_w"
    T_INVERSE_SQRT = "t_inverse_sqrt"
    RANDOM_BOUNDED = "random_bounded"
    CUSTOM = "custom"


class ProbeMode(Enum):
    GPH = "gph"
    EPI = "epi"


class RegularityVerdict(Enum):
    CONSISTENT = "consistent"
    VIOLATED = "violated"
    INCONCLUSIVE = "inconclusive"


@dataclass
class RegularityReport:
    t_grid: List[float]
    residual_over_t2: List[float]
    verdict: RegularityVerdict
    mode: ProbeMode
    path: str

    def to_dict(self) -> dict:
        return {
            't_grid': list(self.t_grid),
            'residual_over_t2': list(self.residual_over_t2),
            'verdict': self.verdict.value,
            'mode': self.mode.value,
            'path': self.path,
        }


CONSISTENT_LEVEL = 1e-6
VIOLATED_LEVEL = 1e-3
DECAY_RATIO = 0.125


class RegularityProber:
    """Runs parabolic-path residual probes on an expression."""

    def __init__(self, settings: Optional[VerificationSettings] = None):
        self.settings = settings or VerificationSettings()
        self.logger = logging.getLogger(__name__)

    def build_path(self, family: PathFamily, n: int, w0=None, seed: Optional[int] = None) -> Callable[[float], np.ndarray]:
        rng = np.random.default_rng(self.settings.seed if seed is None else seed)
        base = rng.standard_normal(n) if w0 is None else np.asarray(w0, dtype=float).reshape(-1)
        if family == PathFamily.CONSTANT_W:
            return lambda t: base
        if family == PathFamily.T_INVERSE_SQRT:
            return lambda t: base * t ** -0.5
        if family == PathFamily.RANDOM_BOUNDED:
            draws = {}

            def bounded(t):
                if t not in draws:
                    draws[t] = rng.uniform(-1.0, 1.0, n)
                return draws[t]

            return bounded
        raise ValueError(f"Path family {family} needs an explicit path callable")

    @staticmethod
    def check_path(t_grid: List[float], path: Callable[[float], np.ndarray]) -> None:
        """Reject paths whose t * ||w(t)|| does not shrink on the grid."""
        tw = np.array([t * np.linalg.norm(path(t)) for t in t_grid])
        if np.max(tw) <= 1e-12:
            return
        quarter = max(1, len(tw) // 4)
        if np.max(tw[-quarter:]) > 0.5 * np.max(tw[:quarter]):
            raise InvalidProbePathError(
                f"t*w(t) does not tend to 0 on the grid (first {tw[0]:.3e}, last {tw[-1]:.3e})")

    def probe(self, expr: PiecewiseExpr, x, d, family: PathFamily = PathFamily.CONSTANT_W,
              mode: ProbeMode = ProbeMode.GPH, w0=None, seed: Optional[int] = None,
              path: Optional[Callable[[float], np.ndarray]] = None,
              t_grid: Optional[List[float]] = None) -> RegularityReport:
        x = np.asarray(x, dtype=float).reshape(-1)
        d = np.asarray(d, dtype=float).reshape(-1)
        grid = list(t_grid) if t_grid is not None else self.settings.t_grid()
        if any(b >= a for a, b in zip(grid, grid[1:])) or min(grid) <= 0:
            raise ValueError("t-grid must be positive and strictly decreasing")
        if path is None:
            path = self.build_path(family, expr.input_dim, w0, seed)
        else:
            family = PathFamily.CUSTOM
        self.check_path(grid, path)

        g0 = expr.eval(x)
        g1 = expr.dd1(x, d)
        ratios = []
        for t in grid:
            w = np.asarray(path(t), dtype=float)
            g2 = expr.dd2(x, d, w)
            point = x + t * d + 0.5 * t ** 2 * w
            predicted = g0 + t * g1 + 0.5 * t ** 2 * g2
            r = expr.eval(point) - predicted
            if mode == ProbeMode.EPI:
                r = np.minimum(r, 0.0)
            ratios.append(float(np.linalg.norm(r) / t ** 2))

        verdict = self.classify(ratios, float(np.linalg.norm(g0)))
        self.logger.debug(f"{expr.name}: {mode.value} probe along {family.value} -> {verdict.value} "
                          f"(final residual/t^2 {ratios[-1]:.3e})")
        return RegularityReport(grid, ratios, verdict, mode, family.value)

    @staticmethod
    def classify(ratios: List[float], value_norm: float) -> RegularityVerdict:
        """Trend of the running upper envelope over the final half of the grid.

        Consistent needs the envelope to end below the level and to have been
        below it throughout or shrunk by DECAY_RATIO; roundoff floors stay consistent.
        """
        scale = 1.0 + value_norm
        level = CONSISTENT_LEVEL * scale
        tail = ratios[len(ratios) // 2:]
        envelope = [max(tail[i:]) for i in range(len(tail))]
        decaying = envelope[0] < level or envelope[-1] <= DECAY_RATIO * envelope[0]
        if envelope[-1] < level and decaying:
            return RegularityVerdict.CONSISTENT
        if min(tail) >= VIOLATED_LEVEL * scale and envelope[-1] > 0.5 * envelope[0]:
            return RegularityVerdict.VIOLATED
        return RegularityVerdict.INCONCLUSIVE


def regularity_probe(expr: PiecewiseExpr, x, d, family: PathFamily = PathFamily.CONSTANT_W,
                     mode: ProbeMode = ProbeMode.GPH, w0=None, seed: Optional[int] = None,
                     path: Optional[Callable[[float], np.ndarray]] = None,
                     settings: Optional[VerificationSettings] = None) -> RegularityReport:
    """Convenience wrapper around RegularityProber.probe."""
    return RegularityProber(settings).probe(expr, x, d, family, mode, w0=w0, seed=seed, path=path)
