#!/usr/bin/env python3
"""
First- and second-order optimality checks for

    min f(x)  s.t.  G(x) in K

with piecewise-smooth f, G and polyhedral K, at a candidate x*.

On every selection piece f'(x*;.) and G'(x*;.) are linear, so the
linearized problem splits into one LP per piece; for fixed d the same
holds for f''(x*;d,.) and G''(x*;d,.) in w. Where pieces cannot be
enumerated we fall back to deterministic sphere sampling and say so.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm, qmc

from cones import PolyhedralSet
from errors import (DimensionMismatchError, InfeasibleReferenceError, NotInSetError, NotPiecewiseLinearError,
                    ScaleExceededError)
from expressions import PiecewiseExpr
from linalg_lp import LinearProgram, LPResult, LPStatus, lp_solve, vertex_enumerate
from regularity_probe import ProbeMode, RegularityProber, PathFamily
from verification_config import CqProvenance, VerificationSettings


def sphere_directions(n: int, count: int, seed: int) -> List[np.ndarray]:
    """Deterministic low-discrepancy unit directions plus the signed axes."""
    directions = [s * e for e in np.eye(n) for s in (1.0, -1.0)]
    if count > 0:
        sampler = qmc.Halton(d=n, scramble=True, seed=seed)
        points = np.clip(sampler.random(count), 1e-12, 1 - 1e-12)
        for g in norm.ppf(points):
            length = np.linalg.norm(g)
            if length > 1e-12:
                directions.append(g / length)
    return directions


def dedupe(directions: List[np.ndarray], tol: float) -> List[np.ndarray]:
    kept: List[np.ndarray] = []
    for d in directions:
        if not any(np.max(np.abs(d - k)) <= tol for k in kept):
            kept.append(d)
    return kept


@dataclass
class DirectionSampler:
    count: int = 256
    seed: int = 0
    enumerate_pieces: bool = True


@dataclass
class NonsmoothProgram:
    """Instance of min f(x) s.t. G(x) in K at the reference point x_star."""
    f: PiecewiseExpr
    G: PiecewiseExpr
    K: PolyhedralSet
    x_star: np.ndarray
    provenance: CqProvenance = CqProvenance.ASSUMED

    def __post_init__(self):
        self.x_star = np.atleast_1d(np.asarray(self.x_star, dtype=float)).reshape(-1)
        n = self.x_star.size
        if self.f.output_dim != 1:
            raise DimensionMismatchError(f"Objective must be scalar, has {self.f.output_dim} outputs")
        if self.f.input_dim != n or self.G.input_dim != n:
            raise DimensionMismatchError(f"f, G take {self.f.input_dim}, {self.G.input_dim} inputs; x* has {n}")
        if self.G.output_dim != self.K.dim:
            raise DimensionMismatchError(f"G has {self.G.output_dim} outputs, K has dimension {self.K.dim}")
        violation = self.K.violation(self.G.eval(self.x_star))
        if violation > self.K.tol.feasibility:
            raise InfeasibleReferenceError(f"G(x*) is not in K (violation {violation:.3e})")

    @property
    def n(self) -> int:
        return self.x_star.size

    @property
    def G_star(self) -> np.ndarray:
        return self.G.eval(self.x_star)

    @property
    def f_star(self) -> float:
        return float(self.f.eval(self.x_star)[0])


@dataclass
class DirectionVerdict:
    d: np.ndarray
    in_tangent: bool
    f_d1: float
    soc_value: float
    certificate: Optional[LPResult]
    piece_id: Tuple = ()

    def to_dict(self) -> dict:
        return {
            'd': self.d.tolist(),
            'in_tangent': self.in_tangent,
            'f_d1': self.f_d1,
            'soc_value': self.soc_value,
            'certificate': self.certificate.to_dict() if self.certificate else None,
            'piece_id': [str(part) for part in self.piece_id],
        }


@dataclass
class FirstOrderReport:
    holds: bool
    exact: bool
    witness: Optional[np.ndarray] = None
    witness_value: Optional[float] = None
    pieces_checked: int = 0
    directions_tested: int = 0
    certificates: List[LPResult] = field(default_factory=list)
    caveats: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'holds': self.holds,
            'exact': self.exact,
            'witness': None if self.witness is None else self.witness.tolist(),
            'witness_value': self.witness_value,
            'pieces_checked': self.pieces_checked,
            'directions_tested': self.directions_tested,
            'caveats': list(self.caveats),
        }


class SecondOrderStatus(Enum):
    SUFFICIENT_CERTIFIED = "sufficient_certified"
    NECESSARY_ONLY = "necessary_holds_sufficient_not_certified"
    NECESSARY_VIOLATED = "necessary_violated"


@dataclass
class SweepReport:
    margin: float
    status: SecondOrderStatus
    witnesses: List[np.ndarray]
    verdicts: List[DirectionVerdict]
    epi_probes: List[str] = field(default_factory=list)
    caveats: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            'margin': self.margin,
            'status': self.status.value,
            'witnesses': [w.tolist() for w in self.witnesses],
            'directions': [v.to_dict() for v in self.verdicts],
            'epi_probes': list(self.epi_probes),
            'caveats': list(self.caveats),
        }


class MscqVerdict(Enum):
    BOUNDED = "bounded"
    SUSPECT = "suspect"


@dataclass
class MscqProbeReport:
    ratios: List[float]
    radius: float
    verdict: MscqVerdict
    max_ratio: float
    shell_maxima: List[Tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            'ratios': list(self.ratios),
            'radius': self.radius,
            'verdict': self.verdict.value,
            'max_ratio': self.max_ratio,
            'shell_maxima': [list(s) for s in self.shell_maxima],
            'note': 'd(x, Psi) is an upper bound from local search',
        }


@dataclass
class _ProgramPiece:
    objective: np.ndarray
    G_jacobian: np.ndarray
    constraints: np.ndarray
    signature: Tuple


class NonsmoothChecker:
    """Runs the no-gap optimality checks on a NonsmoothProgram."""

    def __init__(self, program: NonsmoothProgram, settings: Optional[VerificationSettings] = None):
        self.program = program
        self.settings = settings or VerificationSettings()
        self.tol = self.settings.effective_tolerances()
        self.logger = logging.getLogger(__name__)
        self._tangent = program.K.tangent_cone(program.G_star)

    # ---- first order ------------------------------------------------------

    def linearized_tangent_member(self, d) -> bool:
        d = np.asarray(d, dtype=float).reshape(-1)
        g1 = self.program.G.dd1(self.program.x_star, d)
        return self._tangent.contains(g1, self.tol.membership * (1.0 + np.linalg.norm(d))).member

    def _pieces(self) -> List[_ProgramPiece]:
        p = self.program
        limit = self.settings.max_pieces
        f_pieces = p.f.first_order_pieces(p.x_star, max_pieces=limit)
        G_pieces = p.G.first_order_pieces(p.x_star, max_pieces=limit)
        if len(f_pieces) * len(G_pieces) > limit:
            raise ScaleExceededError(f"{len(f_pieces) * len(G_pieces)} joint pieces exceed {limit}")
        pieces = []
        for fp, gp in itertools.product(f_pieces, G_pieces):
            pieces.append(_ProgramPiece(fp.jacobian[0], gp.jacobian,
                                        np.vstack([fp.constraints, gp.constraints]),
                                        ('f',) + tuple(fp.signature) + ('G',) + tuple(gp.signature)))
        return pieces

    def _piece_lp(self, piece: _ProgramPiece, objective: np.ndarray, extra_rows: Optional[np.ndarray] = None) -> LinearProgram:
        n = self.program.n
        T = self._tangent
        rows = [piece.constraints, T.A @ piece.G_jacobian, np.eye(n), -np.eye(n)]
        rhs = [np.zeros(piece.constraints.shape[0]), np.zeros(T.A.shape[0]), np.ones(n), np.ones(n)]
        if extra_rows is not None:
            rows.append(extra_rows)
            rhs.append(np.zeros(extra_rows.shape[0]))
        return LinearProgram(objective, T.C @ piece.G_jacobian, np.zeros(T.C.shape[0]),
                             np.vstack(rows), np.concatenate(rhs))

    def first_order_check(self, sampler: Optional[DirectionSampler] = None) -> FirstOrderReport:
        """f'(x*;d) >= -tol on the linearized tangent cone."""
        sampler = sampler or DirectionSampler(self.settings.samples, self.settings.seed)
        threshold = -self.tol.feasibility
        if sampler.enumerate_pieces:
            try:
                pieces = self._pieces()
            except (NotPiecewiseLinearError, ScaleExceededError) as e:
                self.logger.warning(f"Piece enumeration unavailable ({e}); sampling directions instead")
                report = self._first_order_sampled(sampler)
                report.caveats.append(f"piece enumeration unavailable: {e}")
                return report
            report = FirstOrderReport(holds=True, exact=True, pieces_checked=len(pieces))
            for piece in pieces:
                result = lp_solve(self._piece_lp(piece, piece.objective), self.tol)
                report.certificates.append(result)
                if result.status == LPStatus.OPTIMAL and result.optimum < threshold:
                    d = result.solution / np.linalg.norm(result.solution)
                    report.holds = False
                    report.witness = d
                    report.witness_value = float(self.program.f.dd1(self.program.x_star, d)[0])
                    self.logger.info(f"First-order condition fails on piece {piece.signature}: "
                                     f"witness {d}, f' = {report.witness_value:.3e}")
                    break
            return report
        return self._first_order_sampled(sampler)

    def _first_order_sampled(self, sampler: DirectionSampler) -> FirstOrderReport:
        p = self.program
        directions = sphere_directions(p.n, sampler.count, sampler.seed)
        report = FirstOrderReport(holds=True, exact=False, directions_tested=len(directions))
        report.caveats.append(f"sampled {len(directions)} directions; not a proof over the whole cone")
        worst = None
        for d in directions:
            if not self.linearized_tangent_member(d):
                continue
            value = float(p.f.dd1(p.x_star, d)[0])
            if value < -self.tol.feasibility and (worst is None or value < worst[1]):
                worst = (d, value)
        if worst is not None:
            report.holds = False
            report.witness, report.witness_value = worst
        return report

    def critical_cone_sample(self, n: Optional[int] = None, seed: Optional[int] = None) -> List[np.ndarray]:
        """Unit critical directions: enumerated piece-cone rays first, then samples."""
        p = self.program
        n = self.settings.samples if n is None else n
        seed = self.settings.seed if seed is None else seed
        rays: List[np.ndarray] = []
        try:
            for piece in self._pieces():
                lp = self._piece_lp(piece, np.zeros(p.n), extra_rows=piece.objective[None, :])
                for v in vertex_enumerate(lp.A_eq, lp.b_eq, lp.A_in, lp.b_in, bound=4 ** p.n + 64,
                                          n=p.n, tol=self.tol):
                    length = np.linalg.norm(v)
                    if length > self.tol.dedup:
                        rays.append(v / length)
        except (NotPiecewiseLinearError, ScaleExceededError) as e:
            self.logger.warning(f"Critical-cone rays not enumerable ({e}); using samples only")

        sampled = []
        for d in sphere_directions(p.n, n, seed):
            if self.linearized_tangent_member(d) and p.f.dd1(p.x_star, d)[0] <= self.tol.feasibility:
                sampled.append(d)
        return dedupe(rays + sampled, self.tol.dedup)

    # ---- second order ----------------------------------------------------

    def second_order_value(self, d) -> DirectionVerdict:
        """min_w f''(x*;d,w) s.t. G''(x*;d,w) in T2_K(G(x*); G'(x*;d))."""
        p = self.program
        d = np.asarray(d, dtype=float).reshape(-1)
        in_tangent = self.linearized_tangent_member(d)
        f_d1 = float(p.f.dd1(p.x_star, d)[0])
        if not in_tangent:
            raise NotInSetError(f"Direction {d} is outside the linearized tangent cone")
        G_d1 = p.G.dd1(p.x_star, d)
        T2 = p.K.second_order_tangent(p.G_star, G_d1)
        limit = self.settings.max_pieces
        f_pieces = p.f.second_order_pieces(p.x_star, d, max_pieces=limit)
        G_pieces = p.G.second_order_pieces(p.x_star, d, max_pieces=limit)

        best_value, best_result, best_id = float('inf'), None, ()
        for fp, gp in itertools.product(f_pieces, G_pieces):
            A_in = np.vstack([fp.cons_matrix, gp.cons_matrix, T2.A @ gp.slope])
            b_in = np.concatenate([-fp.cons_offset, -gp.cons_offset, T2.b - T2.A @ gp.offset])
            lp = LinearProgram(fp.slope[0], T2.C @ gp.slope, T2.e - T2.C @ gp.offset, A_in, b_in)
            result = lp_solve(lp, self.tol)
            if result.status == LPStatus.INFEASIBLE:
                continue
            value = float('-inf') if result.status == LPStatus.UNBOUNDED else result.optimum + float(fp.offset[0])
            if value < best_value:
                best_value, best_result = value, result
                best_id = ('f',) + tuple(fp.signature) + ('G',) + tuple(gp.signature)
        self.logger.debug(f"second-order value along {d}: {best_value}")
        return DirectionVerdict(d, in_tangent, f_d1, best_value, best_result, best_id)

    def sufficient_sweep(self, sampler: Optional[DirectionSampler] = None) -> SweepReport:
        sampler = sampler or DirectionSampler(self.settings.samples, self.settings.seed)
        first = self.first_order_check(sampler)
        if not first.holds:
            return SweepReport(float('-inf'), SecondOrderStatus.NECESSARY_VIOLATED, [first.witness], [],
                               caveats=['first-order condition fails'])

        caveats = [f"margin taken over tested unit critical directions ({sampler.count} samples + rays)"]
        if not first.exact:
            caveats.extend(first.caveats)
        directions = self.critical_cone_sample(sampler.count, sampler.seed)
        verdicts: List[DirectionVerdict] = []
        witnesses: List[np.ndarray] = []
        margin = float('inf')
        inconclusive = False
        for d in directions:
            try:
                verdict = self.second_order_value(d)
            except (NotPiecewiseLinearError, ScaleExceededError, NotInSetError) as e:
                self.logger.warning(f"Skipping direction {d}: {e}")
                caveats.append(f"direction {d.tolist()} skipped: {e}")
                inconclusive = True
                continue
            verdicts.append(verdict)
            margin = min(margin, verdict.soc_value)
            if verdict.soc_value <= self.tol.feasibility:
                witnesses.append(d)

        if margin > self.tol.feasibility and not inconclusive:
            status = SecondOrderStatus.SUFFICIENT_CERTIFIED
        elif margin >= -self.tol.feasibility:
            status = SecondOrderStatus.NECESSARY_ONLY
        else:
            status = SecondOrderStatus.NECESSARY_VIOLATED
        if not directions:
            caveats.append("critical cone is {0}: growth certified vacuously")

        prober = RegularityProber(self.settings)
        epi = []
        for d in directions[:3]:
            report = prober.probe(self.program.f, self.program.x_star, d, PathFamily.CONSTANT_W,
                                  ProbeMode.EPI, w0=np.zeros(self.program.n))
            epi.append(report.verdict.value)
        self.logger.info(f"Second-order sweep: margin {margin}, status {status.value}")
        return SweepReport(margin, status, witnesses, verdicts, epi, caveats)

    # ---- constraint qualification and sanity probes ----------------------

    def _nearest_feasible(self, x: np.ndarray) -> Optional[np.ndarray]:
        """Upper-bound heuristic for the projection of x onto Psi."""
        p = self.program
        K = p.K

        def feasible(z):
            return K.violation(p.G.eval(z)) <= 1e-12

        candidates = []
        lo, hi = 0.0, 1.0
        if feasible(x):
            return x.copy()
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if feasible(x + mid * (p.x_star - x)):
                hi = mid
            else:
                lo = mid
        candidates.append(x + hi * (p.x_star - x))

        constraints = []
        if K.A.shape[0]:
            constraints.append({'type': 'ineq', 'fun': lambda z: K.b - K.A @ p.G.eval(z)})
        if K.C.shape[0]:
            constraints.append({'type': 'eq', 'fun': lambda z: K.C @ p.G.eval(z) - K.e})
        for start in (x, p.x_star, candidates[0]):
            try:
                result = minimize(lambda z: float(np.sum((z - x) ** 2)), start, method='SLSQP',
                                  constraints=constraints, options={'maxiter': 200, 'ftol': 1e-14})
            except (ValueError, ArithmeticError) as e:
                self.logger.debug(f"SLSQP failed from {start}: {e}")
                continue
            if K.violation(p.G.eval(result.x)) <= 1e-9:
                candidates.append(result.x)
        return min(candidates, key=lambda z: np.linalg.norm(z - x))

    def mscq_probe(self, radius: Optional[float] = None, n: Optional[int] = None,
                   seed: Optional[int] = None) -> MscqProbeReport:
        p = self.program
        radius = self.settings.mscq_radius if radius is None else radius
        if radius <= 0:
            raise ValueError("radius must be positive")
        n = self.settings.samples if n is None else n
        rng = np.random.default_rng(self.settings.seed if seed is None else seed)
        shells = 6
        per_shell = max(4, -(-n // shells))
        ratios: List[float] = []
        maxima: List[Tuple[float, float]] = []
        for j in range(shells):
            r = radius * 2.0 ** (-j)
            shell_max = 0.0
            for _ in range(per_shell):
                g = rng.standard_normal(p.n)
                x = p.x_star + g / np.linalg.norm(g) * r * rng.uniform(0.5, 1.0)
                dist_G = p.K.distance(p.G.eval(x))
                if dist_G <= 1e-10:
                    continue
                z = self._nearest_feasible(x)
                ratio = float(np.linalg.norm(z - x) / dist_G)
                ratios.append(ratio)
                shell_max = max(shell_max, ratio)
            maxima.append((r, shell_max))

        max_ratio = max(ratios, default=0.0)
        outer = maxima[0][1]
        inner = maxima[-1][1]
        suspect = max_ratio > 1e6 or (outer > 0 and inner > 4.0 * outer) or (outer == 0 and inner > 0 and inner > 4.0)
        verdict = MscqVerdict.SUSPECT if suspect else MscqVerdict.BOUNDED
        self.logger.info(f"MSCQ probe: {len(ratios)} ratios, max {max_ratio:.3e}, verdict {verdict.value}")
        return MscqProbeReport(ratios, radius, verdict, max_ratio, maxima)

    def confirm_descent(self, d) -> bool:
        """Line search along a feasible perturbation of x* + t d."""
        p = self.program
        d = np.asarray(d, dtype=float).reshape(-1)
        for k in range(1, 21):
            t = 2.0 ** (-k)
            z = p.x_star + t * d
            if p.K.violation(p.G.eval(z)) > self.tol.feasibility:
                z = self._nearest_feasible(z)
            if float(p.f.eval(z)[0]) < p.f_star - 1e-14:
                return True
        return False

    def growth_grid_check(self, radius: float = 0.1, points_per_axis: int = 21) -> float:
        """Smallest (f(x) - f*) / |x - x*|^2 over feasible grid points of the ball."""
        p = self.program
        if p.n > 3:
            raise ScaleExceededError("grid growth check limited to n <= 3")
        axis = np.linspace(-radius, radius, points_per_axis)
        gamma = float('inf')
        for offset in itertools.product(axis, repeat=p.n):
            offset = np.array(offset)
            dist = np.linalg.norm(offset)
            if dist == 0.0 or dist > radius:
                continue
            x = p.x_star + offset
            if p.K.violation(p.G.eval(x)) > 1e-12:
                continue
            gamma = min(gamma, (float(p.f.eval(x)[0]) - p.f_star) / dist ** 2)
        return gamma
