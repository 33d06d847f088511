#!/usr/bin/env python3
"""
Optimality checks for bi-local solutions of a bilevel program.

Two reformulations are checked side by side:

  SP  substitutes the local lower-level solution y(x) into the upper problem;
  FP  keeps (x, y, mu, xi) and imposes the lower KKT system.

Under SSOSC and LICQ both are assembled exactly from the W pieces of the
sensitivity system and must give identical verdicts; a disagreement is
raised as EquivalenceViolation. Without LICQ only the SP form is available,
with numeric derivatives of the tracked solution.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from bilevel_problem import BilevelProblem
from cones import PolyhedralSet
from errors import (EquivalenceViolation, ScaleExceededError, SensitivityRefusedError, SingularMatrixError,
                    TrackingError)
from linalg_lp import LinearProgram, LPStatus, lp_solve, rank, solve_linear, vertex_enumerate
from nsopt_checker import DirectionSampler, SecondOrderStatus, dedupe, sphere_directions
from sensitivity import SensitivityAnalyzer, SensitivityPiece, SolutionMapJet
from verification_config import CqProvenance, VerificationSettings

NUMERIC_DIRECTION_TOL = 1e-6
GROWTH_VIOLATION_LEVEL = 1e-12
GROWTH_MARGIN_FACTOR = 0.25
MAX_TRACKING_FAILURE_RATE = 0.1
FP_SKIPPED_NUMERIC = "FP second-order values not evaluated on the numeric route (LICQ fails); SP values only"


class Form(Enum):
    SP = "sp"
    FP = "fp"
    BOTH = "both"


class SecondOrderMode(Enum):
    NECESSARY = "necessary"
    SUFFICIENT = "sufficient"


@dataclass
class GmfcqReport:
    holds: bool
    form: Form
    per_W: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'holds': self.holds, 'form': self.form.value, 'per_W': self.per_W}


@dataclass
class BilevelFirstOrderReport:
    holds: bool
    exact: bool
    provenance: CqProvenance
    witness: Optional[np.ndarray] = None
    witness_value: Optional[float] = None
    critical_directions: List[np.ndarray] = field(default_factory=list)
    tangent_directions: List[np.ndarray] = field(default_factory=list)
    per_piece: List[Dict] = field(default_factory=list)
    caveats: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'holds': self.holds,
            'exact': self.exact,
            'cq_provenance': self.provenance.value,
            'witness': None if self.witness is None else self.witness.tolist(),
            'witness_value': self.witness_value,
            'critical_directions': [d.tolist() for d in self.critical_directions],
            'tangent_directions': [d.tolist() for d in self.tangent_directions],
            'per_piece': self.per_piece,
            'caveats': list(self.caveats),
        }


@dataclass
class DualReport:
    feasible: bool
    form: Form
    per_W: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {'feasible': self.feasible, 'form': self.form.value, 'per_W': self.per_W}


@dataclass
class BilevelSecondOrderReport:
    margin: float
    status: SecondOrderStatus
    mode: SecondOrderMode
    witnesses: List[np.ndarray] = field(default_factory=list)
    directions: List[Dict] = field(default_factory=list)
    numeric: bool = False
    caveats: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        if self.mode == SecondOrderMode.SUFFICIENT:
            return self.status == SecondOrderStatus.SUFFICIENT_CERTIFIED
        return self.status != SecondOrderStatus.NECESSARY_VIOLATED

    def to_dict(self) -> Dict:
        return {
            'margin': self.margin,
            'status': self.status.value,
            'mode': self.mode.value,
            'passed': self.passed,
            'witnesses': [w.tolist() for w in self.witnesses],
            'directions': self.directions,
            'numeric': self.numeric,
            'caveats': list(self.caveats),
        }


@dataclass
class GrowthReport:
    gamma_hat: float
    violations: List[List[float]]
    samples: int
    feasible: int
    tracking_failures: int
    margin_check: Optional[bool] = None

    def to_dict(self) -> Dict:
        return {
            'gamma_hat': self.gamma_hat,
            'violations': self.violations,
            'samples': self.samples,
            'feasible': self.feasible,
            'tracking_failures': self.tracking_failures,
            'margin_check': self.margin_check,
            'margin_factor': GROWTH_MARGIN_FACTOR,
        }


def _lp_value(result) -> float:
    if result.status == LPStatus.UNBOUNDED:
        return float('-inf')
    if result.status == LPStatus.INFEASIBLE:
        return float('inf')
    return float(result.optimum)


def _values_agree(a: float, b: float, tol: float) -> bool:
    if np.isinf(a) or np.isinf(b):
        return a == b
    return abs(a - b) <= tol * (1.0 + max(abs(a), abs(b)))


class BilevelChecker:
    """Primal, dual and second-order checks at a candidate bi-local solution."""

    def __init__(self, bp: BilevelProblem, settings: Optional[VerificationSettings] = None):
        self.bp = bp
        self.settings = settings or VerificationSettings()
        self.tol = self.settings.effective_tolerances()
        self.logger = logging.getLogger(__name__)
        self.sens = SensitivityAnalyzer(bp, self.settings)
        self.lower = self.sens.lower
        self.kkt = self.sens.kkt
        self.upper = bp.upper_derivatives(bp.x_star, self.kkt.y)
        self.active_G = [i for i in range(bp.q) if self.upper.G[i] >= -self.tol.feasibility]
        self._K_G = PolyhedralSet.product(['R-'] * bp.q, tol=self.tol) if bp.q else None

    @property
    def cq(self):
        return self.sens.cq

    @property
    def exact(self) -> bool:
        return self.sens.exact

    # ---- shared helpers --------------------------------------------------

    def _reduction(self, piece: SensitivityPiece) -> np.ndarray:
        """R_W = [I; -H_y(W)]: d_x -> d_z on the piece."""
        return np.vstack([np.eye(self.bp.n), -piece.H[:self.bp.m]])

    @staticmethod
    def _kkt_block(piece: SensitivityPiece) -> np.ndarray:
        """[rhs, A] acting on (d_x, d_y, d_mu, d_xi)."""
        return np.hstack([piece.rhs, piece.A])

    def _fp_branch_rows(self, piece: SensitivityPiece) -> np.ndarray:
        """Sign rows of dz_i = grad g_i . d_z + d_xi_i over (d_x, d_y, d_mu, d_xi)."""
        bp = self.bp
        width = bp.N + bp.r + bp.s
        d = self.sens.derivs
        rows = []
        for i in piece.degenerate:
            row = np.zeros(width)
            row[:bp.N] = d.J_g[i]
            row[bp.N + bp.r + i] = 1.0
            rows.append(row if piece.W[i] == 1.0 else -row)
        return np.array(rows).reshape(len(rows), width)

    def _direction_tol(self, d_x) -> float:
        base = self.tol.feasibility if self.exact else NUMERIC_DIRECTION_TOL
        return base * (1.0 + np.linalg.norm(d_x))

    def _classify(self, d_z: np.ndarray, tol: float) -> Tuple[bool, float]:
        """(d_z linearly tangent to the upper constraints, F'(d_z))."""
        u = self.upper
        tangent = (np.max(u.J_G[self.active_G] @ d_z, initial=-np.inf) <= tol
                   and np.max(np.abs(u.J_H @ d_z), initial=0.0) <= tol)
        return bool(tangent), float(u.grad_F @ d_z)

    def jet(self, d_x) -> SolutionMapJet:
        return self.sens.solution_jet(d_x)

    def provenance(self) -> CqProvenance:
        if self.exact:
            try:
                if self.gmfcq_check(Form.SP).holds:
                    return CqProvenance.CERTIFIED_GMFCQ
            except SensitivityRefusedError:
                pass
        return CqProvenance.ASSUMED

    # ---- GMFCQ -----------------------------------------------------------

    def _strict_direction_lp(self, eq_rows: np.ndarray, ineq_rows: np.ndarray, box_dims: int) -> Tuple[float, np.ndarray]:
        """max s s.t. eq_rows v = 0, ineq_rows v + s <= 0, |v_i| <= 1 on the first box_dims, s <= 1."""
        width = eq_rows.shape[1]
        c = np.zeros(width + 1)
        c[-1] = -1.0
        box = np.zeros((2 * box_dims, width + 1))
        box[:box_dims, :box_dims] = np.eye(box_dims)
        box[box_dims:, :box_dims] = -np.eye(box_dims)
        cap = np.zeros((1, width + 1))
        cap[0, -1] = 1.0
        A_in = np.vstack([np.hstack([ineq_rows, np.ones((ineq_rows.shape[0], 1))]), box, cap])
        b_in = np.concatenate([np.zeros(ineq_rows.shape[0]), np.ones(2 * box_dims), [1.0]])
        A_eq = np.hstack([eq_rows, np.zeros((eq_rows.shape[0], 1))])
        result = lp_solve(LinearProgram(c, A_eq, np.zeros(eq_rows.shape[0]), A_in, b_in), self.tol)
        return -result.optimum, result.solution[:width]

    def _gmfcq_sp(self, piece: SensitivityPiece) -> Dict:
        R = self._reduction(piece)
        R_H = self.upper.J_H @ R
        R_G = self.upper.J_G[self.active_G] @ R
        full_rank = rank(R_H, self.tol.rank) == self.bp.p if self.bp.p else True
        slack, d = self._strict_direction_lp(R_H, R_G, self.bp.n)
        return {'W': list(piece.label), 'full_row_rank': full_rank, 'slack': slack,
                'holds': bool(full_rank and slack > self.tol.feasibility), 'witness': d.tolist()}

    def _gmfcq_fp(self, piece: SensitivityPiece) -> Dict:
        bp = self.bp
        extra = bp.r + bp.s
        J_H = np.hstack([self.upper.J_H, np.zeros((bp.p, extra))])
        J_G = np.hstack([self.upper.J_G[self.active_G], np.zeros((len(self.active_G), extra))])
        E = np.vstack([J_H, self._kkt_block(piece)])
        full_rank = rank(E, self.tol.rank) == E.shape[0]
        slack, v = self._strict_direction_lp(E, J_G, bp.n)
        return {'W': list(piece.label), 'full_row_rank': full_rank, 'slack': slack,
                'holds': bool(full_rank and slack > self.tol.feasibility), 'witness': v[:bp.n].tolist()}

    def gmfcq_check(self, form: Form = Form.BOTH) -> GmfcqReport:
        self.sens.require_exact()
        per_W = []
        for piece in self.sens.pieces():
            entry = {}
            if form in (Form.SP, Form.BOTH):
                entry['sp'] = self._gmfcq_sp(piece)
            if form in (Form.FP, Form.BOTH):
                entry['fp'] = self._gmfcq_fp(piece)
            if form == Form.BOTH and entry['sp']['holds'] != entry['fp']['holds']:
                raise EquivalenceViolation(f"GMFCQ differs between SP and FP forms for W={list(piece.label)}: "
                                           f"{entry}")
            entry['W'] = list(piece.label)
            entry['holds'] = next(e['holds'] for k, e in entry.items() if k in ('sp', 'fp'))
            per_W.append(entry)
        holds = all(entry['holds'] for entry in per_W)
        self.logger.info(f"GMFCQ ({form.value}): {'holds' if holds else 'fails'} over {len(per_W)} W pieces")
        return GmfcqReport(holds, form, per_W)

    # ---- first order -----------------------------------------------------

    def _sp_piece_lp(self, piece: SensitivityPiece, objective_row: Optional[np.ndarray] = None) -> LinearProgram:
        n = self.bp.n
        R = self._reduction(piece)
        u = self.upper
        c = u.grad_F @ R if objective_row is None else objective_row
        rows = [piece.branch_rows, u.J_G[self.active_G] @ R, np.eye(n), -np.eye(n)]
        rhs = [np.zeros(piece.branch_rows.shape[0]), np.zeros(len(self.active_G)), np.ones(n), np.ones(n)]
        return LinearProgram(c, u.J_H @ R, np.zeros(self.bp.p), np.vstack(rows), np.concatenate(rhs))

    def _fp_piece_lp(self, piece: SensitivityPiece) -> LinearProgram:
        bp = self.bp
        width = bp.N + bp.r + bp.s
        u = self.upper
        lift = np.zeros((bp.N, width))
        lift[:, :bp.N] = np.eye(bp.N)
        box = np.zeros((2 * bp.n, width))
        box[:bp.n, :bp.n] = np.eye(bp.n)
        box[bp.n:, :bp.n] = -np.eye(bp.n)
        branch = self._fp_branch_rows(piece)
        rows = [branch, u.J_G[self.active_G] @ lift, box]
        rhs = [np.zeros(branch.shape[0]), np.zeros(len(self.active_G)), np.ones(2 * bp.n)]
        E = np.vstack([self._kkt_block(piece), u.J_H @ lift])
        return LinearProgram(u.grad_F @ lift, E, np.zeros(E.shape[0]), np.vstack(rows), np.concatenate(rhs))

    def critical_cone_member(self, form: Form, d_x) -> bool:
        """d_x tangent to the feasible set of the form with nonpositive F-hat derivative."""
        d_x = np.atleast_1d(np.asarray(d_x, dtype=float)).reshape(-1)
        tol = self._direction_tol(d_x)
        if form == Form.SP:
            jet = self.jet(d_x)
            tangent, slope = self._classify(np.concatenate([d_x, jet.y1]), tol)
            return tangent and slope <= tol
        self.sens.require_exact()
        bp = self.bp
        for piece in self.sens.pieces():
            try:
                rest = solve_linear(piece.A, -piece.rhs @ d_x, self.tol)
            except SingularMatrixError:
                continue
            v = np.concatenate([d_x, rest])
            branch = self._fp_branch_rows(piece)
            if np.max(branch @ v, initial=0.0) > tol:
                continue
            tangent, slope = self._classify(v[:bp.N], tol)
            return tangent and slope <= tol
        return False

    def _critical_rays(self) -> List[np.ndarray]:
        bp = self.bp
        rays = []
        for piece in self.sens.pieces():
            lp = self._sp_piece_lp(piece)
            A_in = np.vstack([lp.A_in, (self.upper.grad_F @ self._reduction(piece))[None, :]])
            b_in = np.concatenate([lp.b_in, [0.0]])
            try:
                vertices = vertex_enumerate(lp.A_eq, lp.b_eq, A_in, b_in, bound=4 ** bp.n + 64, n=bp.n, tol=self.tol)
            except ScaleExceededError as e:
                self.logger.warning(f"Critical-cone rays not enumerable for W={list(piece.label)}: {e}")
                continue
            rays.extend(v / np.linalg.norm(v) for v in vertices if np.linalg.norm(v) > self.tol.dedup)
        return rays

    def first_order_check(self, sampler: Optional[DirectionSampler] = None,
                          form: Form = Form.BOTH) -> BilevelFirstOrderReport:
        sampler = sampler or DirectionSampler(self.settings.samples, self.settings.seed)
        if self.exact:
            return self._first_order_exact(sampler, form)
        if self.sens.numeric_available:
            return self._first_order_numeric(sampler)
        self.sens.require_exact()

    def _first_order_exact(self, sampler: DirectionSampler, form: Form) -> BilevelFirstOrderReport:
        bp = self.bp
        report = BilevelFirstOrderReport(holds=True, exact=True, provenance=self.provenance())
        best = None
        for piece in self.sens.pieces():
            entry = {'W': list(piece.label)}
            sp = lp_solve(self._sp_piece_lp(piece), self.tol)
            entry['sp_value'] = _lp_value(sp)
            if form in (Form.FP, Form.BOTH):
                fp = lp_solve(self._fp_piece_lp(piece), self.tol)
                entry['fp_value'] = _lp_value(fp)
                if not _values_agree(entry['sp_value'], entry['fp_value'], self.tol.equivalence):
                    raise EquivalenceViolation(f"SP and FP linearized problems differ on W={list(piece.label)}: "
                                               f"{entry['sp_value']} vs {entry['fp_value']}")
            report.per_piece.append(entry)
            if sp.optimal and sp.optimum < -self.tol.feasibility and (best is None or sp.optimum < best[0]):
                best = (sp.optimum, sp.solution)
        if best is not None:
            d = best[1] / np.linalg.norm(best[1])
            report.holds = False
            report.witness = d
            report.witness_value = float(self.upper.grad_F @ np.concatenate([d, self.jet(d).y1]))

        candidates = dedupe(self._critical_rays() + sphere_directions(bp.n, sampler.count, sampler.seed),
                            self.tol.dedup)
        for d in candidates:
            sp_member = self.critical_cone_member(Form.SP, d)
            if form in (Form.FP, Form.BOTH):
                if self.critical_cone_member(Form.FP, d) != sp_member:
                    raise EquivalenceViolation(f"Critical-cone membership of {d.tolist()} differs between SP and FP")
            if sp_member:
                report.critical_directions.append(d)
        report.caveats.append(f"critical cone listed on {len(candidates)} rays and sampled directions")
        self.logger.info(f"Bilevel first-order check: {'holds' if report.holds else 'fails'}")
        return report

    def _first_order_numeric(self, sampler: DirectionSampler) -> BilevelFirstOrderReport:
        bp = self.bp
        report = BilevelFirstOrderReport(holds=True, exact=False, provenance=CqProvenance.ASSUMED)
        report.caveats.extend([
            "LICQ fails: y'(x*; d) from numeric differentiation of tracked lower solutions",
            "FP form unavailable without LICQ",
            "tangent cone sampled, MSCQ assumed",
        ])
        worst = None
        for d in dedupe(sphere_directions(bp.n, sampler.count, sampler.seed), self.tol.dedup):
            tol = self._direction_tol(d)
            try:
                jet = self.jet(d)
            except TrackingError as e:
                report.caveats.append(f"direction {d.tolist()} skipped: {e}")
                continue
            tangent, slope = self._classify(np.concatenate([d, jet.y1]), tol)
            if not tangent:
                continue
            report.tangent_directions.append(d)
            if slope <= tol:
                report.critical_directions.append(d)
            if slope < -tol and (worst is None or slope < worst[1]):
                worst = (d, slope)
        if worst is not None:
            report.holds = False
            report.witness, report.witness_value = worst
        return report

    # ---- dual form -------------------------------------------------------

    def _residual_lp(self, base: np.ndarray, M: np.ndarray, nonneg: List[int], zero: List[int]) -> Tuple[float, np.ndarray]:
        """min ||base + M lam||_1 s.t. lam_i >= 0 (nonneg), lam_i = 0 (zero)."""
        rows, k = M.shape
        c = np.concatenate([np.zeros(k), np.ones(rows)])
        A_in = np.vstack([np.hstack([M, -np.eye(rows)]), np.hstack([-M, -np.eye(rows)])])
        b_in = np.concatenate([-base, base])
        sign = np.zeros((len(nonneg), k + rows))
        for row, i in enumerate(nonneg):
            sign[row, i] = -1.0
        fix = np.zeros((len(zero), k + rows))
        for row, i in enumerate(zero):
            fix[row, i] = 1.0
        result = lp_solve(LinearProgram(c, fix, np.zeros(len(zero)), np.vstack([A_in, sign]),
                                        np.concatenate([b_in, np.zeros(len(nonneg))])), self.tol)
        return float(result.optimum), result.solution[:k]

    def _multiplier_signs(self) -> Tuple[List[int], List[int]]:
        bp = self.bp
        nonneg = [bp.p + i for i in range(bp.q)]
        zero = [bp.p + i for i in range(bp.q) if i not in self.active_G]
        return nonneg, zero

    def _dual_sp(self, piece: SensitivityPiece) -> Dict:
        u = self.upper
        R = self._reduction(piece)
        M = R.T @ np.hstack([u.J_H.T, u.J_G.T]).reshape(self.bp.N, self.bp.p + self.bp.q)
        residual, lam = self._residual_lp(R.T @ u.grad_F, M, *self._multiplier_signs())
        return {'residual': residual, 'lambda_H': lam[:self.bp.p].tolist(), 'lambda_G': lam[self.bp.p:].tolist(),
                'feasible': residual <= self.tol.kkt * (1.0 + np.linalg.norm(u.grad_F))}

    def _dual_fp(self, piece: SensitivityPiece) -> Dict:
        bp = self.bp
        u = self.upper
        extra = bp.r + bp.s
        upper_part = np.vstack([np.hstack([u.J_H.T, u.J_G.T]).reshape(bp.N, bp.p + bp.q),
                                np.zeros((extra, bp.p + bp.q))])
        M = np.hstack([upper_part, self._kkt_block(piece).T])
        base = np.concatenate([u.grad_F, np.zeros(extra)])
        residual, lam = self._residual_lp(base, M, *self._multiplier_signs())
        k = bp.p + bp.q
        return {'residual': residual, 'lambda_H': lam[:bp.p].tolist(), 'lambda_G': lam[bp.p:k].tolist(),
                'lambda_L': lam[k:k + bp.m].tolist(), 'lambda_h': lam[k + bp.m:k + bp.m + bp.r].tolist(),
                'lambda_g': lam[k + bp.m + bp.r:].tolist(),
                'feasible': residual <= self.tol.kkt * (1.0 + np.linalg.norm(u.grad_F))}

    def dual_multipliers(self, form: Form = Form.BOTH) -> DualReport:
        self.sens.require_exact()
        per_W = []
        for piece in self.sens.pieces():
            entry = {'W': list(piece.label)}
            if form in (Form.SP, Form.BOTH):
                entry['sp'] = self._dual_sp(piece)
            if form in (Form.FP, Form.BOTH):
                entry['fp'] = self._dual_fp(piece)
            if form == Form.BOTH and entry['sp']['feasible'] != entry['fp']['feasible']:
                raise EquivalenceViolation(f"Dual SP/FP solvability differs for W={list(piece.label)}")
            entry['feasible'] = (entry.get('sp') or entry['fp'])['feasible']
            per_W.append(entry)
        feasible = any(entry['feasible'] for entry in per_W)
        self.logger.info(f"Dual first-order system ({form.value}): {'feasible' if feasible else 'infeasible'}")
        return DualReport(feasible, form, per_W)

    # ---- second order ----------------------------------------------------

    def _upper_second_order_data(self, d_z: np.ndarray):
        u = self.upper
        quad_F = float(d_z @ u.hess_F @ d_z)
        quad_G = np.einsum('i,kij,j->k', d_z, u.hess_G, d_z)
        quad_H = np.einsum('i,kij,j->k', d_z, u.hess_H, d_z)
        T2 = self._K_G.second_order_tangent(u.G, u.J_G @ d_z) if self._K_G is not None else None
        return quad_F, quad_G, quad_H, T2

    def _second_order_lp(self, lift_const: np.ndarray, lift: np.ndarray, d_z: np.ndarray,
                         extra_eq=None, extra_in=None) -> float:
        """min F''(d_z, w_z) over v with w_z = lift_const + lift v, subject to upper second-order rows."""
        u = self.upper
        quad_F, quad_G, quad_H, T2 = self._upper_second_order_data(d_z)
        width = lift.shape[1]
        eq_rows = [u.J_H @ lift]
        eq_rhs = [-(u.J_H @ lift_const) - quad_H]
        in_rows = [np.zeros((0, width))]
        in_rhs = [np.zeros(0)]
        if T2 is not None:
            in_rows.append(T2.A @ u.J_G @ lift)
            in_rhs.append(T2.b - T2.A @ (u.J_G @ lift_const + quad_G))
            eq_rows.append(T2.C @ u.J_G @ lift)
            eq_rhs.append(T2.e - T2.C @ (u.J_G @ lift_const + quad_G))
        if extra_eq is not None:
            eq_rows.append(extra_eq[0])
            eq_rhs.append(extra_eq[1])
        if extra_in is not None:
            in_rows.append(extra_in[0])
            in_rhs.append(extra_in[1])
        lp = LinearProgram(u.grad_F @ lift, np.vstack(eq_rows), np.concatenate(eq_rhs),
                           np.vstack(in_rows), np.concatenate(in_rhs))
        value = _lp_value(lp_solve(lp, self.tol))
        return value + quad_F + float(u.grad_F @ lift_const) if np.isfinite(value) else value

    def second_order_value(self, d_x, form: Form = Form.BOTH) -> Dict:
        """Inner value min_w F-hat''(x*; d_x, w) for each requested form."""
        bp = self.bp
        n, m = bp.n, bp.m
        d_x = np.atleast_1d(np.asarray(d_x, dtype=float)).reshape(-1)
        jet = self.jet(d_x)
        d_z = np.concatenate([d_x, jet.y1])
        entry = {'d_x': d_x.tolist(), 'y1': jet.y1.tolist()}

        if not self.exact:
            piece = self.sens.numeric_second_order_piece(d_x)
            lift = np.vstack([np.eye(n), piece.slope[:m]])
            const = np.concatenate([np.zeros(n), piece.offset[:m]])
            entry['sp_value'] = self._second_order_lp(const, lift, d_z)
            entry['numeric'] = True
            if form in (Form.FP, Form.BOTH):
                entry['fp_skipped'] = FP_SKIPPED_NUMERIC
            entry['value'] = entry['sp_value']
            return entry

        systems = self.sens.second_order_systems(d_x)
        if form in (Form.SP, Form.BOTH):
            values = []
            for system in systems:
                piece = system.piece
                lift = np.vstack([np.eye(n), piece.slope[:m]])
                const = np.concatenate([np.zeros(n), piece.offset[:m]])
                constraint = (piece.cons_matrix, -piece.cons_offset)
                values.append(self._second_order_lp(const, lift, d_z, extra_in=constraint))
            entry['sp_value'] = min(values, default=float('inf'))
        if form in (Form.FP, Form.BOTH):
            width = bp.N + bp.r + bp.s
            values = []
            for system in systems:
                lift = np.zeros((bp.N, width))
                lift[:, :bp.N] = np.eye(bp.N)
                kkt_rows = (np.hstack([system.rhs, system.A]), -system.b2)
                branch = (system.fp_rows, -system.fp_offset)
                values.append(self._second_order_lp(np.zeros(bp.N), lift, d_z, extra_eq=kkt_rows, extra_in=branch))
            entry['fp_value'] = min(values, default=float('inf'))
        if form == Form.BOTH and not _values_agree(entry['sp_value'], entry['fp_value'], self.tol.equivalence):
            raise EquivalenceViolation(f"Second-order values differ along {d_x.tolist()}: "
                                       f"SP {entry['sp_value']} vs FP {entry['fp_value']}")
        entry['value'] = entry.get('sp_value', entry.get('fp_value'))
        entry['W2'] = [list(system.piece.signature) for system in systems]
        return entry

    def second_order_check(self, sampler: Optional[DirectionSampler] = None,
                           mode: SecondOrderMode = SecondOrderMode.SUFFICIENT,
                           form: Form = Form.BOTH) -> BilevelSecondOrderReport:
        sampler = sampler or DirectionSampler(self.settings.samples, self.settings.seed)
        first = self.first_order_check(sampler, form)
        if not first.holds:
            return BilevelSecondOrderReport(float('-inf'), SecondOrderStatus.NECESSARY_VIOLATED, mode,
                                            witnesses=[first.witness], caveats=['first-order condition fails'])
        report = BilevelSecondOrderReport(float('inf'), SecondOrderStatus.SUFFICIENT_CERTIFIED, mode,
                                          numeric=not first.exact, caveats=list(first.caveats))
        if report.numeric and form in (Form.FP, Form.BOTH):
            report.caveats.append(FP_SKIPPED_NUMERIC)
        for d in first.critical_directions:
            entry = self.second_order_value(d, form)
            report.directions.append(entry)
            report.margin = min(report.margin, entry['value'])
            if entry['value'] <= self.tol.feasibility:
                report.witnesses.append(d)
        if not first.critical_directions:
            report.caveats.append("no critical directions found: growth certified vacuously")
        if report.margin > self.tol.feasibility:
            report.status = SecondOrderStatus.SUFFICIENT_CERTIFIED
        elif report.margin >= -self.tol.feasibility:
            report.status = SecondOrderStatus.NECESSARY_ONLY
        else:
            report.status = SecondOrderStatus.NECESSARY_VIOLATED
        self.logger.info(f"Bilevel second-order check: margin {report.margin}, status {report.status.value}")
        return report

    # ---- growth probe ----------------------------------------------------

    def growth_probe(self, radius: Optional[float] = None, n: Optional[int] = None, seed: Optional[int] = None,
                     margin: Optional[float] = None) -> GrowthReport:
        """Estimate gamma with F(x, y(x)) >= F* + gamma |x - x*|^2 on upper-feasible samples."""
        bp = self.bp
        radius = self.settings.growth_radius if radius is None else radius
        n = self.settings.samples if n is None else n
        rng = np.random.default_rng(self.settings.seed if seed is None else seed)
        F_star = self.upper.F
        gamma = float('inf')
        violations: List[List[float]] = []
        failures = feasible = 0
        for _ in range(n):
            g = rng.standard_normal(bp.n)
            x = bp.x_star + g / np.linalg.norm(g) * radius * rng.uniform() ** (1.0 / bp.n)
            dist = np.linalg.norm(x - bp.x_star)
            if dist <= 1e-12:
                continue
            try:
                point = self.lower.kkt_track(x)
            except TrackingError as e:
                self.logger.warning(f"Tracking failed at x={x.tolist()}: {e}")
                failures += 1
                continue
            if not bp.upper_feasible(x, point.y):
                continue
            feasible += 1
            ratio = (float(bp.F.eval(bp.z(x, point.y))[0]) - F_star) / dist ** 2
            gamma = min(gamma, ratio)
            if ratio <= GROWTH_VIOLATION_LEVEL:
                violations.append(x.tolist())
        if failures > MAX_TRACKING_FAILURE_RATE * n:
            raise TrackingError(f"Lower-level tracking failed on {failures} of {n} samples")
        check = None
        if margin is not None and np.isfinite(margin):
            check = bool(gamma >= GROWTH_MARGIN_FACTOR * margin)
        self.logger.info(f"Growth probe: gamma_hat={gamma:.4g}, {len(violations)} violations, "
                         f"{feasible} feasible of {n}")
        return GrowthReport(gamma, violations, n, feasible, failures, check)


def gmfcq_check(bp: BilevelProblem, form: Form = Form.BOTH,
                settings: Optional[VerificationSettings] = None) -> GmfcqReport:
    return BilevelChecker(bp, settings).gmfcq_check(form)


def first_order_check_bilevel(bp: BilevelProblem, sampler: Optional[DirectionSampler] = None,
                              settings: Optional[VerificationSettings] = None) -> BilevelFirstOrderReport:
    return BilevelChecker(bp, settings).first_order_check(sampler)


def dual_multipliers(bp: BilevelProblem, form: Form = Form.BOTH,
                     settings: Optional[VerificationSettings] = None) -> DualReport:
    return BilevelChecker(bp, settings).dual_multipliers(form)


def second_order_check_bilevel(bp: BilevelProblem, sampler: Optional[DirectionSampler] = None,
                               mode: SecondOrderMode = SecondOrderMode.SUFFICIENT,
                               settings: Optional[VerificationSettings] = None) -> BilevelSecondOrderReport:
    return BilevelChecker(bp, settings).second_order_check(sampler, mode)


def growth_probe(bp: BilevelProblem, radius: Optional[float] = None, n: Optional[int] = None,
                 seed: Optional[int] = None, settings: Optional[VerificationSettings] = None) -> GrowthReport:
    return BilevelChecker(bp, settings).growth_probe(radius, n, seed)
