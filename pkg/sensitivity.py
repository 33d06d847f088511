#!/usr/bin/env python3
"""
Directional derivatives of the lower-level solution mapping.

Under SSOSC and LICQ the KKT map is strongly semismooth with every
element A(x, W) of its generalized Jacobian invertible. W runs over the
0/1 diagonals of the B-subdifferential of the projection onto R^s_-;
each W gives a linear piece  (y', mu', xi') = -H(x, W) d_x  valid on the
cone of directions whose branch signs agree with W.

Without LICQ (but with MFCQ, SSOSC and CRCQ) the mapping is still
directionally differentiable; we then estimate y' and y'' from tracked
KKT points and flag the result as numeric.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from bilevel_problem import BilevelProblem, CQReport, KKTPoint, LowerLevelAnalyzer, sensitivity_matrix
from errors import (ScaleExceededError, SensitivityInconsistencyError, SensitivityRefusedError, SingularMatrixError)
from expressions import AffinePiece
from linalg_lp import solve_linear
from verification_config import VerificationSettings

MAX_DEGENERATE = 16
NUMERIC_BASE_STEP = 1e-2


@dataclass
class SensitivityPiece:
    """A(x*, W), H(x*, W) with A H = rhs, valid where branch_rows @ d_x <= 0."""
    W: np.ndarray
    A: np.ndarray
    H: np.ndarray
    rhs: np.ndarray
    branch_rows: np.ndarray
    degenerate: Tuple[int, ...] = ()

    def direction(self, d_x) -> np.ndarray:
        return -self.H @ np.asarray(d_x, dtype=float).reshape(-1)

    def valid_for(self, d_x, tol: float) -> bool:
        d_x = np.asarray(d_x, dtype=float).reshape(-1)
        return bool(np.max(self.branch_rows @ d_x, initial=0.0) <= tol * (1.0 + np.linalg.norm(d_x)))

    @property
    def label(self) -> Tuple[int, ...]:
        return tuple(int(w) for w in self.W)

    def to_dict(self) -> Dict:
        return {'W': list(self.label), 'A': self.A.tolist(), 'H': self.H.tolist(),
                'degenerate': list(self.degenerate)}


@dataclass
class SecondOrderSystem:
    """Second-order KKT rows for one W2 branch.

    FP form, in v = (w_x, w_y, w_mu, w_xi):  [rhs, A] v = -b2  and
    fp_rows v + fp_offset <= 0.  SP form: `piece` gives (w_y, w_mu, w_xi)
    as an affine function of w_x with its validity constraints.
    """
    W: np.ndarray
    A: np.ndarray
    rhs: np.ndarray
    b2: np.ndarray
    fp_rows: np.ndarray
    fp_offset: np.ndarray
    piece: AffinePiece


@dataclass
class SolutionMapJet:
    d_x: np.ndarray
    w_x: Optional[np.ndarray]
    y1: np.ndarray
    mu1: np.ndarray
    xi1: np.ndarray
    y2: Optional[np.ndarray] = None
    mu2: Optional[np.ndarray] = None
    xi2: Optional[np.ndarray] = None
    piece_trace: Dict[str, List[List[int]]] = field(default_factory=dict)
    numeric: bool = False

    @property
    def first_order(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y1, self.mu1, self.xi1

    def to_dict(self) -> Dict:
        def listed(v):
            return None if v is None else v.tolist()

        return {
            'd_x': self.d_x.tolist(), 'w_x': listed(self.w_x),
            'y1': self.y1.tolist(), 'mu1': self.mu1.tolist(), 'xi1': self.xi1.tolist(),
            'y2': listed(self.y2), 'mu2': listed(self.mu2), 'xi2': listed(self.xi2),
            'piece_trace': self.piece_trace, 'numeric': self.numeric,
        }


class SensitivityAnalyzer:
    """Exact piecewise sensitivity at a reference KKT point, with a numeric fallback."""

    def __init__(self, bp: BilevelProblem, settings: Optional[VerificationSettings] = None,
                 kkt: Optional[KKTPoint] = None, cq: Optional[CQReport] = None):
        self.bp = bp
        self.settings = settings or VerificationSettings()
        self.tol = self.settings.effective_tolerances()
        self.logger = logging.getLogger(__name__)
        self.lower = LowerLevelAnalyzer(bp, self.settings)
        self.kkt = kkt or self.lower.reference_kkt()
        self._cq = cq
        self._pieces: Optional[List[SensitivityPiece]] = None
        self.derivs = bp.lower_derivatives(bp.x_star, self.kkt.y, self.kkt.mu, self.kkt.xi)

    @property
    def cq(self) -> CQReport:
        if self._cq is None:
            self._cq = self.lower.cq_report()
        return self._cq

    @property
    def exact(self) -> bool:
        return self.cq.exact_route

    @property
    def numeric_available(self) -> bool:
        return self.cq.numeric_route and self.settings.allow_finite_differences

    def require_exact(self) -> None:
        if self.exact:
            return
        missing = [name for name, ok in (('SSOSC (A2)', self.cq.a2), ('LICQ (A4)', self.cq.a4)) if not ok]
        raise SensitivityRefusedError(f"Exact sensitivity needs SSOSC and LICQ; failing: {', '.join(missing)}")

    @property
    def z_values(self) -> np.ndarray:
        return self.derivs.g + self.kkt.xi

    def enumerate_W(self) -> List[np.ndarray]:
        """0/1 diagonals of the B-subdifferential of the projection at g + xi."""
        z = self.z_values
        tol = self.tol.degeneracy
        degenerate = [i for i in range(self.bp.s) if abs(z[i]) <= tol]
        if len(degenerate) > MAX_DEGENERATE:
            raise ScaleExceededError(f"{len(degenerate)} degenerate complementarity indices exceed {MAX_DEGENERATE}")
        base = (z < -tol).astype(float)
        matrices = []
        for choice in itertools.product((0.0, 1.0), repeat=len(degenerate)):
            W = base.copy()
            W[degenerate] = choice
            matrices.append(W)
        return matrices

    def _rhs(self, W: np.ndarray) -> np.ndarray:
        bp, d = self.bp, self.derivs
        x, y = slice(0, bp.n), slice(bp.n, bp.N)
        return np.vstack([d.hess_L[y, x],
                          d.J_h[:, x].reshape(bp.r, bp.n),
                          np.diag(1.0 - W) @ d.J_g[:, x].reshape(bp.s, bp.n)])

    def assemble(self, W) -> SensitivityPiece:
        self.require_exact()
        bp, d = self.bp, self.derivs
        W = np.asarray(W, dtype=float).reshape(-1)
        A = sensitivity_matrix(bp, d, W)
        rhs = self._rhs(W)
        try:
            H = solve_linear(A, rhs, self.tol).reshape(A.shape[0], bp.n)
        except SingularMatrixError as e:
            raise SingularMatrixError(f"A(x*, W) singular for W={W.astype(int).tolist()}: {e}") from e
        residual = np.max(np.abs(A @ H - rhs), initial=0.0)
        if residual > self.tol.solve_residual * (1.0 + np.max(np.abs(rhs), initial=0.0)):
            raise SingularMatrixError(f"A H - rhs residual {residual:.3e} for W={W.astype(int).tolist()}")

        degenerate = tuple(i for i in range(bp.s) if abs(self.z_values[i]) <= self.tol.degeneracy)
        m, r = bp.m, bp.r
        rows = []
        for i in degenerate:
            coef = d.J_g[i, :bp.n] - d.J_g[i, bp.n:] @ H[:m] - H[m + r + i]
            rows.append(coef if W[i] == 1.0 else -coef)
        branch = np.array(rows).reshape(len(rows), bp.n)
        return SensitivityPiece(W, A, H, rhs, branch, degenerate)

    def pieces(self) -> List[SensitivityPiece]:
        if self._pieces is None:
            self._pieces = [self.assemble(W) for W in self.enumerate_W()]
            self.logger.debug(f"{len(self._pieces)} sensitivity pieces at the reference point")
        return self._pieces

    def _agree(self, candidates: List[Tuple[np.ndarray, SensitivityPiece]], what: str) -> np.ndarray:
        if not candidates:
            raise SensitivityInconsistencyError(f"No W piece accepts the {what}")
        first = candidates[0][0]
        for value, piece in candidates[1:]:
            if np.max(np.abs(value - first)) > 1e-8 * (1.0 + np.max(np.abs(first))):
                raise SensitivityInconsistencyError(
                    f"Pieces {candidates[0][1].label} and {piece.label} disagree on the {what}")
        return first

    def accepting_pieces(self, d_x) -> List[SensitivityPiece]:
        return [piece for piece in self.pieces() if piece.valid_for(d_x, self.tol.feasibility)]

    def dd1(self, d_x) -> SolutionMapJet:
        """(y', mu', xi')(x*; d_x) from the accepting W pieces."""
        bp = self.bp
        d_x = np.atleast_1d(np.asarray(d_x, dtype=float)).reshape(-1)
        accepted = self.accepting_pieces(d_x)
        triple = self._agree([(piece.direction(d_x), piece) for piece in accepted], f"direction {d_x.tolist()}")
        m, r = bp.m, bp.r
        return SolutionMapJet(d_x, None, triple[:m], triple[m:m + r], triple[m + r:],
                              piece_trace={'first_order': [list(p.label) for p in accepted]})

    def _third_terms(self, d_z: np.ndarray, jet: SolutionMapJet) -> np.ndarray:
        """y-part of D^3 L[d, d, .] + 2 D^2 (dmu h + dxi g)[d, .]."""
        bp, kkt = self.bp, self.kkt
        z = bp.z(bp.x_star, kkt.y)
        options = {'step': self.settings.fd_step, 'allow_finite_differences': self.settings.allow_finite_differences}
        try:
            total = bp.f.third_action(z, d_z, **options)[0]
            if bp.r:
                total = total + kkt.mu @ bp.h.third_action(z, d_z, **options)
                total = total + 2.0 * np.einsum('k,kij,j->i', jet.mu1, bp.h.hessians(z), d_z)
            if bp.s:
                total = total + kkt.xi @ bp.g.third_action(z, d_z, **options)
                total = total + 2.0 * np.einsum('k,kij,j->i', jet.xi1, bp.g.hessians(z), d_z)
        except ValueError as e:
            raise SensitivityRefusedError(f"Third-order data unavailable: {e}") from e
        return total[bp.n:]

    def second_order_systems(self, d_x) -> List[SecondOrderSystem]:
        """Branch systems for (w_y, w_mu, w_xi) given d_x, one per admissible W2."""
        self.require_exact()
        bp, d = self.bp, self.derivs
        n, m, r, s = bp.n, bp.m, bp.r, bp.s
        jet = self.dd1(d_x)
        d_z = np.concatenate([jet.d_x, jet.y1])
        z = bp.z(bp.x_star, self.kkt.y)
        quad_h = np.einsum('i,kij,j->k', d_z, bp.h.hessians(z), d_z) if r else np.zeros(0)
        quad_g = np.einsum('i,kij,j->k', d_z, bp.g.hessians(z), d_z) if s else np.zeros(0)
        term_c = self._third_terms(d_z, jet)

        tol = self.tol.degeneracy
        zeta = self.z_values
        dzeta = d.J_g @ d_z + jet.xi1 if s else np.zeros(0)
        choices = []
        for i in range(s):
            if zeta[i] < -tol or (abs(zeta[i]) <= tol and dzeta[i] < -tol):
                choices.append((1.0,))
            elif zeta[i] > tol or dzeta[i] > tol:
                choices.append((0.0,))
            else:
                choices.append((0.0, 1.0))
        free = [i for i in range(s) if len(choices[i]) == 2]

        systems = []
        for W2 in itertools.product(*choices):
            W2 = np.array(W2, dtype=float)
            A = sensitivity_matrix(bp, d, W2)
            rhs = self._rhs(W2)
            b2 = np.concatenate([term_c, quad_h, (1.0 - W2) * quad_g])
            offset = -solve_linear(A, b2, self.tol)
            slope = -solve_linear(A, rhs, self.tol).reshape(A.shape[0], n)
            rows, consts, fp_rows, fp_consts = [], [], [], []
            for i in free:
                if W2[i] == 1.0:
                    # a_i = quad_g + grad g_i . (w_x, w_y) <= 0
                    rows.append(d.J_g[i, :n] + d.J_g[i, n:] @ slope[:m])
                    consts.append(quad_g[i] + d.J_g[i, n:] @ offset[:m])
                    fp_rows.append(np.concatenate([d.J_g[i], np.zeros(r + s)]))
                    fp_consts.append(quad_g[i])
                else:
                    # w_xi_i >= 0
                    rows.append(-slope[m + r + i])
                    consts.append(-offset[m + r + i])
                    unit = np.zeros(n + m + r + s)
                    unit[n + m + r + i] = -1.0
                    fp_rows.append(unit)
                    fp_consts.append(0.0)
            piece = AffinePiece(offset, slope, np.array(rows).reshape(len(rows), n), np.array(consts),
                                tuple(int(w) for w in W2))
            systems.append(SecondOrderSystem(W2, A, rhs, b2,
                                             np.array(fp_rows).reshape(len(fp_rows), n + m + r + s),
                                             np.array(fp_consts), piece))
        return systems

    def dd2(self, d_x, w_x) -> SolutionMapJet:
        """(y'', mu'', xi'')(x*; d_x, w_x) with the same acceptance discipline as dd1."""
        bp = self.bp
        d_x = np.atleast_1d(np.asarray(d_x, dtype=float)).reshape(-1)
        w_x = np.atleast_1d(np.asarray(w_x, dtype=float)).reshape(-1)
        jet = self.dd1(d_x)
        candidates = []
        for system in self.second_order_systems(d_x):
            piece = system.piece
            if np.max(piece.cons_matrix @ w_x + piece.cons_offset, initial=0.0) > \
                    self.tol.feasibility * (1.0 + np.linalg.norm(w_x)):
                continue
            candidates.append((piece.offset + piece.slope @ w_x, piece))
        if not candidates:
            raise SensitivityInconsistencyError(f"No W2 branch accepts w_x={w_x.tolist()}")
        first = candidates[0][0]
        for value, piece in candidates[1:]:
            if np.max(np.abs(value - first)) > 1e-8 * (1.0 + np.max(np.abs(first))):
                raise SensitivityInconsistencyError(
                    f"W2 branches {candidates[0][1].signature} and {piece.signature} disagree")
        m, r = bp.m, bp.r
        jet.w_x = w_x
        jet.y2, jet.mu2, jet.xi2 = first[:m], first[m:m + r], first[m + r:]
        jet.piece_trace['second_order'] = [list(piece.signature) for _, piece in candidates]
        return jet

    # ---- numeric route ---------------------------------------------------

    def numeric_jet(self, d_x, w_x=None) -> SolutionMapJet:
        """Fit y(x* + t d + t^2/2 w) = y* + t y' + t^2/2 y'' + O(t^3) on t = 1e-2 * 2^-k."""
        if not self.settings.allow_finite_differences:
            raise SensitivityRefusedError("Numeric sensitivity needs finite differences, which are disabled")
        bp = self.bp
        d_x = np.atleast_1d(np.asarray(d_x, dtype=float)).reshape(-1)
        w = np.zeros(bp.n) if w_x is None else np.atleast_1d(np.asarray(w_x, dtype=float)).reshape(-1)
        tau = 2.0 ** -np.arange(4)
        steps = NUMERIC_BASE_STEP * tau
        points = []
        start = self.kkt
        for t in steps:
            start = self.lower.kkt_track(bp.x_star + t * d_x + 0.5 * t ** 2 * w, start)
            points.append(np.concatenate([start.y, start.mu, start.xi]))
        points = np.array(points)
        m, r = bp.m, bp.r
        t0 = NUMERIC_BASE_STEP
        # y has the known limit y*; multipliers may jump to another vertex of the polytope
        V_y = np.column_stack([tau, 0.5 * tau ** 2, tau ** 3])
        coef_y = np.linalg.lstsq(V_y, points[:, :m] - self.kkt.y, rcond=None)[0]
        coef_y[0] /= t0
        coef_y[1] /= t0 ** 2
        V = np.column_stack([np.ones_like(tau), tau, 0.5 * tau ** 2, tau ** 3])
        coef_mult = np.linalg.solve(V, points[:, m:])
        coef_mult[1] /= t0
        coef_mult[2] /= t0 ** 2
        jet = SolutionMapJet(d_x, None if w_x is None else w, coef_y[0], coef_mult[1, :r], coef_mult[1, r:],
                             numeric=True, piece_trace={'first_order': [], 'second_order': []})
        if w_x is not None:
            jet.y2, jet.mu2, jet.xi2 = coef_y[1], coef_mult[2, :r], coef_mult[2, r:]
        self.logger.debug(f"numeric jet along {d_x.tolist()}: y' = {jet.y1.tolist()}")
        return jet

    def numeric_second_order_piece(self, d_x) -> AffinePiece:
        """(w_y, w_mu, w_xi) as an affine fit in w_x from numeric jets at 0 and the unit vectors."""
        n = self.bp.n
        base = self.numeric_jet(d_x, np.zeros(n))

        def stacked(jet):
            return np.concatenate([jet.y2, jet.mu2, jet.xi2])

        offset = stacked(base)
        slope = np.column_stack([stacked(self.numeric_jet(d_x, e)) - offset for e in np.eye(n)])
        return AffinePiece(offset, slope, np.zeros((0, n)), np.zeros(0), ('numeric',))

    def solution_jet(self, d_x, w_x=None) -> SolutionMapJet:
        """Exact jet when available, numeric under MFCQ + SSOSC + CRCQ, else refuse."""
        if self.exact:
            return self.dd1(d_x) if w_x is None else self.dd2(d_x, w_x)
        if self.numeric_available:
            self.logger.warning("LICQ fails at y*: using numeric derivatives of the tracked solution")
            return self.numeric_jet(d_x, w_x)
        self.require_exact()


def enumerate_W(bp: BilevelProblem, kkt: Optional[KKTPoint] = None,
                settings: Optional[VerificationSettings] = None) -> List[np.ndarray]:
    return SensitivityAnalyzer(bp, settings, kkt).enumerate_W()


def assemble_sensitivity(bp: BilevelProblem, kkt: Optional[KKTPoint], W,
                         settings: Optional[VerificationSettings] = None) -> SensitivityPiece:
    return SensitivityAnalyzer(bp, settings, kkt).assemble(W)


def solution_map_dd1(bp: BilevelProblem, kkt: Optional[KKTPoint], d_x,
                     settings: Optional[VerificationSettings] = None) -> SolutionMapJet:
    return SensitivityAnalyzer(bp, settings, kkt).solution_jet(d_x)


def solution_map_dd2(bp: BilevelProblem, kkt: Optional[KKTPoint], d_x, w_x,
                     settings: Optional[VerificationSettings] = None) -> SolutionMapJet:
    return SensitivityAnalyzer(bp, settings, kkt).solution_jet(d_x, w_x)
