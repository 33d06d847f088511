#!/usr/bin/env python3
"""
Bilevel problem data and lower-level KKT analysis.

    min_x F(x, y)  s.t.  G(x, y) <= 0,  H(x, y) = 0,  y in S(x)

where S(x) is the local solution set of the lower problem

    min_y f(x, y)  s.t.  g(x, y) <= 0,  h(x, y) = 0.

All expressions take the stacked vector z = (x, y). This module holds the
multiplier polytope, the lower-level constraint qualification report and
a semismooth Newton tracker for the lower KKT system.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import DimensionMismatchError, InfeasibleReferenceError, SingularMatrixError, TrackingError
from expressions import PiecewiseExpr
from linalg_lp import (Definiteness, LinearProgram, lp_solve, null_space_basis, pd_on_subspace, rank, solve_linear,
                       vertex_enumerate)
from verification_config import DEFAULT_TOLERANCES, Tolerances, VerificationSettings

MAX_MULTIPLIER_VERTICES = 64
MAX_NEWTON_ITERATIONS = 50
MAX_CONTINUATION_DEPTH = 4
CRCQ_SAMPLES = 16
MAX_CRCQ_INDICES = 10


@dataclass
class LowerDerivatives:
    """Lower-level data at (x, y, mu, xi); Jacobians are over z = (x, y)."""
    grad_f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    J_g: np.ndarray
    J_h: np.ndarray
    hess_L: np.ndarray


@dataclass
class UpperDerivatives:
    F: float
    grad_F: np.ndarray
    hess_F: np.ndarray
    G: np.ndarray
    J_G: np.ndarray
    hess_G: np.ndarray
    H: np.ndarray
    J_H: np.ndarray
    hess_H: np.ndarray


@dataclass
class KKTPoint:
    y: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    residual: float

    def to_dict(self) -> Dict:
        return {'y': self.y.tolist(), 'mu': self.mu.tolist(), 'xi': self.xi.tolist(), 'residual': self.residual}


@dataclass
class BilevelProblem:
    F: PiecewiseExpr
    f: PiecewiseExpr
    x_star: np.ndarray
    y_star: np.ndarray
    G: Optional[PiecewiseExpr] = None
    H: Optional[PiecewiseExpr] = None
    g: Optional[PiecewiseExpr] = None
    h: Optional[PiecewiseExpr] = None
    mu_star: Optional[np.ndarray] = None
    xi_star: Optional[np.ndarray] = None
    tol: Tolerances = DEFAULT_TOLERANCES

    def __post_init__(self):
        self.x_star = np.atleast_1d(np.asarray(self.x_star, dtype=float)).reshape(-1)
        self.y_star = np.atleast_1d(np.asarray(self.y_star, dtype=float)).reshape(-1)
        N = self.N
        for name in ('F', 'f', 'G', 'H', 'g', 'h'):
            expr = getattr(self, name)
            if expr is None:
                continue
            if expr.input_dim != N:
                raise DimensionMismatchError(f"{name} takes {expr.input_dim} inputs, (x, y) has {N}")
            if not expr.is_smooth:
                raise DimensionMismatchError(f"{name} must be smooth (no selection atoms)")
        for name in ('F', 'f'):
            if getattr(self, name).output_dim != 1:
                raise DimensionMismatchError(f"{name} must be scalar")
        if self.mu_star is not None:
            self.mu_star = np.asarray(self.mu_star, dtype=float).reshape(-1)
            if self.mu_star.size != self.r:
                raise DimensionMismatchError(f"mu* has {self.mu_star.size} entries, h has {self.r}")
        if self.xi_star is not None:
            self.xi_star = np.asarray(self.xi_star, dtype=float).reshape(-1)
            if self.xi_star.size != self.s:
                raise DimensionMismatchError(f"xi* has {self.xi_star.size} entries, g has {self.s}")
        g, h = self.lower_constraints(self.x_star, self.y_star)
        violation = max(np.max(g, initial=0.0), np.max(np.abs(h), initial=0.0))
        if violation > self.tol.feasibility:
            raise InfeasibleReferenceError(f"y* is not lower-feasible at x* (violation {violation:.3e})")

    @property
    def n(self) -> int:
        return self.x_star.size

    @property
    def m(self) -> int:
        return self.y_star.size

    @property
    def N(self) -> int:
        return self.n + self.m

    @staticmethod
    def _size(expr: Optional[PiecewiseExpr]) -> int:
        return 0 if expr is None else expr.output_dim

    @property
    def p(self) -> int:
        return self._size(self.H)

    @property
    def q(self) -> int:
        return self._size(self.G)

    @property
    def r(self) -> int:
        return self._size(self.h)

    @property
    def s(self) -> int:
        return self._size(self.g)

    def z(self, x, y) -> np.ndarray:
        return np.concatenate([np.asarray(x, dtype=float).reshape(-1), np.asarray(y, dtype=float).reshape(-1)])

    def _value(self, expr, z) -> np.ndarray:
        return np.zeros(0) if expr is None else expr.eval(z)

    def _jacobian(self, expr, z) -> np.ndarray:
        return np.zeros((0, self.N)) if expr is None else expr.jacobian(z)

    def _hessians(self, expr, z) -> np.ndarray:
        return np.zeros((0, self.N, self.N)) if expr is None else expr.hessians(z)

    def lower_constraints(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        z = self.z(x, y)
        return self._value(self.g, z), self._value(self.h, z)

    def lower_derivatives(self, x, y, mu, xi) -> LowerDerivatives:
        z = self.z(x, y)
        hess = self.f.hessians(z)[0]
        if self.r:
            hess = hess + np.einsum('k,kij->ij', mu, self.h.hessians(z))
        if self.s:
            hess = hess + np.einsum('k,kij->ij', xi, self.g.hessians(z))
        return LowerDerivatives(self.f.jacobian(z)[0], self._value(self.g, z), self._value(self.h, z),
                                self._jacobian(self.g, z), self._jacobian(self.h, z), hess)

    def upper_derivatives(self, x, y) -> UpperDerivatives:
        z = self.z(x, y)
        return UpperDerivatives(float(self.F.eval(z)[0]), self.F.jacobian(z)[0], self.F.hessians(z)[0],
                                self._value(self.G, z), self._jacobian(self.G, z), self._hessians(self.G, z),
                                self._value(self.H, z), self._jacobian(self.H, z), self._hessians(self.H, z))

    def upper_feasible(self, x, y, tol: Optional[float] = None) -> bool:
        tol = self.tol.feasibility if tol is None else tol
        z = self.z(x, y)
        G = self._value(self.G, z)
        H = self._value(self.H, z)
        return bool(np.max(G, initial=-np.inf) <= tol and np.max(np.abs(H), initial=0.0) <= tol)

    def kkt_map(self, x, y, mu, xi) -> np.ndarray:
        """[grad_y L; h; g - min(g + xi, 0)]; zero exactly at KKT points."""
        d = self.lower_derivatives(x, y, mu, xi)
        m_cols = slice(self.n, self.N)
        grad_L = d.grad_f[m_cols] + d.J_h[:, m_cols].T @ mu + d.J_g[:, m_cols].T @ xi
        return np.concatenate([grad_L, d.h, d.g - np.minimum(d.g + xi, 0.0)])

    def kkt_residual(self, x, y, mu, xi) -> float:
        return float(np.max(np.abs(self.kkt_map(x, y, mu, xi)), initial=0.0))

    def to_dict(self) -> Dict:
        return {
            'x_star': self.x_star.tolist(),
            'y_star': self.y_star.tolist(),
            'mu_star': None if self.mu_star is None else self.mu_star.tolist(),
            'xi_star': None if self.xi_star is None else self.xi_star.tolist(),
            'dims': {'n': self.n, 'm': self.m, 'p': self.p, 'q': self.q, 'r': self.r, 's': self.s},
        }


@dataclass
class MultiplierPolytope:
    """Lambda = {(mu, xi): A_eq v = b_eq, A_in v <= b_in}, v = (mu, xi)."""
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_in: np.ndarray
    b_in: np.ndarray
    vertices: List[Tuple[np.ndarray, np.ndarray]]
    pointed: bool = True

    def contains(self, mu, xi, tol: float = DEFAULT_TOLERANCES.kkt) -> bool:
        v = np.concatenate([mu, xi])
        return bool(np.max(np.abs(self.A_eq @ v - self.b_eq), initial=0.0) <= tol
                    and np.max(self.A_in @ v - self.b_in, initial=0.0) <= tol)

    def to_dict(self) -> Dict:
        return {
            'vertices': [{'mu': mu.tolist(), 'xi': xi.tolist()} for mu, xi in self.vertices],
            'pointed': self.pointed,
        }


@dataclass
class CQReport:
    active: Tuple[int, ...]
    strongly_active: Tuple[int, ...]
    mfcq_holds: bool
    mfcq_witness: np.ndarray
    licq_holds: bool
    licq_rank: int
    crcq_consistent: Optional[bool]
    crcq_samples: int
    ssosc_holds: bool
    ssosc_margin: float
    ssosc_vertices: List[Dict] = field(default_factory=list)
    caveats: List[str] = field(default_factory=list)

    @property
    def a1(self) -> bool:
        return self.mfcq_holds

    @property
    def a2(self) -> bool:
        return self.ssosc_holds

    @property
    def a3(self) -> bool:
        return bool(self.crcq_consistent)

    @property
    def a4(self) -> bool:
        return self.licq_holds

    @property
    def exact_route(self) -> bool:
        """Exact piecewise sensitivity needs SSOSC and LICQ."""
        return self.a2 and self.a4

    @property
    def numeric_route(self) -> bool:
        return self.a1 and self.a2 and self.a3 and not self.a4

    def to_dict(self) -> Dict:
        return {
            'active': list(self.active),
            'strongly_active': list(self.strongly_active),
            'mfcq': {'holds': self.mfcq_holds, 'witness': self.mfcq_witness.tolist()},
            'licq': {'holds': self.licq_holds, 'rank': self.licq_rank},
            'crcq_probe': {'consistent_ranks': self.crcq_consistent, 'sample_count': self.crcq_samples},
            'ssosc': {'holds': self.ssosc_holds, 'margin': self.ssosc_margin, 'per_vertex': self.ssosc_vertices},
            'caveats': list(self.caveats),
        }


class LowerLevelAnalyzer:
    """Multiplier polytope, CQ report and KKT tracking for the lower problem."""

    def __init__(self, bp: BilevelProblem, settings: Optional[VerificationSettings] = None):
        self.bp = bp
        self.settings = settings or VerificationSettings()
        self.tol = self.settings.effective_tolerances()
        self.logger = logging.getLogger(__name__)
        self._polytope: Optional[MultiplierPolytope] = None
        self._reference: Optional[KKTPoint] = None

    @property
    def y_cols(self) -> slice:
        return slice(self.bp.n, self.bp.N)

    def active_set(self, x=None, y=None) -> Tuple[int, ...]:
        x = self.bp.x_star if x is None else x
        y = self.bp.y_star if y is None else y
        g, _ = self.bp.lower_constraints(x, y)
        return tuple(int(i) for i in np.flatnonzero(g >= -self.tol.feasibility))

    def _stationarity_rows(self, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rows of grad_y L = 0 as a linear system in (mu, xi), plus g(x, y)."""
        bp = self.bp
        d = bp.lower_derivatives(x, y, np.zeros(bp.r), np.zeros(bp.s))
        A = np.hstack([d.J_h[:, self.y_cols].T, d.J_g[:, self.y_cols].T]).reshape(bp.m, bp.r + bp.s)
        return A, -d.grad_f[self.y_cols], d.g

    def min_residual_multiplier(self, x, y) -> Tuple[np.ndarray, np.ndarray, float]:
        """Multiplier minimizing the L1 stationarity residual, with xi = 0 off the active set."""
        bp = self.bp
        A, rhs, g = self._stationarity_rows(x, y)
        k = bp.r + bp.s
        m = bp.m
        inactive = [i for i in range(bp.s) if g[i] < -self.tol.feasibility]
        # variables (mu, xi, slack)
        c = np.concatenate([np.zeros(k), np.ones(m)])
        A_in = np.vstack([
            np.hstack([A, -np.eye(m)]),
            np.hstack([-A, -np.eye(m)]),
            np.hstack([np.zeros((bp.s, bp.r)), -np.eye(bp.s), np.zeros((bp.s, m))]),
        ])
        b_in = np.concatenate([rhs, -rhs, np.zeros(bp.s)])
        A_eq = np.zeros((len(inactive), k + m))
        for row, i in enumerate(inactive):
            A_eq[row, bp.r + i] = 1.0
        result = lp_solve(LinearProgram(c, A_eq, np.zeros(len(inactive)), A_in, b_in), self.tol)
        v = result.solution[:k]
        return v[:bp.r], v[bp.r:], float(result.optimum)

    def reference_kkt(self) -> KKTPoint:
        if self._reference is not None:
            return self._reference
        bp = self.bp
        if bp.mu_star is not None or bp.xi_star is not None:
            mu = bp.mu_star if bp.mu_star is not None else np.zeros(bp.r)
            xi = bp.xi_star if bp.xi_star is not None else np.zeros(bp.s)
            residual = bp.kkt_residual(bp.x_star, bp.y_star, mu, xi)
            if residual <= self.tol.kkt:
                self._reference = KKTPoint(bp.y_star.copy(), mu, xi, residual)
                return self._reference
            self.logger.warning(f"Given multipliers have KKT residual {residual:.3e}; re-estimating")
        mu, xi, _ = self.min_residual_multiplier(bp.x_star, bp.y_star)
        residual = bp.kkt_residual(bp.x_star, bp.y_star, mu, xi)
        if residual > self.tol.kkt:
            raise InfeasibleReferenceError(f"y* is not a KKT point of the lower problem (residual {residual:.3e})")
        self._reference = KKTPoint(bp.y_star.copy(), mu, xi, residual)
        return self._reference

    def multiplier_polytope(self) -> MultiplierPolytope:
        if self._polytope is not None:
            return self._polytope
        bp = self.bp
        reference = self.reference_kkt()
        A, rhs, g = self._stationarity_rows(bp.x_star, bp.y_star)
        k = bp.r + bp.s
        inactive = [i for i in range(bp.s) if g[i] < -self.tol.feasibility]
        fix = np.zeros((len(inactive), k))
        for row, i in enumerate(inactive):
            fix[row, bp.r + i] = 1.0
        A_eq = np.vstack([A, fix])
        b_eq = np.concatenate([rhs, np.zeros(len(inactive))])
        A_in = np.hstack([np.zeros((bp.s, bp.r)), -np.eye(bp.s)])
        b_in = np.zeros(bp.s)
        points = vertex_enumerate(A_eq, b_eq, A_in, b_in, bound=MAX_MULTIPLIER_VERTICES, n=k, tol=self.tol)
        pointed = bool(points)
        if not points:
            # lineality space in mu: fall back to the reference multiplier
            points = [np.concatenate([reference.mu, reference.xi])]
        vertices = [(v[:bp.r], v[bp.r:]) for v in points]
        self._polytope = MultiplierPolytope(A_eq, b_eq, A_in, b_in, vertices, pointed)
        self.logger.info(f"Multiplier polytope: {len(vertices)} vertices")
        return self._polytope

    # ---- constraint qualifications ---------------------------------------

    def _mfcq(self, active, J_h_y, J_g_y) -> Tuple[bool, np.ndarray]:
        bp = self.bp
        m = bp.m
        if bp.r and rank(J_h_y, self.tol.rank) < bp.r:
            return False, np.zeros(m)
        # variables (d_y, s): max s
        c = np.concatenate([np.zeros(m), [-1.0]])
        rows = [np.hstack([J_g_y[list(active)], np.ones((len(active), 1))]),
                np.hstack([np.eye(m), np.zeros((m, 1))]),
                np.hstack([-np.eye(m), np.zeros((m, 1))]),
                np.concatenate([np.zeros(m), [1.0]])[None, :]]
        rhs = np.concatenate([np.zeros(len(active)), np.ones(2 * m), [1.0]])
        A_eq = np.hstack([J_h_y, np.zeros((bp.r, 1))])
        result = lp_solve(LinearProgram(c, A_eq, np.zeros(bp.r), np.vstack(rows), rhs), self.tol)
        slack = -result.optimum
        return slack > self.tol.feasibility, result.solution[:m]

    def _crcq_ranks(self, x, y, active) -> Dict[Tuple, int]:
        bp = self.bp
        d = bp.lower_derivatives(x, y, np.zeros(bp.r), np.zeros(bp.s))
        rows = [d.J_h[j, self.y_cols] for j in range(bp.r)] + [d.J_g[i, self.y_cols] for i in active]
        ranks = {}
        for size in range(1, len(rows) + 1):
            for subset in itertools.combinations(range(len(rows)), size):
                ranks[subset] = rank(np.array([rows[k] for k in subset]), self.tol.rank)
        return ranks

    def _crcq_probe(self, active) -> Tuple[Optional[bool], int]:
        bp = self.bp
        if bp.r + len(active) > MAX_CRCQ_INDICES:
            return None, 0
        reference = self._crcq_ranks(bp.x_star, bp.y_star, active)
        rng = np.random.default_rng(self.settings.seed)
        radius = self.settings.crcq_radius
        for _ in range(CRCQ_SAMPLES):
            step = rng.standard_normal(bp.N)
            step *= radius * rng.uniform() / np.linalg.norm(step)
            x = bp.x_star + step[:bp.n]
            y = bp.y_star + step[bp.n:]
            if self._crcq_ranks(x, y, active) != reference:
                return False, CRCQ_SAMPLES
        return True, CRCQ_SAMPLES

    def cq_report(self) -> CQReport:
        bp = self.bp
        polytope = self.multiplier_polytope()
        active = self.active_set()
        d = bp.lower_derivatives(bp.x_star, bp.y_star, np.zeros(bp.r), np.zeros(bp.s))
        J_h_y = d.J_h[:, self.y_cols].reshape(bp.r, bp.m)
        J_g_y = d.J_g[:, self.y_cols].reshape(bp.s, bp.m)
        caveats = []

        mfcq, witness = self._mfcq(active, J_h_y, J_g_y)
        gradients = np.vstack([J_h_y, J_g_y[list(active)]])
        licq_rank = rank(gradients, self.tol.rank) if gradients.shape[0] else 0
        licq = licq_rank == gradients.shape[0]
        crcq, samples = self._crcq_probe(active)
        if crcq is None:
            caveats.append(f"CRCQ probe skipped: more than {MAX_CRCQ_INDICES} gradients")
        if not polytope.pointed:
            caveats.append("multiplier set is unbounded; SSOSC checked at the reference multiplier only")

        per_vertex = []
        strongly = set()
        margin = float('inf')
        ssosc = True
        for mu, xi in polytope.vertices:
            positive = [i for i in active if xi[i] > self.tol.feasibility]
            strongly.update(positive)
            Q = bp.lower_derivatives(bp.x_star, bp.y_star, mu, xi).hess_L[self.y_cols, self.y_cols]
            basis = null_space_basis(np.vstack([J_h_y, J_g_y[positive]]), self.tol.rank, cols=bp.m)
            result = pd_on_subspace(0.5 * (Q + Q.T), basis, self.tol.rank)
            holds = result.status == Definiteness.POSITIVE
            ssosc = ssosc and holds
            margin = min(margin, result.margin)
            per_vertex.append({'mu': mu.tolist(), 'xi': xi.tolist(), 'status': result.status.value,
                               'margin': result.margin})

        report = CQReport(active, tuple(sorted(strongly)), mfcq, witness, licq, licq_rank, crcq, samples,
                          ssosc, margin, per_vertex, caveats)
        self.logger.info(f"Lower-level CQs: MFCQ={report.a1} SSOSC={report.a2} CRCQ={report.a3} LICQ={report.a4}")
        return report

    # ---- tracking --------------------------------------------------------

    def kkt_jacobian(self, x, y, mu, xi) -> Tuple[np.ndarray, np.ndarray]:
        """Element A(x, W) of the generalized Jacobian of the KKT map and its W diagonal."""
        bp = self.bp
        d = bp.lower_derivatives(x, y, mu, xi)
        W = ((d.g + xi) <= 0.0).astype(float)
        return sensitivity_matrix(bp, d, W), W

    def _newton(self, x, start: KKTPoint) -> Optional[KKTPoint]:
        bp = self.bp
        m, r = bp.m, bp.r
        v = np.concatenate([start.y, start.mu, start.xi])

        def split(v):
            return v[:m], v[m:m + r], v[m + r:]

        phi = bp.kkt_map(x, *split(v))
        for iteration in range(MAX_NEWTON_ITERATIONS):
            norm = float(np.max(np.abs(phi), initial=0.0))
            if norm <= self.tol.newton:
                y, mu, xi = split(v)
                return KKTPoint(y, mu, xi, norm)
            J, _ = self.kkt_jacobian(x, *split(v))
            try:
                step = solve_linear(J, -phi, self.tol)
            except SingularMatrixError:
                step = np.linalg.lstsq(J, -phi, rcond=None)[0]
            merit = 0.5 * phi @ phi
            t = 1.0
            while t > 1e-12:
                trial = v + t * step
                trial_phi = bp.kkt_map(x, *split(trial))
                if 0.5 * trial_phi @ trial_phi <= (1.0 - 2e-4 * t) * merit:
                    break
                t *= 0.5
            else:
                self.logger.debug(f"Line search failed at x={x} after {iteration} iterations")
                return None
            v, phi = trial, trial_phi
        return None

    def _solve_from(self, x, start: KKTPoint) -> Optional[KKTPoint]:
        mu, xi, _ = self.min_residual_multiplier(x, start.y)
        result = self._newton(x, KKTPoint(start.y, mu, xi, np.inf))
        return result if result is not None else self._newton(x, start)

    def kkt_track(self, x, start: Optional[KKTPoint] = None) -> KKTPoint:
        """Solve the lower KKT system at x by semismooth Newton from `start`.

        On failure, walks from x* to x in 2, 4, 8 and 16 equal steps.
        """
        bp = self.bp
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
        if x.size != bp.n:
            raise DimensionMismatchError(f"x has {x.size} entries, expected {bp.n}")
        if np.linalg.norm(x - bp.x_star) > self.settings.trust_radius:
            raise ValueError(f"x is outside the trust radius {self.settings.trust_radius} of x*")
        start = start or self.reference_kkt()
        result = self._solve_from(x, start)
        if result is not None:
            return result

        for depth in range(1, MAX_CONTINUATION_DEPTH + 1):
            steps = 2 ** depth
            self.logger.debug(f"Continuation with {steps} steps toward x={x.tolist()}")
            point: Optional[KKTPoint] = self.reference_kkt()
            for k in range(1, steps + 1):
                point = self._solve_from(bp.x_star + (k / steps) * (x - bp.x_star), point)
                if point is None:
                    break
            if point is not None:
                return point
        raise TrackingError(f"Semismooth Newton did not converge at x={x.tolist()}")


def sensitivity_matrix(bp: BilevelProblem, d: LowerDerivatives, W: np.ndarray) -> np.ndarray:
    """A(x, W) = [[Q, Jh^T, Jg^T], [Jh, 0, 0], [(I - W) Jg, 0, -W]] with y-blocks of the Jacobians."""
    m, r, s = bp.m, bp.r, bp.s
    y = slice(bp.n, bp.N)
    Q = d.hess_L[y, y]
    J_h = d.J_h[:, y].reshape(r, m)
    J_g = d.J_g[:, y].reshape(s, m)
    I_W = np.diag(1.0 - W)
    return np.block([
        [Q, J_h.T, J_g.T],
        [J_h, np.zeros((r, r)), np.zeros((r, s))],
        [I_W @ J_g, np.zeros((s, r)), -np.diag(W)],
    ])


def multiplier_polytope(bp: BilevelProblem, settings: Optional[VerificationSettings] = None) -> MultiplierPolytope:
    return LowerLevelAnalyzer(bp, settings).multiplier_polytope()


def cq_report(bp: BilevelProblem, settings: Optional[VerificationSettings] = None) -> CQReport:
    return LowerLevelAnalyzer(bp, settings).cq_report()


def kkt_track(bp: BilevelProblem, x, start: Optional[KKTPoint] = None,
              settings: Optional[VerificationSettings] = None) -> KKTPoint:
    return LowerLevelAnalyzer(bp, settings).kkt_track(x, start)
