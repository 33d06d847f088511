#!/usr/bin/env python3
"""
Polyhedral sets, their tangent cones and second-order tangent sets.

A PolyhedralSet is either a product of primitive factors (R, R_-, {0})
or an H-description {y : A y <= b, C y = e}. Tangent cones of either form
are again PolyhedralSets, and for polyhedra the outer second-order
tangent set is T2_K(y; d) = T_{T_K(y)}(d).
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from math import comb
from typing import Dict, List, Optional, Sequence

import numpy as np

from errors import DimensionMismatchError, NotInSetError, ScaleExceededError
from linalg_lp import LinearProgram, LPStatus, as_matrix, as_vector, lp_solve, vertex_enumerate
from verification_config import DEFAULT_TOLERANCES, Tolerances

MAX_PROJECTION_SUBSETS = 100_000
ORACLE_GRID = [2.0 ** (-k) for k in range(1, 11)]


class Factor(Enum):
    FREE = "R"
    NONPOSITIVE = "R-"
    ZERO = "0"


@dataclass
class ConeMembershipCertificate:
    member: bool
    violation: float
    nearest_point: np.ndarray


class PolyhedralSet:
    """Closed polyhedron in product form or H-form."""

    def __init__(self, dim: int, factors: Optional[Sequence[Factor]] = None, A=None, b=None, C=None, e=None,
                 tol: Tolerances = DEFAULT_TOLERANCES, allow_empty: bool = True):
        self.logger = logging.getLogger(__name__)
        self.dim = int(dim)
        self.tol = tol
        self.factors = None if factors is None else tuple(Factor(f) for f in factors)
        if self.factors is not None:
            if len(self.factors) != self.dim:
                raise DimensionMismatchError(f"{len(self.factors)} factors for a set of dimension {self.dim}")
            self.A, self.b, self.C, self.e = self._product_h_form()
        else:
            self.A = as_matrix(A, self.dim)
            self.b = as_vector(b, self.A.shape[0])
            self.C = as_matrix(C, self.dim)
            self.e = as_vector(e, self.C.shape[0])
            for name, M, r in (('inequality', self.A, self.b), ('equality', self.C, self.e)):
                if M.shape[0] and M.shape[1] != self.dim:
                    raise DimensionMismatchError(f"{name} rows have {M.shape[1]} columns, set dimension is {self.dim}")
                if M.shape[0] != r.size:
                    raise DimensionMismatchError(f"{name} rhs size {r.size} does not match {M.shape[0]} rows")
        if not allow_empty and self.is_empty():
            raise ValueError("Polyhedral set is empty")

    @classmethod
    def product(cls, factors: Sequence, tol: Tolerances = DEFAULT_TOLERANCES) -> 'PolyhedralSet':
        factors = [Factor(f) for f in factors]
        return cls(len(factors), factors=factors, tol=tol)

    @classmethod
    def h_form(cls, A=None, b=None, C=None, e=None, dim: Optional[int] = None,
               tol: Tolerances = DEFAULT_TOLERANCES, allow_empty: bool = False) -> 'PolyhedralSet':
        if dim is None:
            shapes = [as_matrix(M).shape[1] for M in (A, C) if M is not None and np.asarray(M).size]
            if not shapes:
                raise ValueError("Cannot infer the dimension of an unconstrained set")
            dim = shapes[0]
        return cls(dim, A=A, b=b, C=C, e=e, tol=tol, allow_empty=allow_empty)

    def _product_h_form(self):
        eye = np.eye(self.dim)
        ineq = [i for i, f in enumerate(self.factors) if f == Factor.NONPOSITIVE]
        eq = [i for i, f in enumerate(self.factors) if f == Factor.ZERO]
        A = eye[ineq] if ineq else np.zeros((0, self.dim))
        C = eye[eq] if eq else np.zeros((0, self.dim))
        return A, np.zeros(len(ineq)), C, np.zeros(len(eq))

    @property
    def is_product(self) -> bool:
        return self.factors is not None

    @property
    def is_cone(self) -> bool:
        return not np.any(self.b) and not np.any(self.e)

    def is_empty(self) -> bool:
        if self.A.shape[0] == 0 and self.C.shape[0] == 0:
            return False
        result = lp_solve(LinearProgram(np.zeros(self.dim), self.C, self.e, self.A, self.b), self.tol)
        return result.status == LPStatus.INFEASIBLE

    def _check_dim(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float)).reshape(-1)
        if y.size != self.dim:
            raise DimensionMismatchError(f"Point of size {y.size} for a set of dimension {self.dim}")
        return y

    def violation(self, y) -> float:
        y = self._check_dim(y)
        v_in = np.max(self.A @ y - self.b, initial=0.0)
        v_eq = np.max(np.abs(self.C @ y - self.e), initial=0.0)
        return float(max(v_in, v_eq, 0.0))

    def contains(self, y, tol: Optional[float] = None) -> ConeMembershipCertificate:
        y = self._check_dim(y)
        threshold = self.tol.membership if tol is None else tol
        violation = self.violation(y)
        member = violation <= threshold
        nearest = y.copy() if member else self.project(y)
        return ConeMembershipCertificate(member, violation, nearest)

    def distance(self, y) -> float:
        certificate = self.contains(y)
        if certificate.member:
            return 0.0
        return float(np.linalg.norm(certificate.nearest_point - self._check_dim(y)))

    def project(self, y) -> np.ndarray:
        """Euclidean projection; closed form for products, active-set enumeration otherwise."""
        y = self._check_dim(y)
        if self.is_product:
            z = y.copy()
            for i, f in enumerate(self.factors):
                if f == Factor.NONPOSITIVE:
                    z[i] = min(z[i], 0.0)
                elif f == Factor.ZERO:
                    z[i] = 0.0
            return z
        if self.violation(y) <= self.tol.membership:
            return y.copy()

        p = self.A.shape[0]
        max_size = min(p, self.dim)
        total = sum(comb(p, k) for k in range(max_size + 1))
        if total > MAX_PROJECTION_SUBSETS:
            raise ScaleExceededError(f"Projection would enumerate {total} active sets")
        best, best_dist = None, float('inf')
        for size in range(max_size + 1):
            for subset in itertools.combinations(range(p), size):
                M = np.vstack([self.C, self.A[list(subset)]])
                r = np.concatenate([self.e, self.b[list(subset)]])
                if M.shape[0] == 0:
                    z = y.copy()
                else:
                    z = y - np.linalg.pinv(M) @ (M @ y - r)
                    if np.max(np.abs(M @ z - r), initial=0.0) > self.tol.feasibility * (1.0 + np.max(np.abs(r), initial=0.0)):
                        continue
                if self.violation(z) > self.tol.feasibility:
                    continue
                dist = np.linalg.norm(z - y)
                if dist < best_dist - 1e-15:
                    best, best_dist = z, dist
        if best is None:
            raise NotInSetError("Projection failed: no feasible active set found (empty set?)")
        return best

    def tangent_cone(self, y) -> 'PolyhedralSet':
        """T_K(y): active inequality rows homogenized, equalities kept."""
        y = self._check_dim(y)
        violation = self.violation(y)
        if violation > self.tol.feasibility:
            raise NotInSetError(f"Point is not in the set (violation {violation:.3e})")
        act = self.tol.activity
        if self.is_product:
            factors = []
            for i, f in enumerate(self.factors):
                if f == Factor.NONPOSITIVE and y[i] < -act:
                    factors.append(Factor.FREE)
                else:
                    factors.append(f)
            return PolyhedralSet(self.dim, factors=factors, tol=self.tol)
        active = [i for i in range(self.A.shape[0]) if self.A[i] @ y >= self.b[i] - act]
        A_act = self.A[active] if active else np.zeros((0, self.dim))
        return PolyhedralSet(self.dim, A=A_act, b=np.zeros(len(active)), C=self.C,
                             e=np.zeros(self.C.shape[0]), tol=self.tol)

    def second_order_tangent(self, y, d) -> 'PolyhedralSet':
        """T2_K(y; d) as the tangent cone of T_K(y) at d."""
        tangent = self.tangent_cone(y)
        d = self._check_dim(d)
        violation = tangent.violation(d)
        if violation > self.tol.membership * (1.0 + np.linalg.norm(d)):
            raise NotInSetError(f"Direction is not in the tangent cone (violation {violation:.3e})")
        return tangent.tangent_cone(d)

    def sample_generators(self) -> List[np.ndarray]:
        """Nonzero vertices of (cone) intersected with the unit box; they generate the cone."""
        if not self.is_cone:
            raise ValueError("sample_generators is defined for cones only")
        box = np.vstack([np.eye(self.dim), -np.eye(self.dim)])
        A = np.vstack([self.A, box])
        b = np.concatenate([np.zeros(self.A.shape[0]), np.ones(2 * self.dim)])
        vertices = vertex_enumerate(self.C, self.e, A, b, bound=4 ** self.dim + 64, n=self.dim, tol=self.tol)
        return [v for v in vertices if np.linalg.norm(v) > self.tol.dedup]

    def same_set(self, other: 'PolyhedralSet') -> bool:
        """Mutual membership of box generators (cones only)."""
        return (all(other.contains(g, self.tol.feasibility).member for g in self.sample_generators())
                and all(self.contains(g, self.tol.feasibility).member for g in other.sample_generators()))

    def to_dict(self) -> Dict:
        if self.is_product:
            return {'form': 'product', 'factors': [f.value for f in self.factors]}
        return {'form': 'h', 'dim': self.dim, 'A': self.A.tolist(), 'b': self.b.tolist(),
                'C': self.C.tolist(), 'e': self.e.tolist()}

    @classmethod
    def from_dict(cls, data: Dict, tol: Tolerances = DEFAULT_TOLERANCES) -> 'PolyhedralSet':
        form = data.get('form')
        if form == 'product':
            return cls.product(data['factors'], tol=tol)
        if form == 'h':
            return cls.h_form(data.get('A'), data.get('b'), data.get('C'), data.get('e'),
                              dim=data.get('dim'), tol=tol)
        raise ValueError(f"Unknown set form {form!r}")

    def __repr__(self) -> str:
        if self.is_product:
            return f"PolyhedralSet({' x '.join(f.value for f in self.factors)})"
        return f"PolyhedralSet(dim={self.dim}, {self.A.shape[0]} inequalities, {self.C.shape[0]} equalities)"


def parabolic_residuals(K: PolyhedralSet, y, d, w, t_grid: Optional[List[float]] = None) -> List[float]:
    """dist(y + t d + t^2/2 w, K) / t^2 along the grid."""
    y, d, w = (np.asarray(v, dtype=float).reshape(-1) for v in (y, d, w))
    grid = t_grid or ORACLE_GRID
    return [K.distance(y + t * d + 0.5 * t ** 2 * w) / t ** 2 for t in grid]


def passes_parabolic_oracle(K: PolyhedralSet, y, d, w, t_grid: Optional[List[float]] = None) -> bool:
    """Definitional o(t^2) test for membership of w in T2_K(y; d)."""
    ratios = parabolic_residuals(K, y, d, w, t_grid)
    scale = 1.0 + float(np.linalg.norm(w))
    tail = ratios[len(ratios) // 2:]
    decreasing = all(b <= a + 1e-9 * scale for a, b in zip(tail, tail[1:]))
    return decreasing and tail[-1] <= 1e-6 * scale


@dataclass
class OuterRegularityReport:
    t_grid: List[float]
    distances: List[float]
    regular: bool


def outer_regularity_probe(K: PolyhedralSet, y, d, samples: int = 8, seed: int = 0,
                           t_grid: Optional[List[float]] = None) -> OuterRegularityReport:
    """Feasible parabolic sequences y_k in K: distance of w_k to T2_K(y; d) must vanish."""
    y, d = (np.asarray(v, dtype=float).reshape(-1) for v in (y, d))
    grid = t_grid or ORACLE_GRID
    second = K.second_order_tangent(y, d)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((samples, K.dim))
    worst = []
    for t in grid:
        per_t = 0.0
        for w in draws:
            y_k = K.project(y + t * d + 0.5 * t ** 2 * w)
            w_k = (y_k - y - t * d) / (0.5 * t ** 2)
            per_t = max(per_t, second.distance(w_k))
        worst.append(per_t)
    regular = worst[-1] <= 1e-6 * (1.0 + float(np.max(np.abs(draws), initial=0.0)))
    return OuterRegularityReport(list(grid), worst, regular)
