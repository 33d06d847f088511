#!/usr/bin/env python3
"""
Dense linear algebra and linear programming primitives.

Everything downstream (sensitivity matrices, constraint qualifications,
first- and second-order certificates) reduces to the routines here:
pivoted elimination, rank and null spaces, definiteness on a subspace,
a Bland-rule simplex with dual certificates, and brute-force vertex
enumeration for desk-scale polyhedra.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from math import comb
from typing import List, Optional, Tuple

import numpy as np

from errors import DimensionMismatchError, LPStalledError, ScaleExceededError, SingularMatrixError
from verification_config import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

MAX_ENUMERATION_DIM = 12
MAX_ENUMERATION_CONSTRAINTS = 40
MAX_ENUMERATION_SUBSETS = 250_000


def as_matrix(A, cols: Optional[int] = None) -> np.ndarray:
    """Coerce to a finite 2-D float array; None or [] becomes an empty (0, cols) matrix."""
    if A is None or (not isinstance(A, np.ndarray) and len(A) == 0):
        return np.zeros((0, cols or 0))
    M = np.atleast_2d(np.asarray(A, dtype=float))
    if M.size == 0:
        return np.zeros((0, cols if cols is not None else M.shape[1]))
    if not np.all(np.isfinite(M)):
        raise ValueError("Matrix entries must be finite")
    return M


def as_vector(v, size: Optional[int] = None) -> np.ndarray:
    if v is None:
        return np.zeros(size or 0)
    out = np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)
    if not np.all(np.isfinite(out)):
        raise ValueError("Vector entries must be finite")
    return out


def _scale(A: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0


def solve_linear(A, b, tol: Tolerances = DEFAULT_TOLERANCES) -> np.ndarray:
    """Solve A z = b by Gaussian elimination with partial pivoting.

    b may be a vector or a matrix (solved column-wise). Raises
    SingularMatrixError when a pivot falls below the pivot threshold.
    """
    A = as_matrix(A)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DimensionMismatchError(f"solve_linear needs a square matrix, got {A.shape}")
    rhs = np.asarray(b, dtype=float)
    vector_rhs = rhs.ndim == 1
    if n == 0:
        return rhs.copy()
    B = rhs.reshape(n, -1).copy()
    if B.shape[0] != n:
        raise DimensionMismatchError(f"Right-hand side has {B.shape[0]} rows, expected {n}")

    M = A.copy()
    threshold = tol.pivot * _scale(A)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) <= threshold:
            raise SingularMatrixError(f"Pivot {M[p, k]:.3e} in column {k} below threshold {threshold:.1e}")
        if p != k:
            M[[k, p]] = M[[p, k]]
            B[[k, p]] = B[[p, k]]
        factors = M[k + 1:, k] / M[k, k]
        M[k + 1:, k:] -= np.outer(factors, M[k, k:])
        B[k + 1:] -= np.outer(factors, B[k])

    Z = np.zeros_like(B)
    for k in range(n - 1, -1, -1):
        Z[k] = (B[k] - M[k, k + 1:] @ Z[k + 1:]) / M[k, k]

    residual = np.linalg.norm(A @ Z - rhs.reshape(n, -1)) if n else 0.0
    if residual > tol.solve_residual * (1.0 + np.linalg.norm(rhs)) * max(1.0, _scale(A)):
        raise SingularMatrixError(f"Residual {residual:.3e} too large; system is ill-conditioned")
    return Z.reshape(-1) if vector_rhs else Z


def _row_reduce(A: np.ndarray, tol: float) -> Tuple[np.ndarray, List[int]]:
    """Reduced row echelon form with partial pivoting; returns (R, pivot columns)."""
    R = A.copy()
    rows, cols = R.shape
    threshold = tol * _scale(A)
    pivots: List[int] = []
    r = 0
    for c in range(cols):
        if r >= rows:
            break
        p = r + int(np.argmax(np.abs(R[r:, c])))
        if abs(R[p, c]) <= threshold:
            R[r:, c] = 0.0
            continue
        if p != r:
            R[[r, p]] = R[[p, r]]
        R[r] /= R[r, c]
        others = [i for i in range(rows) if i != r]
        R[others] -= np.outer(R[others, c], R[r])
        pivots.append(c)
        r += 1
    return R, pivots


def rank(A, tol: float = DEFAULT_TOLERANCES.rank) -> int:
    """Numerical rank by row reduction with partial pivoting."""
    if tol <= 0:
        raise ValueError("rank tolerance must be positive")
    A = as_matrix(A)
    if A.size == 0:
        return 0
    return len(_row_reduce(A, tol)[1])


def null_space_basis(A, tol: float = DEFAULT_TOLERANCES.rank, cols: Optional[int] = None) -> np.ndarray:
    """Orthonormal basis of ker A, one column per basis vector."""
    A = as_matrix(A, cols)
    n = A.shape[1]
    if A.shape[0] == 0:
        return np.eye(n)
    R, pivots = _row_reduce(A, tol)
    free = [c for c in range(n) if c not in pivots]
    if not free:
        return np.zeros((n, 0))
    vectors = np.zeros((n, len(free)))
    for k, c in enumerate(free):
        vectors[c, k] = 1.0
        for r, p in enumerate(pivots):
            vectors[p, k] = -R[r, c]
    Q, _ = np.linalg.qr(vectors)
    return Q


class Definiteness(Enum):
    POSITIVE = "positive"
    NOT_POSITIVE = "not_positive"
    DEGENERATE = "degenerate"


@dataclass
class DefinitenessResult:
    status: Definiteness
    margin: float


def pd_on_subspace(Q, basis, tol: float = DEFAULT_TOLERANCES.rank) -> DefinitenessResult:
    """Decide positivity of basis^T Q basis by a diagonally pivoted LDL^T sweep.

    margin is the smallest pivot; +inf on the trivial subspace.
    """
    Q = as_matrix(Q)
    if Q.shape[0] != Q.shape[1]:
        raise DimensionMismatchError(f"Q must be square, got {Q.shape}")
    if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-9 * _scale(Q):
        raise ValueError("pd_on_subspace requires a symmetric matrix")
    basis = np.asarray(basis, dtype=float)
    if basis.ndim == 1:
        basis = basis.reshape(-1, 1)
    B = basis if basis.size else np.zeros((Q.shape[0], 0))
    if B.shape[0] != Q.shape[0]:
        raise DimensionMismatchError(f"basis has {B.shape[0]} rows, Q has {Q.shape[0]}")
    if B.shape[1] == 0:
        return DefinitenessResult(Definiteness.POSITIVE, float('inf'))

    M = B.T @ Q @ B
    M = 0.5 * (M + M.T)
    threshold = tol * _scale(M)
    remaining = list(range(M.shape[0]))
    smallest = float('inf')
    while remaining:
        diag = np.array([M[i, i] for i in remaining])
        k = remaining[int(np.argmax(diag))]
        pivot = M[k, k]
        if pivot <= threshold:
            sub = M[np.ix_(remaining, remaining)]
            if np.min(diag) < -threshold:
                return DefinitenessResult(Definiteness.NOT_POSITIVE, float(np.min(diag)))
            if np.max(np.abs(sub)) > threshold:
                return DefinitenessResult(Definiteness.NOT_POSITIVE, float(-np.max(np.abs(sub))))
            return DefinitenessResult(Definiteness.DEGENERATE, float(pivot))
        smallest = min(smallest, float(pivot))
        remaining.remove(k)
        if remaining:
            col = M[remaining, k]
            M[np.ix_(remaining, remaining)] -= np.outer(col, col) / pivot
    return DefinitenessResult(Definiteness.POSITIVE, smallest)


class LPStatus(Enum):
    OPTIMAL = "optimal"
    UNBOUNDED = "unbounded"
    INFEASIBLE = "infeasible"


@dataclass
class LinearProgram:
    """min c.z  s.t.  A_eq z = b_eq,  A_in z <= b_in,  z free."""
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None

    def __post_init__(self):
        self.c = as_vector(self.c)
        n = self.c.size
        self.A_eq = as_matrix(self.A_eq, n)
        self.b_eq = as_vector(self.b_eq, self.A_eq.shape[0])
        self.A_in = as_matrix(self.A_in, n)
        self.b_in = as_vector(self.b_in, self.A_in.shape[0])
        for name, A, b in (('equality', self.A_eq, self.b_eq), ('inequality', self.A_in, self.b_in)):
            if A.shape[0] and A.shape[1] != n:
                raise DimensionMismatchError(f"{name} matrix has {A.shape[1]} columns, objective has {n}")
            if A.shape[0] != b.size:
                raise DimensionMismatchError(f"{name} rhs has {b.size} entries for {A.shape[0]} rows")

    @property
    def n(self) -> int:
        return self.c.size


@dataclass
class LPResult:
    status: LPStatus
    optimum: float
    solution: np.ndarray
    certificate: np.ndarray
    primal_residual: float = 0.0
    duality_gap: float = 0.0
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == LPStatus.OPTIMAL

    def to_dict(self) -> dict:
        return {
            'status': self.status.value,
            'optimum': self.optimum,
            'solution': self.solution.tolist(),
            'certificate': self.certificate.tolist(),
            'primal_residual': self.primal_residual,
            'duality_gap': self.duality_gap,
        }


class SimplexSolver:
    """Two-phase revised simplex with Bland's rule and an explicit basis inverse."""

    def __init__(self, lp: LinearProgram, tol: Tolerances = DEFAULT_TOLERANCES):
        self.lp = lp
        self.tol = tol
        self.logger = logging.getLogger(__name__)

    def solve(self) -> LPResult:
        lp = self.lp
        n = lp.n
        m_eq, m_in = lp.A_eq.shape[0], lp.A_in.shape[0]
        m = m_eq + m_in
        if m == 0:
            return self._unconstrained()

        # Standard form: columns [z+, z-, slack], rows [eq; in]
        A_rows = np.vstack([lp.A_eq, lp.A_in]) if m else np.zeros((0, n))
        slack = np.vstack([np.zeros((m_eq, m_in)), np.eye(m_in)])
        A = np.hstack([A_rows, -A_rows, slack])
        b = np.concatenate([lp.b_eq, lp.b_in])
        sign = np.where(b < 0, -1.0, 1.0)
        A = A * sign[:, None]
        b = b * sign
        N = A.shape[1]

        # Phase I on artificials
        A1 = np.hstack([A, np.eye(m)])
        cost1 = np.concatenate([np.zeros(N), np.ones(m)])
        basis = list(range(N, N + m))
        rows = list(range(m))
        status, basis, it1, _ = self._simplex(A1, b, cost1, basis, N + m)
        B_inv = np.linalg.inv(A1[:, basis])
        x_B = B_inv @ b
        phase1 = float(cost1[basis] @ x_B)
        if phase1 > self.tol.feasibility * (1.0 + np.max(np.abs(b))):
            y = cost1[basis] @ B_inv
            self.logger.debug(f"LP infeasible, phase-I optimum {phase1:.3e}")
            return LPResult(LPStatus.INFEASIBLE, float('inf'), np.zeros(n), y * sign,
                            iterations=it1)

        A1, b, basis, rows = self._drive_out_artificials(A1, b, basis, rows, N)
        A2 = A1[:, :N]
        cost2 = np.concatenate([lp.c, -lp.c, np.zeros(m_in)])
        status, basis, it2, ray = self._simplex(A2, b, cost2, basis, N)
        iterations = it1 + it2

        if status == LPStatus.UNBOUNDED:
            direction = ray[:n] - ray[n:2 * n]
            return LPResult(LPStatus.UNBOUNDED, float('-inf'), np.zeros(n), direction,
                            iterations=iterations)

        B_inv = np.linalg.inv(A2[:, basis]) if basis else np.zeros((0, 0))
        x = np.zeros(N)
        if basis:
            x[basis] = B_inv @ b
        z = x[:n] - x[n:2 * n]
        y_kept = cost2[basis] @ B_inv if basis else np.zeros(0)
        y = np.zeros(m)
        y[rows] = y_kept
        y = y * sign
        return self._finish(z, y, iterations)

    def _unconstrained(self) -> LPResult:
        c = self.lp.c
        if np.max(np.abs(c), initial=0.0) > self.tol.activity:
            return LPResult(LPStatus.UNBOUNDED, float('-inf'), np.zeros(c.size), -c)
        return LPResult(LPStatus.OPTIMAL, 0.0, np.zeros(c.size), np.zeros(0))

    def _simplex(self, A, b, cost, basis, allowed):
        """Bland-rule iterations; returns (status, basis, iterations, ray)."""
        m, N = A.shape
        limit = 50 * (m + N) + 100
        reduced_tol = self.tol.activity
        pivot_tol = self.tol.pivot
        for iteration in range(limit):
            B_inv = np.linalg.inv(A[:, basis])
            x_B = B_inv @ b
            y = cost[basis] @ B_inv
            entering = None
            in_basis = set(basis)
            for j in range(allowed):
                if j in in_basis:
                    continue
                if cost[j] - y @ A[:, j] < -reduced_tol:
                    entering = j
                    break
            if entering is None:
                return LPStatus.OPTIMAL, basis, iteration, None

            u = B_inv @ A[:, entering]
            candidates = [i for i in range(m) if u[i] > pivot_tol]
            if not candidates:
                ray = np.zeros(N)
                ray[entering] = 1.0
                for i, var in enumerate(basis):
                    ray[var] = -u[i]
                return LPStatus.UNBOUNDED, basis, iteration, ray
            ratios = [max(x_B[i], 0.0) / u[i] for i in candidates]
            best = min(ratios)
            ties = [candidates[k] for k, r in enumerate(ratios) if r <= best + 1e-12 * (1.0 + abs(best))]
            leaving = min(ties, key=lambda i: basis[i])
            basis = list(basis)
            basis[leaving] = entering
        raise LPStalledError(f"Simplex exceeded {limit} iterations")

    def _drive_out_artificials(self, A1, b, basis, rows, N):
        """Pivot zero-level artificials out; drop rows that turn out redundant."""
        basis = list(basis)
        rows = list(rows)
        position = 0
        while position < len(basis):
            if basis[position] < N:
                position += 1
                continue
            B_inv = np.linalg.inv(A1[:, basis])
            row = B_inv[position] @ A1[:, :N]
            in_basis = set(basis)
            replacement = next((j for j in range(N) if j not in in_basis
                                and abs(row[j]) > self.tol.pivot), None)
            if replacement is not None:
                basis[position] = replacement
                position += 1
                continue
            # Redundant row: remove it with its artificial column
            artificial = basis[position]
            drop_row = artificial - N
            keep = [i for i in range(A1.shape[0]) if i != drop_row]
            self.logger.debug(f"Dropping redundant constraint row {rows[drop_row]}")
            A1 = A1[keep]
            b = b[keep]
            rows = [rows[i] for i in keep]
            del basis[position]
            # Re-index artificial columns so column N + i still belongs to row i
            keep_cols = list(range(N)) + [N + i for i in keep]
            A1 = A1[:, keep_cols]
            basis = [v if v < N else N + keep.index(v - N) for v in basis]
        return A1, b, basis, rows

    def _finish(self, z: np.ndarray, y: np.ndarray, iterations: int) -> LPResult:
        lp = self.lp
        residual_eq = np.max(np.abs(lp.A_eq @ z - lp.b_eq), initial=0.0)
        residual_in = np.max(lp.A_in @ z - lp.b_in, initial=0.0)
        residual = float(max(residual_eq, residual_in, 0.0))
        scale = 1.0 + max(np.max(np.abs(lp.b_eq), initial=0.0), np.max(np.abs(lp.b_in), initial=0.0))
        if residual > self.tol.feasibility * scale:
            raise LPStalledError(f"Simplex solution violates constraints by {residual:.3e}")
        optimum = float(lp.c @ z)
        dual_value = float(np.concatenate([lp.b_eq, lp.b_in]) @ y)
        gap = abs(optimum - dual_value)
        if gap > self.tol.feasibility * (1.0 + abs(optimum)) * scale:
            self.logger.warning(f"LP duality gap {gap:.3e} above tolerance")
        return LPResult(LPStatus.OPTIMAL, optimum, z, y, primal_residual=residual,
                        duality_gap=gap, iterations=iterations)


def lp_solve(lp: LinearProgram, tol: Tolerances = DEFAULT_TOLERANCES) -> LPResult:
    """Solve a LinearProgram; certificate is the dual vector (eq rows then
    inequality rows), an unbounded ray in z-space, or a Farkas vector."""
    return SimplexSolver(lp, tol).solve()


def vertex_enumerate(A_eq=None, b_eq=None, A_in=None, b_in=None, bound: int = 64,
                     n: Optional[int] = None, tol: Tolerances = DEFAULT_TOLERANCES) -> List[np.ndarray]:
    """All basic feasible solutions of {A_eq z = b_eq, A_in z <= b_in}.

    Vertices are deduplicated at the dedup tolerance and returned in
    lexicographic order; raises ScaleExceededError beyond `bound`.
    """
    A_eq = as_matrix(A_eq, n)
    A_in = as_matrix(A_in, n)
    if n is None:
        n = max(A_eq.shape[1], A_in.shape[1])
    b_eq = as_vector(b_eq, A_eq.shape[0])
    b_in = as_vector(b_in, A_in.shape[0])
    if A_eq.shape[0] == 0:
        A_eq = np.zeros((0, n))
    if A_in.shape[0] == 0:
        A_in = np.zeros((0, n))
    if n > MAX_ENUMERATION_DIM or A_eq.shape[0] + A_in.shape[0] > MAX_ENUMERATION_CONSTRAINTS:
        raise ScaleExceededError(f"vertex enumeration limited to dim <= {MAX_ENUMERATION_DIM} "
                                 f"and <= {MAX_ENUMERATION_CONSTRAINTS} constraints")
    if n == 0:
        feasible = (np.all(np.abs(b_eq) <= tol.feasibility) and np.all(b_in >= -tol.feasibility))
        return [np.zeros(0)] if feasible else []

    eq_rank = rank(A_eq, tol.rank) if A_eq.shape[0] else 0
    need = n - eq_rank
    p = A_in.shape[0]
    if need < 0 or need > p:
        return _single_point_if_determined(A_eq, b_eq, A_in, b_in, n, need, tol)
    if comb(p, need) > MAX_ENUMERATION_SUBSETS:
        raise ScaleExceededError(f"{comb(p, need)} active-set candidates exceed the enumeration limit")

    vertices: List[np.ndarray] = []
    for subset in itertools.combinations(range(p), need):
        M = np.vstack([A_eq, A_in[list(subset)]])
        r = np.concatenate([b_eq, b_in[list(subset)]])
        if rank(M, tol.rank) < n:
            continue
        z, *_ = np.linalg.lstsq(M, r, rcond=None)
        if np.max(np.abs(M @ z - r), initial=0.0) > tol.feasibility * (1.0 + np.max(np.abs(r), initial=0.0)):
            continue
        if not _feasible(A_eq, b_eq, A_in, b_in, z, tol):
            continue
        if any(np.max(np.abs(z - v)) <= tol.dedup for v in vertices):
            continue
        vertices.append(z)
        if len(vertices) > bound:
            raise ScaleExceededError(f"More than {bound} vertices")
    vertices.sort(key=lambda v: tuple(np.round(v, 12)))
    return vertices


def _single_point_if_determined(A_eq, b_eq, A_in, b_in, n, need, tol) -> List[np.ndarray]:
    if need > A_in.shape[0]:
        return []
    z, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
    return [z] if _feasible(A_eq, b_eq, A_in, b_in, z, tol) else []


def _feasible(A_eq, b_eq, A_in, b_in, z, tol: Tolerances) -> bool:
    eq_ok = np.max(np.abs(A_eq @ z - b_eq), initial=0.0) <= tol.feasibility * (1.0 + np.max(np.abs(b_eq), initial=0.0))
    in_ok = np.max(A_in @ z - b_in, initial=0.0) <= tol.feasibility * (1.0 + np.max(np.abs(b_in), initial=0.0))
    return bool(eq_ok and in_ok)
