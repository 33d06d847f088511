#!/usr/bin/env python3
"""
Piecewise-smooth expression DAGs with exact first- and second-order
directional derivatives.

An expression is a DAG of atoms. Each atom acts on the concatenation of
its children's outputs, so one forward pass per call propagates the jet
(value, g'(x;d), g''(x;d,w)) through the chain rule

    (f o h)'(x;d)    = f'(h(x); h'(x;d))
    (f o h)''(x;d,w) = f''(h(x); h'(x;d), h''(x;d,w)).

Selection atoms (min, max, abs, min-with-zero, l1) are minima/maxima of
linear options, which gives the nested active index sets I(x), I(x,d),
I(x,d,w) and lets us enumerate the pieces on which d -> g'(x;d) is linear
and w -> g''(x;d,w) is affine.

Shared sub-expressions are evaluated once per call, as long as they are
the same Python object.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionMismatchError, NotPiecewiseLinearError, ScaleExceededError
from verification_config import DEFAULT_TOLERANCES

logger = logging.getLogger(__name__)

DEFAULT_MAX_PIECES = 4096


@dataclass(frozen=True)
class ActiveSet:
    """Nested active index sets of one selection slot."""
    node: str
    component: Optional[int]
    at_x: Tuple[int, ...]
    at_xd: Tuple[int, ...]
    at_xdw: Tuple[int, ...]


@dataclass
class DirectionalJet:
    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    active_chain: List[ActiveSet] = field(default_factory=list)


@dataclass
class LinearPiece:
    """g'(x;d) = jacobian @ d for every d with constraints @ d <= 0."""
    jacobian: np.ndarray
    constraints: np.ndarray
    signature: Tuple


@dataclass
class AffinePiece:
    """g''(x;d,w) = offset + slope @ w whenever cons_matrix @ w + cons_offset <= 0."""
    offset: np.ndarray
    slope: np.ndarray
    cons_matrix: np.ndarray
    cons_offset: np.ndarray
    signature: Tuple


# --------------------------------------------------------------------------
# Polynomials (file-level smooth atoms)
# --------------------------------------------------------------------------

class Polynomial:
    """Vector polynomial given by coefficient tables.

    terms[i] is a list of (coefficient, exponents) pairs for output i, with
    one exponent per input coordinate.
    """

    def __init__(self, input_dim: int, terms: Sequence[Sequence[Tuple[float, Sequence[int]]]]):
        self.input_dim = int(input_dim)
        self.terms = []
        for row, output_terms in enumerate(terms):
            parsed = []
            for coefficient, exponents in output_terms:
                exponents = tuple(int(e) for e in exponents)
                if len(exponents) != self.input_dim:
                    raise DimensionMismatchError(
                        f"Polynomial output {row}: exponent tuple {exponents} needs {self.input_dim} entries")
                if any(e < 0 for e in exponents):
                    raise ValueError(f"Polynomial output {row}: negative exponent in {exponents}")
                parsed.append((float(coefficient), exponents))
            self.terms.append(parsed)
        self.output_dim = len(self.terms)
        if self.output_dim == 0:
            raise ValueError("Polynomial needs at least one output")

    @staticmethod
    def _monomial(u: np.ndarray, exponents: Tuple[int, ...], wrt: Tuple[int, ...]) -> float:
        powers = list(exponents)
        factor = 1.0
        for var in wrt:
            factor *= powers[var]
            powers[var] -= 1
            if factor == 0.0:
                return 0.0
        return factor * float(np.prod(u ** np.array(powers, dtype=float)))

    def value(self, u: np.ndarray) -> np.ndarray:
        return np.array([sum(c * self._monomial(u, e, ()) for c, e in row) for row in self.terms])

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        J = np.zeros((self.output_dim, self.input_dim))
        for i, row in enumerate(self.terms):
            for c, e in row:
                for j in range(self.input_dim):
                    if e[j]:
                        J[i, j] += c * self._monomial(u, e, (j,))
        return J

    def hessians(self, u: np.ndarray) -> np.ndarray:
        k = self.input_dim
        H = np.zeros((self.output_dim, k, k))
        for i, row in enumerate(self.terms):
            for c, e in row:
                for a in range(k):
                    for b in range(a, k):
                        entry = c * self._monomial(u, e, (a, b))
                        H[i, a, b] += entry
                        if a != b:
                            H[i, b, a] += entry
        return H

    def third_action(self, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Row i is D^3 p_i(u)[d, d, .]."""
        k = self.input_dim
        T = np.zeros((self.output_dim, k))
        for i, row in enumerate(self.terms):
            for c, e in row:
                if sum(e) < 3:
                    continue
                for a in range(k):
                    for b in range(k):
                        if d[a] == 0.0 or d[b] == 0.0:
                            continue
                        for m in range(k):
                            T[i, m] += c * self._monomial(u, e, (a, b, m)) * d[a] * d[b]
        return T

    def to_terms(self) -> List[List[List]]:
        return [[[c, list(e)] for c, e in row] for row in self.terms]


# --------------------------------------------------------------------------
# Nodes
# --------------------------------------------------------------------------

class Node:
    """Base atom. Children outputs are concatenated into the atom input u."""
    kind = 'node'
    is_leaf = False
    is_smooth = True

    def __init__(self, *children: 'Node', label: Optional[str] = None):
        self.children: Tuple[Node, ...] = tuple(children)
        self.label = label
        self.output_dim = 0

    @property
    def input_size(self) -> int:
        return sum(child.output_dim for child in self.children)

    def jet(self, u, du, ddu, tie_tol) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List]:
        raise NotImplementedError

    def first_options(self, u, U, tie_tol) -> List[Tuple[np.ndarray, np.ndarray, Tuple]]:
        raise NotImplementedError

    def second_options(self, u, du, C, M, tie_tol) -> List[Tuple]:
        raise NotImplementedError

    def local_lipschitz(self, u: np.ndarray) -> float:
        raise NotImplementedError


def _no_constraints(n: int) -> np.ndarray:
    return np.zeros((0, n))


class Variable(Node):
    """Slice of the expression input."""
    kind = 'variable'
    is_leaf = True

    def __init__(self, input_dim: int, indices: Optional[Sequence[int]] = None, label: Optional[str] = None):
        super().__init__(label=label)
        self.input_dim = int(input_dim)
        self.indices = tuple(range(self.input_dim)) if indices is None else tuple(int(i) for i in indices)
        if not self.indices:
            raise ValueError("Variable slice needs at least one index")
        if min(self.indices) < 0 or max(self.indices) >= self.input_dim:
            raise DimensionMismatchError(f"Variable indices {self.indices} outside input of size {self.input_dim}")
        self.output_dim = len(self.indices)

    def jet(self, x, d, w, tie_tol):
        idx = list(self.indices)
        return x[idx], d[idx], w[idx], []

    def first_options(self, x, var_map, tie_tol):
        return [(var_map[list(self.indices)], _no_constraints(var_map.shape[1]), ())]

    def second_options(self, x, d, C, M, tie_tol):
        idx = list(self.indices)
        n = M.shape[1]
        return [(C[idx], M[idx], np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, x):
        return 1.0


class Constant(Node):
    kind = 'constant'
    is_leaf = True

    def __init__(self, value, label: Optional[str] = None):
        super().__init__(label=label)
        self.value = np.atleast_1d(np.asarray(value, dtype=float)).reshape(-1)
        self.output_dim = self.value.size

    def jet(self, x, d, w, tie_tol):
        zero = np.zeros(self.output_dim)
        return self.value.copy(), zero, zero.copy(), []

    def first_options(self, x, var_map, tie_tol):
        n = var_map.shape[1]
        return [(np.zeros((self.output_dim, n)), _no_constraints(n), ())]

    def second_options(self, x, d, C, M, tie_tol):
        n = M.shape[1]
        return [(np.zeros(self.output_dim), np.zeros((self.output_dim, n)), np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, x):
        return 0.0


class Affine(Node):
    """A u + b over the concatenated children."""
    kind = 'affine'

    def __init__(self, A, b=None, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.zeros(self.A.shape[0]) if b is None else np.atleast_1d(np.asarray(b, dtype=float)).reshape(-1)
        if self.A.shape[1] != self.input_size:
            raise DimensionMismatchError(f"Affine map has {self.A.shape[1]} columns for input of size {self.input_size}")
        if self.b.size != self.A.shape[0]:
            raise DimensionMismatchError("Affine offset size does not match the number of rows")
        self.output_dim = self.A.shape[0]

    def jet(self, u, du, ddu, tie_tol):
        return self.A @ u + self.b, self.A @ du, self.A @ ddu, []

    def first_options(self, u, U, tie_tol):
        return [(self.A @ U, _no_constraints(U.shape[1]), ())]

    def second_options(self, u, du, C, M, tie_tol):
        n = M.shape[1]
        return [(self.A @ C, self.A @ M, np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, u):
        return float(np.linalg.norm(self.A, 2))


class Stack(Affine):
    """Concatenation of children."""
    kind = 'stack'

    def __init__(self, *children: Node, label: Optional[str] = None):
        size = sum(child.output_dim for child in children)
        super().__init__(np.eye(size), None, *children, label=label)


class Sum(Node):
    """Elementwise sum of equally sized children."""
    kind = 'sum'

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        dims = {child.output_dim for child in children}
        if len(dims) != 1:
            raise DimensionMismatchError(f"Sum children have different output sizes {sorted(dims)}")
        self.output_dim = dims.pop()
        self._S = np.hstack([np.eye(self.output_dim)] * len(children))

    def jet(self, u, du, ddu, tie_tol):
        return self._S @ u, self._S @ du, self._S @ ddu, []

    def first_options(self, u, U, tie_tol):
        return [(self._S @ U, _no_constraints(U.shape[1]), ())]

    def second_options(self, u, du, C, M, tie_tol):
        n = M.shape[1]
        return [(self._S @ C, self._S @ M, np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, u):
        return float(np.sqrt(len(self.children)))


class Scale(Node):
    kind = 'scale'

    def __init__(self, factor: float, child: Node, label: Optional[str] = None):
        super().__init__(child, label=label)
        self.factor = float(factor)
        self.output_dim = child.output_dim

    def jet(self, u, du, ddu, tie_tol):
        return self.factor * u, self.factor * du, self.factor * ddu, []

    def first_options(self, u, U, tie_tol):
        return [(self.factor * U, _no_constraints(U.shape[1]), ())]

    def second_options(self, u, du, C, M, tie_tol):
        n = M.shape[1]
        return [(self.factor * C, self.factor * M, np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, u):
        return abs(self.factor)


class SmoothAtom(Node):
    """C^2 atom given by value / Jacobian / Hessian callbacks.

    hessian(u) returns an array of shape (output_dim, k, k). third(u, d)
    optionally returns D^3 g(u)[d, d, .] with shape (output_dim, k).
    """
    kind = 'smooth'

    def __init__(self, value: Callable, jacobian: Callable, hessian: Callable, output_dim: int,
                 *children: Node, third: Optional[Callable] = None, name: str = 'smooth',
                 label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.value_fn = value
        self.jacobian_fn = jacobian
        self.hessian_fn = hessian
        self.third_fn = third
        self.name = name
        self.output_dim = int(output_dim)

    def _jac(self, u):
        J = np.atleast_2d(np.asarray(self.jacobian_fn(u), dtype=float))
        if J.shape != (self.output_dim, self.input_size):
            raise DimensionMismatchError(f"{self.name}: Jacobian shape {J.shape}, expected "
                                         f"{(self.output_dim, self.input_size)}")
        return J

    def _hess(self, u):
        H = np.asarray(self.hessian_fn(u), dtype=float).reshape(self.output_dim, self.input_size, self.input_size)
        return H

    def jet(self, u, du, ddu, tie_tol):
        value = np.atleast_1d(np.asarray(self.value_fn(u), dtype=float)).reshape(-1)
        J = self._jac(u)
        H = self._hess(u)
        quad = np.einsum('i,kij,j->k', du, H, du)
        return value, J @ du, quad + J @ ddu, []

    def first_options(self, u, U, tie_tol):
        return [(self._jac(u) @ U, _no_constraints(U.shape[1]), ())]

    def second_options(self, u, du, C, M, tie_tol):
        J = self._jac(u)
        quad = np.einsum('i,kij,j->k', du, self._hess(u), du)
        n = M.shape[1]
        return [(quad + J @ C, J @ M, np.zeros((0, n)), np.zeros(0), ())]

    def local_lipschitz(self, u):
        return float(np.linalg.norm(self._jac(u), 2))

    def check_callbacks(self, u, step: float = 1e-5, rtol: float = 1e-5) -> bool:
        """Compare Jacobian/Hessian callbacks with central differences at u."""
        u = np.asarray(u, dtype=float)
        k = u.size
        J = self._jac(u)
        H = self._hess(u)
        J_fd = np.zeros_like(J)
        H_fd = np.zeros_like(H)
        for j in range(k):
            e = np.zeros(k)
            e[j] = step
            J_fd[:, j] = (np.asarray(self.value_fn(u + e)) - np.asarray(self.value_fn(u - e))) / (2 * step)
            H_fd[:, :, j] = (self._jac(u + e) - self._jac(u - e)) / (2 * step)
        ok_J = np.allclose(J, J_fd, rtol=rtol, atol=rtol)
        ok_H = np.allclose(H, H_fd, rtol=rtol, atol=rtol)
        if not (ok_J and ok_H):
            logger.warning(f"Smooth atom {self.name}: callbacks disagree with finite differences at {u}")
        return bool(ok_J and ok_H)


class PolynomialAtom(SmoothAtom):
    """Polynomial over the concatenated children (exact to third order)."""
    kind = 'polynomial'

    def __init__(self, polynomial: Polynomial, *children: Node, label: Optional[str] = None):
        self.polynomial = polynomial
        super().__init__(polynomial.value, polynomial.jacobian, polynomial.hessians, polynomial.output_dim,
                         *children, third=polynomial.third_action, name='polynomial', label=label)
        if polynomial.input_dim != self.input_size:
            raise DimensionMismatchError(f"Polynomial expects {polynomial.input_dim} inputs, "
                                         f"children provide {self.input_size}")


class SelectionNode(Node):
    """Min or max over linear options of the input, slot by slot.

    Each slot holds an option matrix O (one row per option); slot outputs are
    combined by the matrix S.
    """
    is_smooth = False
    sense = 1.0  # +1 min, -1 max

    def slots(self) -> List[np.ndarray]:
        raise NotImplementedError

    def combine(self) -> np.ndarray:
        return np.eye(len(self.slots()))

    def slot_component(self, slot: int) -> Optional[int]:
        return slot

    def _tie_sets(self, vals, d1s, d2s, tie_tol):
        s = self.sense
        a = s * vals
        best = np.min(a)
        I0 = [i for i in range(a.size) if a[i] <= best + tie_tol]
        b = s * d1s
        best1 = min(b[i] for i in I0)
        I1 = [i for i in I0 if b[i] <= best1 + tie_tol]
        c = s * d2s
        best2 = min(c[i] for i in I1)
        I2 = [i for i in I1 if c[i] <= best2 + tie_tol]
        return s * best, s * best1, s * best2, I0, I1, I2

    def jet(self, u, du, ddu, tie_tol):
        out_v, out_1, out_2, active = [], [], [], []
        for slot, O in enumerate(self.slots()):
            v, v1, v2, I0, I1, I2 = self._tie_sets(O @ u, O @ du, O @ ddu, tie_tol)
            out_v.append(v)
            out_1.append(v1)
            out_2.append(v2)
            active.append(ActiveSet(self.label, self.slot_component(slot), tuple(I0), tuple(I1), tuple(I2)))
        S = self.combine()
        return S @ np.array(out_v), S @ np.array(out_1), S @ np.array(out_2), active

    def first_options(self, u, U, tie_tol):
        n = U.shape[1]
        per_slot = []
        for slot, O in enumerate(self.slots()):
            vals = O @ u
            a = self.sense * vals
            I0 = [i for i in range(a.size) if a[i] <= np.min(a) + tie_tol]
            choices = []
            for j in I0:
                rows = [self.sense * (O[j] - O[k]) @ U for k in I0 if k != j]
                cons = np.array(rows) if rows else np.zeros((0, n))
                tag = (self.label, self.slot_component(slot), j) if len(I0) > 1 else None
                choices.append((O[j] @ U, cons, tag))
            per_slot.append(choices)
        S = self.combine()
        options = []
        for combo in itertools.product(*per_slot):
            L = S @ np.array([row for row, _, _ in combo])
            cons = np.vstack([c for _, c, _ in combo]) if combo else np.zeros((0, n))
            tag = tuple(t for _, _, t in combo if t is not None)
            options.append((L, cons, tag))
        return options

    def second_options(self, u, du, C, M, tie_tol):
        n = M.shape[1]
        per_slot = []
        for slot, O in enumerate(self.slots()):
            _, _, _, _, I1, _ = self._tie_sets(O @ u, O @ du, np.zeros(O.shape[0]), tie_tol)
            choices = []
            for j in I1:
                G_rows, h_rows = [], []
                for k in I1:
                    if k == j:
                        continue
                    diff = self.sense * (O[j] - O[k])
                    G_rows.append(diff @ M)
                    h_rows.append(diff @ C)
                G = np.array(G_rows) if G_rows else np.zeros((0, n))
                h = np.array(h_rows) if h_rows else np.zeros(0)
                tag = (self.label, self.slot_component(slot), j) if len(I1) > 1 else None
                choices.append((O[j] @ C, O[j] @ M, G, h, tag))
            per_slot.append(choices)
        S = self.combine()
        options = []
        for combo in itertools.product(*per_slot):
            c = S @ np.array([item[0] for item in combo])
            Mo = S @ np.array([item[1] for item in combo])
            G = np.vstack([item[2] for item in combo])
            h = np.concatenate([item[3] for item in combo])
            tag = tuple(item[4] for item in combo if item[4] is not None)
            options.append((c, Mo, G, h, tag))
        return options

    def local_lipschitz(self, u):
        return 1.0


class Min(SelectionNode):
    """min over all input components (scalar output)."""
    kind = 'min'

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.output_dim = 1

    def slots(self):
        return [np.eye(self.input_size)]

    def slot_component(self, slot):
        return None


class Max(Min):
    kind = 'max'
    sense = -1.0


class Abs(SelectionNode):
    """Componentwise |u| = max(u, -u)."""
    kind = 'abs'
    sense = -1.0

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.output_dim = self.input_size

    def slots(self):
        k = self.input_size
        eye = np.eye(k)
        return [np.vstack([eye[i], -eye[i]]) for i in range(k)]


class MinZero(SelectionNode):
    """Componentwise projection onto the nonpositive orthant, min(u, 0)."""
    kind = 'min_zero'

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.output_dim = self.input_size

    def slots(self):
        k = self.input_size
        eye = np.eye(k)
        return [np.vstack([eye[i], np.zeros(k)]) for i in range(k)]


class L1Norm(Abs):
    kind = 'l1'

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.output_dim = 1

    def combine(self):
        return np.ones((1, self.input_size))

    def local_lipschitz(self, u):
        return float(np.sqrt(self.input_size))


class L2Norm(Node):
    kind = 'l2'
    is_smooth = False

    def __init__(self, *children: Node, label: Optional[str] = None):
        super().__init__(*children, label=label)
        self.output_dim = 1

    def jet(self, u, du, ddu, tie_tol):
        r = np.linalg.norm(u)
        if r > tie_tol:
            g = u / r
            d1 = g @ du
            quad = (du @ du - d1 ** 2) / r
            return np.array([r]), np.array([d1]), np.array([quad + g @ ddu]), []
        s = np.linalg.norm(du)
        if s > tie_tol:
            return np.array([r]), np.array([s]), np.array([du @ ddu / s]), []
        return np.array([r]), np.array([s]), np.array([np.linalg.norm(ddu)]), []

    def first_options(self, u, U, tie_tol):
        r = np.linalg.norm(u)
        if r <= tie_tol:
            raise NotPiecewiseLinearError(f"l2 node {self.label} at its kink: d -> ||d|| is not piecewise linear")
        return [((u / r) @ U, _no_constraints(U.shape[1]), ())]

    def second_options(self, u, du, C, M, tie_tol):
        n = M.shape[1]
        r = np.linalg.norm(u)
        if r > tie_tol:
            g = u / r
            quad = (du @ du - (g @ du) ** 2) / r
            return [(np.array([quad + g @ C]), (g @ M)[None, :], np.zeros((0, n)), np.zeros(0), ())]
        s = np.linalg.norm(du)
        if s > tie_tol:
            g = du / s
            return [(np.array([g @ C]), (g @ M)[None, :], np.zeros((0, n)), np.zeros(0), ())]
        raise NotPiecewiseLinearError(f"l2 node {self.label} with zero value and direction: w -> ||w|| is not affine")

    def local_lipschitz(self, u):
        return 1.0


class Compose(Node):
    """outer(child(x)) for a separately built outer expression."""
    kind = 'compose'

    def __init__(self, outer: 'PiecewiseExpr', child: Node, label: Optional[str] = None):
        super().__init__(child, label=label)
        if outer.input_dim != child.output_dim:
            raise DimensionMismatchError(f"Composition: outer expects {outer.input_dim} inputs, "
                                         f"inner gives {child.output_dim}")
        self.outer = outer
        self.output_dim = outer.output_dim

    @property
    def is_smooth(self):
        return self.outer.is_smooth

    def jet(self, u, du, ddu, tie_tol):
        jet = self.outer.jet(u, du, ddu)
        chain = [ActiveSet(f"{self.label}/{a.node}", a.component, a.at_x, a.at_xd, a.at_xdw)
                 for a in jet.active_chain]
        return jet.value, jet.d1, jet.d2, chain

    def first_options(self, u, U, tie_tol):
        return [(p.jacobian, p.constraints, tuple((self.label,) + tuple(p.signature)) if p.signature else ())
                for p in self.outer.first_order_pieces(u, var_map=U)]

    def second_options(self, u, du, C, M, tie_tol):
        return [(p.offset, p.slope, p.cons_matrix, p.cons_offset,
                 tuple((self.label,) + tuple(p.signature)) if p.signature else ())
                for p in self.outer.second_order_pieces(u, du, var_affine=(C, M))]

    def local_lipschitz(self, u):
        return self.outer.lipschitz_estimate(u)


# --------------------------------------------------------------------------
# Expression
# --------------------------------------------------------------------------

class PiecewiseExpr:
    """A DAG rooted at `root`, evaluated on inputs of size input_dim."""

    def __init__(self, root: Node, input_dim: Optional[int] = None, tie_tol: float = DEFAULT_TOLERANCES.activity,
                 name: str = 'expr'):
        self.logger = logging.getLogger(__name__)
        self.root = root
        self.name = name
        self.tie_tol = tie_tol
        self.nodes = self._topological_order(root)
        for position, node in enumerate(self.nodes):
            if node.label is None:
                node.label = f"{node.kind}{position}"
        self._index = {id(node): i for i, node in enumerate(self.nodes)}
        dims = {node.input_dim for node in self.nodes if isinstance(node, Variable)}
        if input_dim is None:
            if len(dims) != 1:
                raise DimensionMismatchError("Cannot infer input_dim: give it explicitly")
            input_dim = dims.pop()
        elif dims and dims != {input_dim}:
            raise DimensionMismatchError(f"Variable nodes declare input sizes {sorted(dims)}, expression has {input_dim}")
        self.input_dim = int(input_dim)
        self.output_dim = root.output_dim
        if self.output_dim < 1 or self.input_dim < 1:
            raise DimensionMismatchError("Expressions need positive input and output sizes")

    @staticmethod
    def _topological_order(root: Node) -> List[Node]:
        order: List[Node] = []
        state: Dict[int, int] = {}

        def visit(node: Node):
            key = id(node)
            if state.get(key) == 2:
                return
            if state.get(key) == 1:
                raise ValueError("Expression graph contains a cycle")
            state[key] = 1
            for child in node.children:
                visit(child)
            state[key] = 2
            order.append(node)

        visit(root)
        return order

    @property
    def is_smooth(self) -> bool:
        return all(node.is_smooth for node in self.nodes)

    @property
    def has_selection(self) -> bool:
        return any(isinstance(node, SelectionNode) for node in self.nodes)

    def _check(self, *vectors) -> List[np.ndarray]:
        out = []
        for v in vectors:
            arr = np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)
            if arr.size != self.input_dim:
                raise DimensionMismatchError(f"{self.name}: expected vectors of size {self.input_dim}, got {arr.size}")
            out.append(arr)
        return out

    def _inputs(self, node: Node, results: List) -> Tuple[np.ndarray, ...]:
        parts = [results[self._index[id(child)]] for child in node.children]
        return tuple(np.concatenate([p[k] for p in parts]) for k in range(3))

    def jet(self, x, d=None, w=None) -> DirectionalJet:
        x, = self._check(x)
        d = np.zeros(self.input_dim) if d is None else self._check(d)[0]
        w = np.zeros(self.input_dim) if w is None else self._check(w)[0]
        results: List = [None] * len(self.nodes)
        chain: List[ActiveSet] = []
        for i, node in enumerate(self.nodes):
            u, du, ddu = (x, d, w) if node.is_leaf else self._inputs(node, results)
            value, d1, d2, active = node.jet(u, du, ddu, self.tie_tol)
            results[i] = (np.asarray(value, dtype=float), np.asarray(d1, dtype=float), np.asarray(d2, dtype=float))
            chain.extend(active)
        value, d1, d2 = results[-1]
        return DirectionalJet(value.copy(), d1.copy(), d2.copy(), chain)

    def eval(self, x) -> np.ndarray:
        return self.jet(x).value

    def dd1(self, x, d) -> np.ndarray:
        return self.jet(x, d).d1

    def dd2(self, x, d, w) -> np.ndarray:
        return self.jet(x, d, w).d2

    def active_sets(self, x, d=None, w=None) -> List[ActiveSet]:
        """Nested I(x), I(x,d), I(x,d,w) for every selection slot (empty for smooth DAGs)."""
        return self.jet(x, d, w).active_chain

    def _values(self, x: np.ndarray) -> List[np.ndarray]:
        zero = np.zeros(self.input_dim)
        results: List = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            u, du, ddu = (x, zero, zero) if node.is_leaf else self._inputs(node, results)
            results[i] = node.jet(u, du, ddu, self.tie_tol)[:3]
        return results

    def lipschitz_estimate(self, x) -> float:
        """Local Lipschitz modulus (2-norm), composed node by node."""
        x, = self._check(x)
        results = self._values(x)
        estimates: List[float] = [0.0] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.is_leaf:
                estimates[i] = node.local_lipschitz(x)
                continue
            u = np.concatenate([results[self._index[id(c)]][0] for c in node.children])
            inner = np.sqrt(sum(estimates[self._index[id(c)]] ** 2 for c in node.children))
            estimates[i] = node.local_lipschitz(u) * inner
        return float(estimates[-1])

    def first_order_pieces(self, x, var_map: Optional[np.ndarray] = None,
                           max_pieces: int = DEFAULT_MAX_PIECES) -> List[LinearPiece]:
        """Pieces on which d -> g'(x;d) is linear, with their validity cones."""
        x, = self._check(x)
        if var_map is None:
            var_map = np.eye(self.input_dim)
        n = var_map.shape[1]
        values = self._values(x)
        branches = [({}, [np.zeros((0, n))], ())]
        for i, node in enumerate(self.nodes):
            if node.is_leaf:
                u = x
            else:
                u = np.concatenate([values[self._index[id(c)]][0] for c in node.children])
            expanded = []
            for maps, cons, sig in branches:
                U = var_map if node.is_leaf else np.vstack([maps[self._index[id(c)]] for c in node.children])
                for L, extra, tag in node.first_options(u, U, self.tie_tol):
                    new_maps = dict(maps)
                    new_maps[i] = np.atleast_2d(L)
                    expanded.append((new_maps, cons + [extra], sig + tag))
            branches = expanded
            if len(branches) > max_pieces:
                raise ScaleExceededError(f"{self.name}: more than {max_pieces} first-order pieces")
        root = len(self.nodes) - 1
        return [LinearPiece(maps[root], np.vstack(cons), sig) for maps, cons, sig in branches]

    def second_order_pieces(self, x, d, var_affine: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                            max_pieces: int = DEFAULT_MAX_PIECES) -> List[AffinePiece]:
        """Pieces on which w -> g''(x;d,w) is affine, for fixed d."""
        x, d = self._check(x, d)
        if var_affine is None:
            var_affine = (np.zeros(self.input_dim), np.eye(self.input_dim))
        C0, M0 = var_affine
        n = M0.shape[1]
        zero = np.zeros(self.input_dim)
        # values and first-order directional data of every node
        results: List = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            u, du, ddu = (x, d, zero) if node.is_leaf else self._inputs(node, results)
            results[i] = node.jet(u, du, ddu, self.tie_tol)[:3]

        branches = [({}, [np.zeros((0, n))], [np.zeros(0)], ())]
        for i, node in enumerate(self.nodes):
            if node.is_leaf:
                u, du = x, d
            else:
                u = np.concatenate([results[self._index[id(c)]][0] for c in node.children])
                du = np.concatenate([results[self._index[id(c)]][1] for c in node.children])
            expanded = []
            for maps, G_list, h_list, sig in branches:
                if node.is_leaf:
                    C, M = C0, M0
                else:
                    C = np.concatenate([maps[self._index[id(c)]][0] for c in node.children])
                    M = np.vstack([maps[self._index[id(c)]][1] for c in node.children])
                for c, Mo, G, h, tag in node.second_options(u, du, C, M, self.tie_tol):
                    new_maps = dict(maps)
                    new_maps[i] = (np.atleast_1d(c), np.atleast_2d(Mo))
                    expanded.append((new_maps, G_list + [G], h_list + [h], sig + tag))
            branches = expanded
            if len(branches) > max_pieces:
                raise ScaleExceededError(f"{self.name}: more than {max_pieces} second-order pieces")
        root = len(self.nodes) - 1
        return [AffinePiece(maps[root][0], maps[root][1], np.vstack(G), np.concatenate(h), sig)
                for maps, G, h, sig in branches]

    # Smooth calculus used by the bilevel module

    def _require_smooth(self):
        if not self.is_smooth:
            raise ValueError(f"{self.name}: derivative matrices need a smooth expression")

    def jacobian(self, x) -> np.ndarray:
        self._require_smooth()
        x, = self._check(x)
        eye = np.eye(self.input_dim)
        return np.column_stack([self.dd1(x, eye[j]) for j in range(self.input_dim)])

    def hessians(self, x) -> np.ndarray:
        """Array (output_dim, n, n) by polarization of d -> g''(x;d,0)."""
        self._require_smooth()
        x, = self._check(x)
        n = self.input_dim
        eye = np.eye(n)
        zero = np.zeros(n)
        diag = [self.dd2(x, eye[i], zero) for i in range(n)]
        H = np.zeros((self.output_dim, n, n))
        for i in range(n):
            H[:, i, i] = diag[i]
            for j in range(i + 1, n):
                q = self.dd2(x, eye[i] + eye[j], zero)
                H[:, i, j] = H[:, j, i] = 0.5 * (q - diag[i] - diag[j])
        return H

    @property
    def analytic_third(self) -> bool:
        if all(isinstance(node, (Variable, Constant, Affine, Sum, Scale)) for node in self.nodes):
            return True
        root = self.root
        return (isinstance(root, SmoothAtom) and root.third_fn is not None and len(root.children) == 1
                and isinstance(root.children[0], Variable)
                and root.children[0].indices == tuple(range(self.input_dim)))

    def third_action(self, x, d, step: float = 1e-4, allow_finite_differences: bool = True) -> np.ndarray:
        """D^3 g(x)[d, d, .] with shape (output_dim, n)."""
        self._require_smooth()
        x, d = self._check(x, d)
        if self.analytic_third:
            if isinstance(self.root, SmoothAtom):
                return np.asarray(self.root.third_fn(x, d), dtype=float)
            return np.zeros((self.output_dim, self.input_dim))
        if not allow_finite_differences:
            raise ValueError(f"{self.name}: no third-order data and finite differences are disabled")

        def central(h):
            return np.einsum('kij,j->ki', (self.hessians(x + h * d) - self.hessians(x - h * d)) / (2 * h), d)

        return (4.0 * central(step / 2) - central(step)) / 3.0
