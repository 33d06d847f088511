#!/usr/bin/env python3
"""
Tests for piecewise-smooth expressions: closed forms at kinks, homogeneity,
difference quotients and the piece enumeration.
"""

import numpy as np
import pytest

from errors import DimensionMismatchError, NotPiecewiseLinearError
from expressions import (Abs, Affine, Compose, L1Norm, L2Norm, Max, Min, MinZero, PiecewiseExpr, Polynomial,
                         PolynomialAtom, Scale, SelectionNode, Sum, Variable)
from regularity_probe import PathFamily, ProbeMode, RegularityProber


def square(input_dim, index):
    exponents = [0] * input_dim
    exponents[index] = 2
    return Polynomial(input_dim, [[(1.0, exponents)]])


def kink_cases():
    """(name, expression, point) pairs with the point on a kink."""
    abs_1d = PiecewiseExpr(Abs(Variable(1)), name='abs_1d')
    return [
        ('abs', PiecewiseExpr(Abs(Variable(2))), np.zeros(2)),
        ('min_zero', PiecewiseExpr(MinZero(Variable(2))), np.array([0.0, 1.0])),
        ('l1', PiecewiseExpr(L1Norm(Variable(2))), np.zeros(2)),
        ('l2_kink', PiecewiseExpr(L2Norm(Variable(2))), np.zeros(2)),
        ('l2_smooth', PiecewiseExpr(L2Norm(Variable(2))), np.array([1.0, 0.0])),
        ('min', PiecewiseExpr(Min(Variable(2))), np.array([1.0, 1.0])),
        ('max_poly', PiecewiseExpr(Max(PolynomialAtom(square(1, 0), Variable(2, [0])), Variable(2, [1]))),
         np.zeros(2)),
        ('compose', PiecewiseExpr(Compose(abs_1d, Affine([[1.0, -1.0]], None, Variable(2)))),
         np.array([0.5, 0.5])),
        ('sum', PiecewiseExpr(Sum(Abs(Variable(2, [0])), PolynomialAtom(square(1, 0), Variable(2, [1])))),
         np.zeros(2)),
    ]


CASES = kink_cases()
CASE_IDS = [name for name, _, _ in CASES]


def test_abs_closed_form():
    expr = PiecewiseExpr(Abs(Variable(1)))
    assert expr.dd1([0.0], [-3.0]) == pytest.approx([3.0])
    assert expr.dd2([0.0], [2.0], [-5.0]) == pytest.approx([-5.0])
    assert expr.dd2([0.0], [-2.0], [-5.0]) == pytest.approx([5.0])
    assert expr.dd2([0.0], [0.0], [-5.0]) == pytest.approx([5.0])


def test_min_zero_closed_form():
    expr = PiecewiseExpr(MinZero(Variable(1)))
    assert expr.dd1([0.0], [2.0]) == pytest.approx([0.0])
    assert expr.dd1([0.0], [-2.0]) == pytest.approx([-2.0])
    assert expr.dd2([0.0], [-1.0], [3.0]) == pytest.approx([3.0])
    assert expr.dd2([0.0], [1.0], [3.0]) == pytest.approx([0.0])
    assert expr.dd2([0.0], [0.0], [3.0]) == pytest.approx([0.0])
    assert expr.dd2([0.0], [0.0], [-3.0]) == pytest.approx([-3.0])


def test_l1_and_l2_closed_forms():
    l1 = PiecewiseExpr(L1Norm(Variable(2)))
    l2 = PiecewiseExpr(L2Norm(Variable(2)))
    d, w = np.array([3.0, -4.0]), np.array([1.0, 2.0])
    assert l1.dd1(np.zeros(2), d) == pytest.approx([7.0])
    assert l1.dd2(np.zeros(2), d, w) == pytest.approx([1.0 - 2.0])
    assert l2.dd1(np.zeros(2), d) == pytest.approx([5.0])
    assert l2.dd2(np.zeros(2), d, w) == pytest.approx([(3.0 - 8.0) / 5.0])


def test_min_tie_closed_form():
    expr = PiecewiseExpr(Min(Variable(2)))
    x = np.array([1.0, 1.0])
    assert expr.dd1(x, [2.0, -1.0]) == pytest.approx([-1.0])
    assert expr.dd2(x, [1.0, 1.0], [4.0, -2.0]) == pytest.approx([-2.0])


def test_active_sets_are_nested():
    expr = PiecewiseExpr(Min(Variable(3)))
    chain = expr.active_sets([1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 2.0, -1.0])
    assert len(chain) == 1
    active = chain[0]
    assert active.at_x == (0, 1, 2)
    assert active.at_xd == (1, 2)
    assert active.at_xdw == (2,)
    assert set(active.at_xdw) <= set(active.at_xd) <= set(active.at_x)


def test_polynomial_derivatives():
    p = Polynomial(2, [[(1.0, (2, 1)), (3.0, (0, 1))]])
    u = np.array([1.0, 2.0])
    assert p.value(u) == pytest.approx([8.0])
    assert p.jacobian(u) == pytest.approx(np.array([[4.0, 4.0]]))
    assert p.hessians(u)[0] == pytest.approx(np.array([[4.0, 2.0], [2.0, 0.0]]))
    assert p.third_action(u, np.array([1.0, 1.0]))[0] == pytest.approx([4.0, 2.0])


def test_smooth_expression_matrices():
    p = Polynomial(2, [[(1.0, (2, 1)), (3.0, (0, 1))]])
    expr = PiecewiseExpr(PolynomialAtom(p, Variable(2)))
    u = [1.0, 2.0]
    assert expr.jacobian(u) == pytest.approx(np.array([[4.0, 4.0]]))
    assert expr.hessians(u)[0] == pytest.approx(np.array([[4.0, 2.0], [2.0, 0.0]]))
    assert expr.analytic_third
    assert expr.third_action(u, [1.0, 1.0])[0] == pytest.approx([4.0, 2.0])


def test_third_action_by_finite_differences():
    p = Polynomial(2, [[(1.0, (2, 1)), (3.0, (0, 1))]])
    expr = PiecewiseExpr(Scale(2.0, PolynomialAtom(p, Variable(2))))
    assert not expr.analytic_third
    third = expr.third_action([1.0, 2.0], [1.0, 1.0])
    assert third[0] == pytest.approx([8.0, 4.0], rel=1e-5, abs=1e-5)
    with pytest.raises(ValueError):
        expr.third_action([1.0, 2.0], [1.0, 1.0], allow_finite_differences=False)


def test_dimension_mismatch():
    expr = PiecewiseExpr(Abs(Variable(2)))
    with pytest.raises(DimensionMismatchError):
        expr.eval([0.0, 0.0, 0.0])
    with pytest.raises(DimensionMismatchError):
        expr.dd1([0.0, 0.0], [1.0])


def test_nonsmooth_expression_has_no_jacobian():
    with pytest.raises(ValueError):
        PiecewiseExpr(Abs(Variable(1))).jacobian([0.0])


def test_lipschitz_estimates():
    assert PiecewiseExpr(Abs(Variable(1))).lipschitz_estimate([0.0]) == pytest.approx(1.0)
    assert PiecewiseExpr(Scale(-3.0, Abs(Variable(1)))).lipschitz_estimate([0.0]) == pytest.approx(3.0)


def test_compose_absolute_difference():
    _, expr, x = CASES[CASE_IDS.index('compose')]
    assert expr.eval([2.0, -1.0]) == pytest.approx([3.0])
    assert expr.dd1(x, [1.0, 3.0]) == pytest.approx([2.0])
    assert expr.dd2(x, [1.0, 3.0], [5.0, 1.0]) == pytest.approx([-4.0])


@pytest.mark.parametrize("name,expr,x", CASES, ids=CASE_IDS)
def test_positive_homogeneity(name, expr, x):
    rng = np.random.default_rng(11)
    for _ in range(25):
        d = rng.standard_normal(expr.input_dim)
        w = rng.standard_normal(expr.input_dim)
        lam = rng.uniform(0.5, 3.0)
        assert expr.dd1(x, lam * d) == pytest.approx(lam * expr.dd1(x, d), abs=1e-10)
        assert expr.dd2(x, lam * d, lam ** 2 * w) == pytest.approx(lam ** 2 * expr.dd2(x, d, w), abs=1e-9)


def richardson_errors(expr, x, d, w, exponents=range(6, 15)):
    """Extrapolated first and second difference-quotient errors on t = 2^-k."""
    g0 = expr.eval(x)
    g1 = expr.dd1(x, d)
    g2 = expr.dd2(x, d, w)

    def first(t):
        return (expr.eval(x + t * d) - g0) / t

    def second(t):
        return 2.0 * (expr.eval(x + t * d + 0.5 * t ** 2 * w) - g0 - t * g1) / t ** 2

    grid = [2.0 ** -k for k in exponents]
    errors_1 = [np.max(np.abs(2.0 * first(t / 2) - first(t) - g1)) for t in grid]
    errors_2 = [np.max(np.abs(2.0 * second(t / 2) - second(t) - g2)) for t in grid]
    return g1, g2, min(errors_1), min(errors_2)


@pytest.mark.parametrize("name,expr,x", CASES, ids=CASE_IDS)
def test_directional_derivatives_match_difference_quotients(name, expr, x):
    rng = np.random.default_rng(3)
    for _ in range(10):
        d = rng.standard_normal(expr.input_dim)
        w = rng.standard_normal(expr.input_dim)
        g1, g2, error_1, error_2 = richardson_errors(expr, x, d, w)
        assert error_1 <= 1e-6 * (1.0 + np.max(np.abs(g1)))
        assert error_2 <= 1e-4 * (1.0 + np.max(np.abs(g2)))


@pytest.mark.parametrize("name,expr,x", [c for c in CASES if c[0] != 'l2_kink'],
                         ids=[n for n in CASE_IDS if n != 'l2_kink'])
def test_first_order_pieces_reproduce_dd1(name, expr, x):
    rng = np.random.default_rng(5)
    pieces = expr.first_order_pieces(x)
    assert pieces
    for _ in range(20):
        d = rng.standard_normal(expr.input_dim)
        valid = [p for p in pieces if np.all(p.constraints @ d <= 1e-12)]
        assert valid
        for piece in valid:
            assert piece.jacobian @ d == pytest.approx(expr.dd1(x, d), abs=1e-10)


@pytest.mark.parametrize("name,expr,x", CASES, ids=CASE_IDS)
def test_second_order_pieces_reproduce_dd2(name, expr, x):
    rng = np.random.default_rng(9)
    for _ in range(10):
        d = rng.standard_normal(expr.input_dim)
        pieces = expr.second_order_pieces(x, d)
        assert pieces
        for _ in range(5):
            w = rng.standard_normal(expr.input_dim)
            valid = [p for p in pieces if np.all(p.cons_matrix @ w + p.cons_offset <= 1e-12)]
            assert valid
            for piece in valid:
                assert piece.offset + piece.slope @ w == pytest.approx(expr.dd2(x, d, w), abs=1e-9)


def test_second_order_pieces_split_on_direction_ties():
    expr = PiecewiseExpr(Max(Variable(2)))
    pieces = expr.second_order_pieces(np.zeros(2), np.array([1.0, 1.0]))
    assert len(pieces) == 2
    for w in ([2.0, -1.0], [-1.0, 2.0]):
        w = np.array(w)
        valid = [p for p in pieces if np.all(p.cons_matrix @ w + p.cons_offset <= 0)]
        assert len(valid) == 1
        assert valid[0].offset + valid[0].slope @ w == pytest.approx([2.0])


def test_l2_kink_is_not_piecewise_linear():
    expr = PiecewiseExpr(L2Norm(Variable(2)))
    with pytest.raises(NotPiecewiseLinearError):
        expr.first_order_pieces(np.zeros(2))
    with pytest.raises(NotPiecewiseLinearError):
        expr.second_order_pieces(np.zeros(2), np.zeros(2))


def test_cycle_free_dag_shares_nodes():
    shared = Abs(Variable(2))
    expr = PiecewiseExpr(Sum(shared, shared))
    assert len([node for node in expr.nodes if node is shared]) == 1
    assert expr.eval([-1.0, 2.0]) == pytest.approx([2.0, 4.0])


# --------------------------------------------------------------------------
# Seeded random DAGs
# --------------------------------------------------------------------------

DAG_INPUT_DIM = 3
DAG_KINDS = ('affine', 'polynomial', 'abs', 'min_zero', 'min', 'max', 'l1', 'l2', 'sum', 'scale')
PC2_KINDS = tuple(kind for kind in DAG_KINDS if kind != 'l2')
PIECEWISE_LINEAR_KINDS = tuple(kind for kind in PC2_KINDS if kind != 'polynomial')
UNARY_ATOMS = {'abs': Abs, 'min_zero': MinZero, 'l1': L1Norm, 'l2': L2Norm}


def random_polynomial(rng, k):
    """Scalar polynomial of degree 1 or 2 in k inputs, no constant term."""
    terms = []
    for _ in range(3):
        exponents = [0] * k
        exponents[int(rng.integers(k))] += 1
        if rng.random() < 0.6:
            exponents[int(rng.integers(k))] += 1
        terms.append((float(rng.uniform(-0.5, 0.5)), exponents))
    return Polynomial(k, [terms])


def random_projection(rng, rows, child):
    k = child.output_dim
    return Affine(rng.uniform(-1.0, 1.0, (rows, k)) / np.sqrt(k), None, child)


def random_node(rng, depth, kinds):
    if depth == 0 or rng.random() < 0.15:
        if rng.random() < 0.5:
            return Variable(DAG_INPUT_DIM)
        size = int(rng.integers(1, DAG_INPUT_DIM + 1))
        return Variable(DAG_INPUT_DIM, sorted(rng.choice(DAG_INPUT_DIM, size=size, replace=False).tolist()))
    kind = kinds[int(rng.integers(len(kinds)))]
    child = random_node(rng, depth - 1, kinds)
    if kind == 'affine':
        return random_projection(rng, int(rng.integers(1, 3)), child)
    if kind == 'polynomial':
        return PolynomialAtom(random_polynomial(rng, child.output_dim), child)
    if kind == 'scale':
        return Scale(float(rng.uniform(-2.0, 2.0)), child)
    if kind == 'sum':
        return Sum(child, random_projection(rng, child.output_dim, random_node(rng, depth - 1, kinds)))
    if kind in ('min', 'max'):
        other = random_projection(rng, 1, random_node(rng, depth - 1, kinds))
        return (Min if kind == 'min' else Max)(child, other)
    return UNARY_ATOMS[kind](child)


def random_dags(seed, count, kinds):
    """Seeded DAGs of depth at most 4; affine maps carry no offset, so every kink meets at 0."""
    rng = np.random.default_rng(seed)
    return [PiecewiseExpr(random_node(rng, int(rng.integers(1, 5)), kinds), input_dim=DAG_INPUT_DIM, name=f'dag{i}')
            for i in range(count)]


RANDOM_DAGS = random_dags(2024, 200, DAG_KINDS)
PC2_DAGS = random_dags(99, 100, PC2_KINDS)
PIECEWISE_LINEAR_DAGS = random_dags(123, 100, PIECEWISE_LINEAR_KINDS)


def kink_margin(expr, x):
    """Smallest gap between competing selection options or l2 argument norm at x, and the largest node value.

    Options that coincide exactly stay tied along every path and are skipped.
    """
    values = {}
    margin, largest = np.inf, 0.0
    for node in expr.nodes:
        u = x if node.is_leaf else np.concatenate([values[id(child)] for child in node.children])
        values[id(node)] = node.jet(u, np.zeros_like(u), np.zeros_like(u), expr.tie_tol)[0]
        if isinstance(node, SelectionNode):
            for O in node.slots():
                gaps = np.diff(np.sort(O @ u))
                gaps = gaps[gaps > 0.0]
                if gaps.size:
                    margin = min(margin, float(np.min(gaps)))
        elif isinstance(node, L2Norm) and np.linalg.norm(u) > 0.0:
            margin = min(margin, float(np.linalg.norm(u)))
        largest = max(largest, float(np.max(np.abs(values[id(node)]))))
    return margin, largest


def generic_point(expr, rng):
    for _ in range(500):
        x = rng.uniform(-1.0, 1.0, expr.input_dim)
        margin, largest = kink_margin(expr, x)
        if margin >= 1e-2 and largest <= 1e2:
            return x
    pytest.fail(f"{expr.name}: no point away from the kinks")


def test_random_dags_cover_every_atom():
    kinds = {node.kind for expr in RANDOM_DAGS for node in expr.nodes}
    assert {'variable', 'affine', 'polynomial', 'abs', 'min_zero', 'min', 'max', 'l1', 'l2', 'sum', 'scale'} <= kinds
    assert max(len(expr.nodes) for expr in RANDOM_DAGS) > 5
    assert not any(node.kind == 'l2' for expr in PC2_DAGS for node in expr.nodes)
    assert not any(node.kind == 'polynomial' for expr in PIECEWISE_LINEAR_DAGS for node in expr.nodes)


@pytest.mark.parametrize("index", range(len(RANDOM_DAGS)))
def test_random_dag_homogeneity(index):
    expr = RANDOM_DAGS[index]
    rng = np.random.default_rng(index)
    n = expr.input_dim
    for x in (np.zeros(n), rng.uniform(-1.0, 1.0, n)):
        d = rng.uniform(-1.0, 1.0, n)
        w = rng.uniform(-1.0, 1.0, n)
        g1 = expr.dd1(x, d)
        g2 = expr.dd2(x, d, w)
        for t in (0.5, 2.0, 10.0):
            assert expr.dd1(x, t * d) == pytest.approx(t * g1, rel=1e-9, abs=1e-10)
            assert expr.dd2(x, t * d, t ** 2 * w) == pytest.approx(t ** 2 * g2, rel=1e-9, abs=1e-10)


@pytest.mark.parametrize("index", range(len(RANDOM_DAGS)))
def test_random_dag_difference_quotients(index):
    expr = RANDOM_DAGS[index]
    rng = np.random.default_rng(1000 + index)
    for _ in range(3):
        x = generic_point(expr, rng)
        d = rng.uniform(-1.0, 1.0, expr.input_dim)
        w = rng.uniform(-1.0, 1.0, expr.input_dim)
        g1, g2, error_1, error_2 = richardson_errors(expr, x, d, w)
        assert error_1 <= 1e-4 * (1.0 + np.max(np.abs(g1)))
        assert error_2 <= 1e-4 * (1.0 + np.max(np.abs(g2)))


@pytest.mark.parametrize("index", range(len(PIECEWISE_LINEAR_DAGS)))
def test_piecewise_linear_dag_has_no_parabolic_residual(index, settings):
    expr = PIECEWISE_LINEAR_DAGS[index]
    rng = np.random.default_rng(index)
    d = rng.uniform(-1.0, 1.0, expr.input_dim)
    w = rng.uniform(-1.0, 1.0, expr.input_dim)
    report = RegularityProber(settings).probe(expr, np.zeros(expr.input_dim), d, PathFamily.CONSTANT_W,
                                              ProbeMode.GPH, w0=w)
    assert max(report.residual_over_t2[-4:]) <= 1e-7


@pytest.mark.parametrize("index", range(len(PC2_DAGS)))
def test_pc2_dag_parabolic_residual_vanishes(index, settings):
    expr = PC2_DAGS[index]
    rng = np.random.default_rng(500 + index)
    d = rng.uniform(-1.0, 1.0, expr.input_dim)
    w = rng.uniform(-1.0, 1.0, expr.input_dim)
    report = RegularityProber(settings).probe(expr, np.zeros(expr.input_dim), d, PathFamily.CONSTANT_W,
                                              ProbeMode.GPH, w0=w)
    ratios = report.residual_over_t2
    assert report.t_grid[-7] == 2.0 ** -14
    # residual / t^2 is O(t) once the pieces settle
    assert ratios[-1] <= 0.0625 * ratios[-7] + 1e-7
    assert ratios[-1] <= 1e-4 * (1.0 + np.max(np.abs(expr.dd2(np.zeros(expr.input_dim), d, w))))
