#!/usr/bin/env python3
"""
Problem files: JSON descriptions of a nonsmooth program or a bilevel program.

A file names its expressions as small DAGs whose node vocabulary mirrors the
atoms in expressions.py, the polyhedral sets they map into, the reference
point, and optional tolerance overrides. Everything is validated before any
computation; schema problems are reported together with line and column.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from bilevel_problem import BilevelProblem
from cones import Factor, PolyhedralSet
from errors import DimensionMismatchError, InfeasibleReferenceError, ProblemFileError, SchemaIssue
from expressions import (Abs, Affine, Compose, Constant, L1Norm, L2Norm, Max, Min, MinZero, Node, PiecewiseExpr,
                         Polynomial, PolynomialAtom, Scale, Stack, Sum, Variable)
from nsopt_checker import NonsmoothProgram
from verification_config import Tolerances

FORMAT_VERSION = "1.0"

logger = logging.getLogger(__name__)


class ProblemKind(Enum):
    NONSMOOTH_P = "nonsmooth_p"
    BILEVEL = "bilevel"


# op -> (minimum args, maximum args or None, required fields, optional fields)
ATOMS = {
    'variable': (0, 0, (), ('indices',)),
    'constant': (0, 0, ('value',), ()),
    'affine': (1, None, ('A',), ('b',)),
    'polynomial': (1, None, ('terms',), ()),
    'abs': (1, None, (), ()),
    'min_zero': (1, None, (), ()),
    'min': (1, None, (), ()),
    'max': (1, None, (), ()),
    'l1': (1, None, (), ()),
    'l2': (1, None, (), ()),
    'sum': (1, None, (), ()),
    'stack': (1, None, (), ()),
    'scale': (1, 1, ('factor',), ()),
    'compose': (1, 1, ('expression',), ()),
}

SELECTION_ATOMS = {'abs': Abs, 'min_zero': MinZero, 'min': Min, 'max': Max, 'l1': L1Norm, 'l2': L2Norm,
                   'sum': Sum, 'stack': Stack}

ROLES = {
    ProblemKind.NONSMOOTH_P: (('f', 'G'), ()),
    ProblemKind.BILEVEL: (('F', 'f'), ('G', 'H', 'g', 'h')),
}

POINTS = {
    ProblemKind.NONSMOOTH_P: (('x_star',), ()),
    ProblemKind.BILEVEL: (('x_star', 'y_star'), ('mu_star', 'xi_star')),
}

TOP_LEVEL_KEYS = {'format_version', 'kind', 'name', 'description', 'expressions', 'sets', 'points',
                  'tolerances', 'roles'}

NODE_BASE_KEYS = {'id', 'op', 'args'}


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _is_vector(value) -> bool:
    return isinstance(value, list) and all(_is_number(v) for v in value)


def _is_matrix(value) -> bool:
    if not isinstance(value, list) or not all(_is_vector(row) for row in value):
        return False
    return len({len(row) for row in value}) <= 1


@dataclass
class ProblemFile:
    """A validated problem file."""
    kind: ProblemKind
    expressions: Dict[str, Dict]
    points: Dict[str, List[float]]
    sets: Dict[str, Dict] = field(default_factory=dict)
    roles: Dict[str, str] = field(default_factory=dict)
    tolerances: Dict[str, float] = field(default_factory=dict)
    name: str = ''
    description: str = ''
    format_version: str = FORMAT_VERSION

    def to_dict(self) -> Dict:
        """Convert to dictionary for JSON serialization."""
        return {
            'format_version': self.format_version,
            'kind': self.kind.value,
            'name': self.name,
            'description': self.description,
            'expressions': self.expressions,
            'sets': self.sets,
            'points': self.points,
            'tolerances': self.tolerances,
            'roles': self.roles,
        }

    @classmethod
    def from_dict(cls, data: Dict, text: Optional[str] = None) -> 'ProblemFile':
        """Validate and create from dictionary; raises ProblemFileError listing every issue."""
        issues = ProblemValidator(text).validate(data)
        if issues:
            raise ProblemFileError(issues)
        return cls(
            kind=ProblemKind(data['kind']),
            expressions=data['expressions'],
            points=data['points'],
            sets=data.get('sets', {}),
            roles=data.get('roles', {}),
            tolerances=data.get('tolerances', {}),
            name=data.get('name', ''),
            description=data.get('description', ''),
            format_version=data['format_version'],
        )

    def digest(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def tolerance_overrides(self, base: Optional[Tolerances] = None) -> Tolerances:
        """Base tolerances with this file's overrides applied."""
        merged = dict((base or Tolerances()).to_dict())
        merged.update(self.tolerances)
        return Tolerances.from_dict(merged)

    def expression_for(self, role: str) -> Optional[str]:
        name = self.roles.get(role, role)
        return name if name in self.expressions else None

    def build(self, tol: Optional[Tolerances] = None) -> Union[NonsmoothProgram, BilevelProblem]:
        """Instantiate the program this file describes."""
        tol = tol or self.tolerance_overrides()
        builder = ExpressionBuilder(self.expressions, tie_tol=tol.activity)
        try:
            if self.kind == ProblemKind.NONSMOOTH_P:
                return NonsmoothProgram(
                    f=builder.build(self.expression_for('f')),
                    G=builder.build(self.expression_for('G')),
                    K=PolyhedralSet.from_dict(self.sets['K'], tol=tol),
                    x_star=self.points['x_star'],
                )
            optional = {role: builder.build(self.expression_for(role))
                        for role in ROLES[ProblemKind.BILEVEL][1] if self.expression_for(role)}
            return BilevelProblem(
                F=builder.build(self.expression_for('F')),
                f=builder.build(self.expression_for('f')),
                x_star=self.points['x_star'],
                y_star=self.points['y_star'],
                mu_star=self.points.get('mu_star'),
                xi_star=self.points.get('xi_star'),
                tol=tol,
                **optional,
            )
        except (InfeasibleReferenceError, ProblemFileError):
            raise
        except (DimensionMismatchError, ValueError) as e:
            raise ProblemFileError([SchemaIssue(self.kind.value, str(e))]) from e


class ExpressionBuilder:
    """Turns expression blocks into PiecewiseExpr objects, resolving compose references."""

    def __init__(self, blocks: Dict[str, Dict], tie_tol: float):
        self.logger = logging.getLogger(__name__)
        self.blocks = blocks
        self.tie_tol = tie_tol
        self._built: Dict[str, PiecewiseExpr] = {}
        self._building: List[str] = []

    def build(self, name: str) -> PiecewiseExpr:
        if name in self._built:
            return self._built[name]
        if name in self._building:
            cycle = ' -> '.join(self._building + [name])
            raise ProblemFileError([SchemaIssue(f"expressions.{name}", f"compose cycle {cycle}")])
        self._building.append(name)
        block = self.blocks[name]
        input_dim = int(block['input_dim'])
        nodes: Dict[str, Node] = {}
        for position, spec in enumerate(block['nodes']):
            path = f"expressions.{name}.nodes[{position}]"
            try:
                nodes[spec['id']] = self._node(spec, input_dim, [nodes[a] for a in spec.get('args', [])])
            except (DimensionMismatchError, ValueError) as e:
                if isinstance(e, ProblemFileError):
                    raise
                raise ProblemFileError([SchemaIssue(path, str(e))]) from e
        try:
            expr = PiecewiseExpr(nodes[block['output']], input_dim=input_dim, tie_tol=self.tie_tol, name=name)
        except DimensionMismatchError as e:
            raise ProblemFileError([SchemaIssue(f"expressions.{name}", str(e))]) from e
        self._building.pop()
        self._built[name] = expr
        self.logger.debug(f"Built expression {name}: {expr.input_dim} -> {expr.output_dim}")
        return expr

    def _node(self, spec: Dict, input_dim: int, children: List[Node]) -> Node:
        op, label = spec['op'], spec['id']
        if op == 'variable':
            return Variable(input_dim, spec.get('indices'), label=label)
        if op == 'constant':
            return Constant(spec['value'], label=label)
        if op == 'affine':
            return Affine(spec['A'], spec.get('b'), *children, label=label)
        if op == 'polynomial':
            size = sum(child.output_dim for child in children)
            return PolynomialAtom(Polynomial(size, spec['terms']), *children, label=label)
        if op == 'scale':
            return Scale(float(spec['factor']), children[0], label=label)
        if op == 'compose':
            return Compose(self.build(spec['expression']), children[0], label=label)
        return SELECTION_ATOMS[op](*children, label=label)


class ProblemValidator:
    """Schema checks; collects every issue instead of stopping at the first."""

    def __init__(self, text: Optional[str] = None):
        self.text = text
        self.issues: List[SchemaIssue] = []

    def _position(self, pattern: Optional[str]) -> Tuple[Optional[int], Optional[int]]:
        if not self.text or not pattern:
            return None, None
        match = re.search(pattern, self.text)
        if match is None:
            return None, None
        start = match.start()
        line = self.text.count('\n', 0, start) + 1
        column = start - (self.text.rfind('\n', 0, start) + 1) + 1
        return line, column

    def issue(self, path: str, message: str, pattern: Optional[str] = None) -> None:
        line, column = self._position(pattern)
        self.issues.append(SchemaIssue(path, message, line, column))

    @staticmethod
    def _key(name: str) -> str:
        return rf'"{re.escape(name)}"\s*:'

    def validate(self, data) -> List[SchemaIssue]:
        self.issues = []
        if not isinstance(data, dict):
            self.issue('$', "top level must be a JSON object")
            return self.issues
        for key in sorted(set(data) - TOP_LEVEL_KEYS):
            self.issue(key, "unknown top-level key", self._key(key))

        version = data.get('format_version')
        if version is None:
            self.issue('format_version', "missing")
        elif not isinstance(version, str) or version.split('.')[0] != FORMAT_VERSION.split('.')[0]:
            self.issue('format_version', f"unsupported version {version!r}, expected {FORMAT_VERSION}",
                       self._key('format_version'))

        try:
            kind = ProblemKind(data.get('kind'))
        except ValueError:
            self.issue('kind', f"must be one of {[k.value for k in ProblemKind]}, got {data.get('kind')!r}",
                       self._key('kind'))
            kind = None

        for key in ('name', 'description'):
            if key in data and not isinstance(data[key], str):
                self.issue(key, "must be a string", self._key(key))

        expressions = data.get('expressions')
        if not isinstance(expressions, dict) or not expressions:
            self.issue('expressions', "must be a non-empty object", self._key('expressions'))
            expressions = {}
        for name, block in expressions.items():
            self._expression(name, block, expressions)

        self._roles(data.get('roles', {}), kind, expressions)
        self._sets(data.get('sets', {}), kind)
        self._points(data.get('points'), kind)

        tolerances = data.get('tolerances', {})
        if not isinstance(tolerances, dict):
            self.issue('tolerances', "must be an object", self._key('tolerances'))
        else:
            try:
                Tolerances.from_dict(tolerances)
            except (TypeError, ValueError) as e:
                self.issue('tolerances', str(e), self._key('tolerances'))
        return self.issues

    def _expression(self, name: str, block, expressions: Dict) -> None:
        path = f"expressions.{name}"
        where = self._key(name)
        if not isinstance(block, dict):
            self.issue(path, "must be an object", where)
            return
        for key in sorted(set(block) - {'input_dim', 'nodes', 'output', 'description'}):
            self.issue(f"{path}.{key}", "unknown key", self._key(key))
        input_dim = block.get('input_dim')
        if not isinstance(input_dim, int) or isinstance(input_dim, bool) or input_dim < 1:
            self.issue(f"{path}.input_dim", "must be a positive integer", where)
        nodes = block.get('nodes')
        if not isinstance(nodes, list) or not nodes:
            self.issue(f"{path}.nodes", "must be a non-empty list", where)
            return
        seen = set()
        for position, node in enumerate(nodes):
            self._node(f"{path}.nodes[{position}]", node, seen, expressions, name)
        if block.get('output') not in seen:
            self.issue(f"{path}.output", f"must name a node id, got {block.get('output')!r}", where)

    def _node(self, path: str, node, seen: set, expressions: Dict, owner: str) -> None:
        if not isinstance(node, dict):
            self.issue(path, "node must be an object")
            return
        node_id = node.get('id')
        where = rf'"id"\s*:\s*"{re.escape(str(node_id))}"'
        if not isinstance(node_id, str) or not node_id:
            self.issue(f"{path}.id", "must be a non-empty string")
            return
        if node_id in seen:
            self.issue(f"{path}.id", f"duplicate node id {node_id!r}", where)
        op = node.get('op')
        if op not in ATOMS:
            self.issue(f"{path}.op", f"unknown atom {op!r}", rf'"op"\s*:\s*"{re.escape(str(op))}"')
            seen.add(node_id)
            return
        low, high, required, optional = ATOMS[op]
        for key in sorted(set(node) - NODE_BASE_KEYS - set(required) - set(optional)):
            self.issue(f"{path}.{key}", f"unknown field for {op}", where)
        for key in required:
            if key not in node:
                self.issue(f"{path}.{key}", f"required for {op}", where)
        args = node.get('args', [])
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            self.issue(f"{path}.args", "must be a list of node ids", where)
            args = []
        if len(args) < low or (high is not None and len(args) > high):
            expected = f"{low}" if high == low else f"at least {low}" if high is None else f"{low}..{high}"
            self.issue(f"{path}.args", f"{op} takes {expected} arguments, got {len(args)}", where)
        for arg in args:
            if arg not in seen:
                self.issue(f"{path}.args", f"unknown or later node id {arg!r}", where)

        if op == 'variable' and 'indices' in node:
            indices = node['indices']
            if not isinstance(indices, list) or not all(isinstance(i, int) and i >= 0 for i in indices):
                self.issue(f"{path}.indices", "must be a list of non-negative integers", where)
        elif op == 'constant' and 'value' in node:
            if not (_is_number(node['value']) or _is_vector(node['value'])):
                self.issue(f"{path}.value", "must be a number or a list of numbers", where)
        elif op == 'affine':
            if 'A' in node and not _is_matrix(node['A']):
                self.issue(f"{path}.A", "must be a rectangular matrix", where)
            if 'b' in node and not _is_vector(node['b']):
                self.issue(f"{path}.b", "must be a list of numbers", where)
        elif op == 'polynomial' and 'terms' in node:
            if not self._terms_ok(node['terms']):
                self.issue(f"{path}.terms", "must be a list (per output) of [coefficient, exponents] pairs", where)
        elif op == 'scale' and 'factor' in node and not _is_number(node['factor']):
            self.issue(f"{path}.factor", "must be a number", where)
        elif op == 'compose' and 'expression' in node:
            target = node['expression']
            if target not in expressions or target == owner:
                self.issue(f"{path}.expression", f"unknown expression {target!r}", where)
        seen.add(node_id)

    @staticmethod
    def _terms_ok(terms) -> bool:
        if not isinstance(terms, list) or not terms:
            return False
        for output in terms:
            if not isinstance(output, list):
                return False
            for term in output:
                if not (isinstance(term, list) and len(term) == 2 and _is_number(term[0])
                        and isinstance(term[1], list) and all(isinstance(e, int) for e in term[1])):
                    return False
        return True

    def _roles(self, roles, kind: Optional[ProblemKind], expressions: Dict) -> None:
        if not isinstance(roles, dict):
            self.issue('roles', "must be an object", self._key('roles'))
            return
        if kind is None:
            return
        required, optional = ROLES[kind]
        for role in sorted(set(roles) - set(required) - set(optional)):
            self.issue(f"roles.{role}", f"unknown role for {kind.value}", self._key(role))
        for role, target in roles.items():
            if target not in expressions:
                self.issue(f"roles.{role}", f"unknown expression {target!r}", self._key(role))
        for role in required:
            if roles.get(role, role) not in expressions:
                self.issue(f"expressions.{role}", f"{kind.value} needs an expression for {role}")

    def _sets(self, sets, kind: Optional[ProblemKind]) -> None:
        if not isinstance(sets, dict):
            self.issue('sets', "must be an object", self._key('sets'))
            return
        if kind == ProblemKind.NONSMOOTH_P and 'K' not in sets:
            self.issue('sets.K', "nonsmooth_p needs a set K")
        for name, spec in sets.items():
            path = f"sets.{name}"
            if not isinstance(spec, dict):
                self.issue(path, "must be an object", self._key(name))
                continue
            form = spec.get('form')
            if form == 'product':
                factors = spec.get('factors')
                valid = {f.value for f in Factor}
                if not isinstance(factors, list) or not factors or any(f not in valid for f in factors):
                    self.issue(f"{path}.factors", f"must be a non-empty list over {sorted(valid)}", self._key(name))
            elif form == 'h':
                for key in ('A', 'C'):
                    if key in spec and not _is_matrix(spec[key]):
                        self.issue(f"{path}.{key}", "must be a rectangular matrix", self._key(name))
                for key in ('b', 'e'):
                    if key in spec and not _is_vector(spec[key]):
                        self.issue(f"{path}.{key}", "must be a list of numbers", self._key(name))
                if 'dim' in spec and (not isinstance(spec['dim'], int) or spec['dim'] < 1):
                    self.issue(f"{path}.dim", "must be a positive integer", self._key(name))
            else:
                self.issue(f"{path}.form", f"must be 'product' or 'h', got {form!r}", self._key(name))

    def _points(self, points, kind: Optional[ProblemKind]) -> None:
        if not isinstance(points, dict):
            self.issue('points', "must be an object", self._key('points'))
            return
        if kind is None:
            return
        required, optional = POINTS[kind]
        for key in sorted(set(points) - set(required) - set(optional)):
            self.issue(f"points.{key}", f"unknown point for {kind.value}", self._key(key))
        for key in required:
            if key not in points:
                self.issue(f"points.{key}", "missing", self._key('points'))
        for key, value in points.items():
            if not _is_vector(value) or not value:
                self.issue(f"points.{key}", "must be a non-empty list of numbers", self._key(key))


def load_problem(text: str) -> ProblemFile:
    """Parse and validate problem text, including a build of the program it describes."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ProblemFileError([SchemaIssue('$', e.msg, e.lineno, e.colno)]) from e
    problem = ProblemFile.from_dict(data, text)
    problem.build()
    return problem


def parse_problem(path: Union[str, Path]) -> ProblemFile:
    """Read, validate and dimension-check a problem file."""
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise ProblemFileError([SchemaIssue(str(path), f"cannot read file: {e}")]) from e
    problem = load_problem(text)
    logger.info(f"Parsed {path.name}: {problem.kind.value} with {len(problem.expressions)} expressions")
    return problem


def serialize_problem(problem: ProblemFile, path: Optional[Union[str, Path]] = None) -> str:
    """JSON text for a problem; written to path when given."""
    text = json.dumps(problem.to_dict(), indent=2, sort_keys=True) + '\n'
    if path is not None:
        Path(path).write_text(text, encoding='utf-8')
    return text
