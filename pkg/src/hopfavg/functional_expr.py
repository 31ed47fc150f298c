"""Polynomial functionals of a history segment.

A functional is written as an arithmetic expression over point evaluations
``eta(theta)`` of a history segment at fixed lags ``theta <= 0``::

    -(eta(0)^3) + eta(-1)
    0.5*eta(-0.25)*eta(0) + 2

Supported syntax: ``+ - * ^``, parentheses, real constants, and ``eta(<real>)``
taps.  Exponents must be non-negative integer literals.  No division, no
transcendental functions: everything stays polynomial in the tap values, so
partial derivatives with respect to each tap are exact expression trees rather
than finite differences.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ExpressionError",
    "UnboundedDerivativeWarning",
    "ParsedFunctional",
    "parse",
    "directional_derivative",
]

# Taps closer together than this are treated as the same lag.
TAP_MERGE_TOL = 1e-12


class ExpressionError(ValueError):
    """Raised for syntax errors, bad exponents, or out-of-range taps."""


class UnboundedDerivativeWarning(UserWarning):
    """The functional has polynomial degree > 1, so its derivatives are
    unbounded globally; averaging estimates apply on bounded sets only."""


# ---------------------------------------------------------------------------
# expression tree


class Node:
    __slots__ = ()

    def eval(self, taps):
        raise NotImplementedError

    def diff(self, index):
        raise NotImplementedError

    def degree(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Node):
    value: float

    def eval(self, taps):
        return self.value

    def diff(self, index):
        return Const(0.0)

    def degree(self):
        return 0

    def __str__(self):
        return repr(self.value)


@dataclass(frozen=True)
class Tap(Node):
    """Point evaluation of the segment at lag ``theta``; ``index`` is the
    position of ``theta`` in the functional's sorted tap list."""

    theta: float
    index: int

    def eval(self, taps):
        return taps[self.index]

    def diff(self, index):
        return Const(1.0 if index == self.index else 0.0)

    def degree(self):
        return 1

    def __str__(self):
        return f"eta({self.theta!r})"


@dataclass(frozen=True)
class Neg(Node):
    child: Node

    def eval(self, taps):
        return -self.child.eval(taps)

    def diff(self, index):
        return Neg(self.child.diff(index))

    def degree(self):
        return self.child.degree()

    def __str__(self):
        return f"-({self.child})"


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node

    def eval(self, taps):
        return self.left.eval(taps) + self.right.eval(taps)

    def diff(self, index):
        return Add(self.left.diff(index), self.right.diff(index))

    def degree(self):
        return max(self.left.degree(), self.right.degree())

    def __str__(self):
        return f"({self.left} + {self.right})"


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node

    def eval(self, taps):
        return self.left.eval(taps) * self.right.eval(taps)

    def diff(self, index):
        return Add(
            Mul(self.left.diff(index), self.right),
            Mul(self.left, self.right.diff(index)),
        )

    def degree(self):
        return self.left.degree() + self.right.degree()

    def __str__(self):
        return f"({self.left} * {self.right})"


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: int

    def eval(self, taps):
        return self.base.eval(taps) ** self.exponent

    def diff(self, index):
        if self.exponent == 0:
            return Const(0.0)
        return Mul(
            Mul(Const(float(self.exponent)), Pow(self.base, self.exponent - 1)),
            self.base.diff(index),
        )

    def degree(self):
        return self.base.degree() * self.exponent

    def __str__(self):
        return f"({self.base})^{self.exponent}"


def _simplify(node: Node) -> Node:
    """Constant folding and identity pruning; keeps derivative trees small."""
    if isinstance(node, (Const, Tap)):
        return node
    if isinstance(node, Neg):
        child = _simplify(node.child)
        if isinstance(child, Const):
            return Const(-child.value)
        if isinstance(child, Neg):
            return child.child
        return Neg(child)
    if isinstance(node, Add):
        left, right = _simplify(node.left), _simplify(node.right)
        if isinstance(left, Const) and isinstance(right, Const):
            return Const(left.value + right.value)
        if isinstance(left, Const) and left.value == 0.0:
            return right
        if isinstance(right, Const) and right.value == 0.0:
            return left
        return Add(left, right)
    if isinstance(node, Mul):
        left, right = _simplify(node.left), _simplify(node.right)
        if isinstance(left, Const) and isinstance(right, Const):
            return Const(left.value * right.value)
        for a, b in ((left, right), (right, left)):
            if isinstance(a, Const):
                if a.value == 0.0:
                    return Const(0.0)
                if a.value == 1.0:
                    return b
        return Mul(left, right)
    if isinstance(node, Pow):
        base = _simplify(node.base)
        if node.exponent == 0:
            return Const(1.0)
        if node.exponent == 1:
            return base
        if isinstance(base, Const):
            return Const(base.value**node.exponent)
        return Pow(base, node.exponent)
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# tokenizer / recursive-descent parser

_SYMBOLS = "+-*^()"


def _tokenize(text: str):
    tokens = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _SYMBOLS:
            tokens.append((c, c, i))
            i += 1
            continue
        if c.isdigit() or c == ".":
            j = i
            seen_exp = False
            while j < n:
                ch = text[j]
                if ch.isdigit() or ch == ".":
                    j += 1
                elif ch in "eE" and not seen_exp:
                    seen_exp = True
                    j += 1
                    if j < n and text[j] in "+-":
                        j += 1
                else:
                    break
            lit = text[i:j]
            try:
                value = float(lit)
            except ValueError:
                raise ExpressionError(f"bad number {lit!r} at position {i}") from None
            tokens.append(("NUM", value, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("NAME", text[i:j], i))
            i = j
            continue
        raise ExpressionError(f"unexpected character {c!r} at position {i}")
    tokens.append(("END", None, n))
    return tokens


class _Parser:
    def __init__(self, tokens, text):
        self.tokens = tokens
        self.text = text
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, kind):
        token = self.advance()
        if token[0] != kind:
            raise ExpressionError(
                f"expected {kind!r} but found {token[1]!r} at position {token[2]}"
            )
        return token

    def parse_expression(self):
        node = self.parse_term()
        while self.peek()[0] in "+-":
            op = self.advance()[0]
            rhs = self.parse_term()
            node = Add(node, rhs if op == "+" else Neg(rhs))
        return node

    def parse_term(self):
        node = self.parse_unary()
        while self.peek()[0] == "*":
            self.advance()
            node = Mul(node, self.parse_unary())
        return node

    def parse_unary(self):
        if self.peek()[0] == "-":
            self.advance()
            return Neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        if self.peek()[0] == "^":
            self.advance()
            kind, value, pos = self.advance()
            if kind != "NUM" or value != int(value) or value < 0:
                raise ExpressionError(
                    f"exponent must be a non-negative integer literal "
                    f"(position {pos})"
                )
            return Pow(base, int(value))
        return base

    def parse_atom(self):
        kind, value, pos = self.peek()
        if kind == "NUM":
            self.advance()
            return Const(value)
        if kind == "(":
            self.advance()
            node = self.parse_expression()
            self.expect(")")
            return node
        if kind == "NAME":
            if value != "eta":
                raise ExpressionError(
                    f"unknown name {value!r} at position {pos}; "
                    "only eta(<lag>) is defined"
                )
            self.advance()
            self.expect("(")
            sign = 1.0
            if self.peek()[0] in "+-":
                sign = -1.0 if self.advance()[0] == "-" else 1.0
            nkind, nvalue, npos = self.advance()
            if nkind != "NUM":
                raise ExpressionError(
                    f"eta() needs a real lag literal at position {npos}"
                )
            self.expect(")")
            theta = sign * nvalue
            if theta > 0.0:
                raise ExpressionError(
                    f"tap lag {theta} at position {pos} must be <= 0"
                )
            return Tap(theta, index=-1)
        raise ExpressionError(f"unexpected token {value!r} at position {pos}")


def _collect_taps(node: Node, out: list):
    if isinstance(node, Tap):
        out.append(node.theta)
    elif isinstance(node, Neg):
        _collect_taps(node.child, out)
    elif isinstance(node, (Add, Mul)):
        _collect_taps(node.left, out)
        _collect_taps(node.right, out)
    elif isinstance(node, Pow):
        _collect_taps(node.base, out)


def _bind_taps(node: Node, lags: np.ndarray) -> Node:
    """Rewrite Tap nodes with the index of their merged lag."""
    if isinstance(node, Tap):
        index = int(np.argmin(np.abs(lags - node.theta)))
        return Tap(float(lags[index]), index)
    if isinstance(node, Neg):
        return Neg(_bind_taps(node.child, lags))
    if isinstance(node, Add):
        return Add(_bind_taps(node.left, lags), _bind_taps(node.right, lags))
    if isinstance(node, Mul):
        return Mul(_bind_taps(node.left, lags), _bind_taps(node.right, lags))
    if isinstance(node, Pow):
        return Pow(_bind_taps(node.base, lags), node.exponent)
    return node


class ParsedFunctional:
    """A polynomial functional of a history segment.

    Attributes
    ----------
    taps : ndarray
        Sorted distinct lags (ascending, all in ``[-max_delay, 0]``).
    degree : int
        Total polynomial degree in the tap values.

    The functional is evaluated either on a segment callable
    (``evaluate(segment)``) or directly on tap values (``eval_taps(values)``),
    where ``values`` is indexed like ``taps`` and may hold numpy arrays for
    vectorized evaluation.
    """

    def __init__(self, root: Node, text: str, max_delay: float | None = None):
        lags: list = []
        _collect_taps(root, lags)
        merged: list = []
        for theta in sorted(lags):
            if not merged or abs(theta - merged[-1]) > TAP_MERGE_TOL:
                merged.append(theta)
        self.taps = np.asarray(merged, dtype=float)
        if max_delay is not None and self.taps.size:
            low = self.taps[0]
            if low < -max_delay - TAP_MERGE_TOL:
                raise ExpressionError(
                    f"tap lag {low} lies outside [-{max_delay}, 0]"
                )
        self.root = _simplify(_bind_taps(root, self.taps))
        self.text = text
        self.degree = self.root.degree()
        self._partials = None
        if self.degree > 1:
            warnings.warn(
                f"functional {text!r} has degree {self.degree}; its "
                "derivatives are unbounded and estimates hold on bounded "
                "sets only",
                UnboundedDerivativeWarning,
                stacklevel=3,
            )

    @property
    def n_taps(self) -> int:
        return int(self.taps.size)

    def eval_taps(self, values):
        """Evaluate on tap values; entries may be scalars or ndarrays."""
        return self.root.eval(values)

    def evaluate(self, segment):
        """Evaluate on a segment callable defined on ``[-r, 0]``."""
        return self.eval_taps([segment(theta) for theta in self.taps])

    def partials(self):
        """Exact partial-derivative trees, one per tap (cached)."""
        if self._partials is None:
            self._partials = [
                _simplify(self.root.diff(i)) for i in range(self.n_taps)
            ]
        return self._partials

    def eval_partials(self, values):
        """Evaluate all tap partials at the given tap values."""
        return [partial.eval(values) for partial in self.partials()]

    def is_zero(self) -> bool:
        return isinstance(self.root, Const) and self.root.value == 0.0

    def __str__(self):
        return str(self.root)

    def __repr__(self):
        return f"ParsedFunctional({self.text!r})"


def parse(text: str, max_delay: float | None = None) -> ParsedFunctional:
    """Parse an expression string into a :class:`ParsedFunctional`.

    Parameters
    ----------
    text : str
        Expression over ``eta(<lag>)`` taps, e.g. ``"-(eta(0)^3) + eta(-1)"``.
    max_delay : float, optional
        If given, every tap lag must lie in ``[-max_delay, 0]``.
    """
    tokens = _tokenize(text)
    parser = _Parser(tokens, text)
    root = parser.parse_expression()
    end = parser.advance()
    if end[0] != "END":
        raise ExpressionError(
            f"trailing input {end[1]!r} at position {end[2]}"
        )
    return ParsedFunctional(root, text, max_delay=max_delay)


def directional_derivative(functional: ParsedFunctional, tap_values, direction_values):
    """Derivative of the functional at ``tap_values`` in a direction segment.

    Both arguments are indexed like ``functional.taps``: ``tap_values`` are
    the segment's tap evaluations, ``direction_values`` the direction
    segment's.  Entries may be numpy arrays (broadcast elementwise).
    """
    partials = functional.eval_partials(tap_values)
    total = 0.0
    for partial, direction in zip(partials, direction_values):
        total = total + partial * direction
    return total
