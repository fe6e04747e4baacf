"""Arithmetic expressions over state variables ``x1 .. xn``.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = ("+" | "-") unary | power ;
    power   = atom [ "^" unary ] ;               (* right associative *)
    atom    = number | variable | func "(" expr ")" | "(" expr ")" ;
    func    = "sin" | "cos" | "exp" | "sqrt" | "tanh" ;
    variable= "x" digit { digit } ;              (* x1 .. xn, 1-based *)
    number  = digits [ "." digits ] [ ("e" | "E") [ "+" | "-" ] digits ]
            | "." digits [ exponent ] ;

``-x1^2`` parses as ``-(x1^2)`` and ``2^-1`` is allowed.  Expressions are
immutable trees; :func:`compile_expression` turns one into a callable that
accepts floats, numpy arrays or :class:`~lpfeedback.jet.Jet2` values.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import jet
from .jet import DomainError, Jet2

FUNCTIONS: dict[str, Callable] = {
    "sin": jet.sin,
    "cos": jet.cos,
    "exp": jet.exp,
    "sqrt": jet.sqrt,
    "tanh": jet.tanh,
}


class ParseError(ValueError):
    def __init__(self, message: str, position: int, source: str = ""):
        self.position = position
        self.source = source
        super().__init__(f"{message} at position {position}" + (f" in {source!r}" if source else ""))


class ExpressionDomainError(DomainError):
    """Domain error carrying the offending subexpression."""

    def __init__(self, message: str, subexpression: str):
        self.subexpression = subexpression
        super().__init__(f"{message} in subexpression {subexpression}")


# AST ------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self) -> str:
        return repr(float(self.value)) if self.value >= 0 else f"({float(self.value)!r})"


@dataclass(frozen=True)
class Var:
    index: int  # 0-based

    def __str__(self) -> str:
        return f"x{self.index + 1}"


@dataclass(frozen=True)
class Neg:
    arg: "Node"

    def __str__(self) -> str:
        return f"(-{self.arg})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call:
    name: str
    arg: "Node"

    def __str__(self) -> str:
        return f"{self.name}({self.arg})"


Node = Union[Num, Var, Neg, BinOp, Call]


def max_variable(node: Node) -> int:
    """Largest 1-based variable index used in ``node`` (0 if none)."""
    if isinstance(node, Var):
        return node.index + 1
    if isinstance(node, Num):
        return 0
    if isinstance(node, (Neg, Call)):
        return max_variable(node.arg)
    return max(max_variable(node.left), max_variable(node.right))


# parsing ----------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ParseError(f"unexpected character {source[bad]!r}", bad, source)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str, n: int | None):
        self.source = source
        self.n = n
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str):
        kind, val, pos = self.take()
        if val != text:
            found = "end of input" if kind == "end" else repr(val)
            raise ParseError(f"expected {text!r}, found {found}", pos, self.source)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos, self.source)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val in ("+", "-"):
            self.take()
            arg = self.unary()
            return Neg(arg) if val == "-" else arg
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            m = re.fullmatch(r"x([1-9]\d*)", val)
            if m is None:
                raise ParseError(f"unknown symbol {val!r}", pos, self.source)
            idx = int(m.group(1))
            if self.n is not None and idx > self.n:
                raise ParseError(f"variable {val} out of range for n={self.n}", pos, self.source)
            return Var(idx - 1)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(val)
        raise ParseError(f"unexpected {found}", pos, self.source)


def parse_expression(source: str, n: int | None = None) -> Node:
    """Parse ``source`` into an expression tree.

    ``n`` bounds the admissible variable indices; ``None`` admits any.
    """
    if not isinstance(source, str):
        raise ParseError("expression must be a string", 0, repr(source))
    return _Parser(source, n).parse()


# evaluation -------------------------------------------------------------------


def _wrap(node: Node, fn: Callable) -> Callable:
    def guarded(*args):
        try:
            with np.errstate(divide="raise", invalid="raise", over="ignore"):
                return fn(*args)
        except ExpressionDomainError:
            raise
        except (DomainError, FloatingPointError, ZeroDivisionError) as exc:
            raise ExpressionDomainError(str(exc), str(node)) from None

    return guarded


def _compile(node: Node) -> Callable[[Sequence], object]:
    if isinstance(node, Num):
        v = float(node.value)
        return lambda xs: v
    if isinstance(node, Var):
        i = node.index
        return lambda xs: xs[i]
    if isinstance(node, Neg):
        a = _compile(node.arg)
        return lambda xs: -a(xs)
    if isinstance(node, Call):
        a = _compile(node.arg)
        fn = FUNCTIONS[node.name]
        if node.name == "sqrt":
            def call(v):
                if not isinstance(v, Jet2) and np.any(np.asarray(v) < 0):
                    raise DomainError("sqrt of a negative value")
                return fn(v)
        else:
            call = fn
        g = _wrap(node, call)
        return lambda xs: g(a(xs))
    a = _compile(node.left)
    b = _compile(node.right)
    op = node.op
    if op == "+":
        return lambda xs: a(xs) + b(xs)
    if op == "-":
        return lambda xs: a(xs) - b(xs)
    if op == "*":
        return lambda xs: a(xs) * b(xs)
    if op == "/":
        def div(u, v):
            if not isinstance(v, Jet2) and np.any(np.asarray(v) == 0):
                raise DomainError("division by zero")
            return u / v
        g = _wrap(node, div)
        return lambda xs: g(a(xs), b(xs))
    # power: constant exponents take the fast integer/real path
    if isinstance(node.right, Num) or (isinstance(node.right, Neg) and isinstance(node.right.arg, Num)):
        e = float(node.right.value) if isinstance(node.right, Num) else -float(node.right.arg.value)

        def cpow(u):
            if isinstance(u, Jet2):
                return u ** e
            u = np.asarray(u, dtype=float)
            if e != int(e) and np.any(u < 0):
                raise DomainError("non-integer power of a negative base")
            if e < 0 and np.any(u == 0):
                raise DomainError("division by zero")
            return u ** e

        g = _wrap(node, cpow)
        return lambda xs: g(a(xs))

    def vpow(u, v):
        if isinstance(u, Jet2) or isinstance(v, Jet2):
            if not isinstance(u, Jet2):
                return jet.exp(v * jet.log(u))
            return u ** v
        u = np.asarray(u, dtype=float)
        if np.any(u < 0) and np.any(np.asarray(v) != np.round(v)):
            raise DomainError("non-integer power of a negative base")
        return u ** v

    g = _wrap(node, vpow)
    return lambda xs: g(a(xs), b(xs))


@dataclass(frozen=True)
class Expression:
    """Parsed expression together with its compiled evaluator."""

    node: Node
    source: str

    @classmethod
    def parse(cls, source: str, n: int | None = None) -> Expression:
        return cls(parse_expression(source, n), source)

    @property
    def fn(self) -> Callable:
        fn = _COMPILED.get(self.node)
        if fn is None:
            fn = _COMPILED[self.node] = _compile(self.node)
        return fn

    def __call__(self, xs: Sequence):
        return self.fn(xs)

    def __str__(self) -> str:
        return str(self.node)

    def evaluate(self, x) -> np.ndarray:
        """Value at ``x`` (shape ``(..., n)``)."""
        x = np.asarray(x, dtype=float)
        out = self.fn([x[..., i] for i in range(x.shape[-1])])
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape[:-1]).copy()


_COMPILED: dict = {}


def eval_jet2(e: Expression | Node | str, x) -> Jet2:
    """Value, gradient and Hessian of ``e`` at ``x`` (shape ``(..., n)``)."""
    if isinstance(e, str):
        e = Expression.parse(e)
    elif not isinstance(e, Expression):
        e = Expression(e, str(e))
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    out = e(jet.seed(x))
    if not isinstance(out, Jet2):
        out = Jet2.constant(np.broadcast_to(out, x.shape[:-1]), n)
    return Jet2(np.broadcast_to(out.value, x.shape[:-1]).copy(),
                np.broadcast_to(out.gradient, x.shape[:-1] + (n,)).copy(),
                np.broadcast_to(out.hessian, x.shape[:-1] + (n, n)).copy())
