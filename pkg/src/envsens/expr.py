"""Smooth scalar expression language: parser, evaluator and forward-mode derivatives.

Grammar::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-" factor | base ("^" factor)?
    base   := NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"

Expressions are immutable trees of frozen dataclasses.  Evaluation accepts
floats, numpy arrays (evaluated elementwise, used to batch quadrature nodes
and solver starts) or :class:`Dual` numbers, which may be nested to obtain
second derivatives.
"""

from __future__ import annotations

import functools
import math
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any, Union

import numpy as np

from .errors import (
    DomainError,
    NonDifferentiableError,
    ParseError,
    UnboundVariableError,
)

INTRINSICS = ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh")


# --------------------------------------------------------------------------
# Syntax tree
# --------------------------------------------------------------------------


class Expr:
    """Base class of all syntax tree nodes."""

    __slots__ = ()

    def __str__(self) -> str:
        return to_source(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Sub(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Div(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


Expression = Expr
_BINARY = {"+": Add, "-": Sub, "*": Mul, "/": Div}


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "ident", "op", "end"
    text: str
    pos: int  # character offset


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    pos = 0
    while True:
        while pos < len(source) and source[pos].isspace():
            pos += 1
        if pos == len(source):
            tokens.append(_Token("end", "", pos))
            return tokens
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise _error(source, f"unexpected character {source[pos]!r}", pos)
        tokens.append(_Token(m.lastgroup, m.group(), pos))
        pos = m.end()


def _error(source: str, message: str, char_pos: int) -> ParseError:
    return ParseError(message, len(source[:char_pos].encode("utf-8")))


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def fail(self, message: str, tok: _Token | None = None) -> ParseError:
        tok = tok or self.tok
        if tok.kind == "end":
            message = "unexpected end of input" if message == "unexpected token" else message
        else:
            message = f"{message} {tok.text!r}" if message == "unexpected token" else message
        return _error(self.source, message, tok.pos)

    def accept(self, op: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == op:
            self.i += 1
            return True
        return False

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            if self.tok.text == ")":
                raise self.fail("unbalanced parenthesis")
            raise self.fail("unexpected token")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            node = _BINARY[op](node, self.term())
        return node

    def term(self) -> Expr:
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            node = _BINARY[op](node, self.factor())
        return node

    def factor(self) -> Expr:
        if self.accept("-"):
            return Neg(self.factor())
        base = self.base()
        if self.accept("^"):
            return Pow(base, self.factor())
        return base

    def base(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            value = float(tok.text)
            if not math.isfinite(value):
                raise self.fail("numeric literal out of range", tok)
            return Num(value)
        if tok.kind == "ident":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                if tok.text not in INTRINSICS:
                    raise self.fail(f"unknown function {tok.text!r}", tok)
                self.i += 1
                arg = self.expr()
                if not self.accept(")"):
                    if self.tok.kind == "end":
                        raise self.fail("unbalanced parenthesis")
                    raise self.fail("unexpected token")
                return Call(tok.text, arg)
            return Var(tok.text)
        if self.accept("("):
            node = self.expr()
            if not self.accept(")"):
                if self.tok.kind == "end":
                    raise self.fail("unbalanced parenthesis")
                raise self.fail("unexpected token")
            return node
        raise self.fail("unexpected token")


def parse(source: str) -> Expr:
    """Parse ``source`` into an expression tree.

    Raises :class:`ParseError` carrying the byte offset of the offending token.
    """
    return _Parser(source).parse()


# --------------------------------------------------------------------------
# Printing and tree utilities
# --------------------------------------------------------------------------

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _format_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_source(e: Expr) -> str:
    """Render ``e`` as text that parses back to a structurally equal tree."""
    if isinstance(e, Num):
        return _format_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.func}({to_source(e.arg)})"
    if isinstance(e, Neg):
        inner = to_source(e.arg)
        # "-a^b" already means -(a^b); anything looser must be bracketed
        if type(e.arg) in (Add, Sub, Mul, Div):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        base = to_source(e.base)
        if type(e.base) in (Add, Sub, Mul, Div, Neg, Pow):
            base = f"({base})"
        exponent = to_source(e.exponent)
        if type(e.exponent) in (Add, Sub, Mul, Div):
            exponent = f"({exponent})"
        return f"{base}^{exponent}"
    op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
    prec = _PREC[type(e)]
    left = to_source(e.left)
    if type(e.left) in _PREC and _PREC[type(e.left)] < prec and not isinstance(e.left, Neg):
        left = f"({left})"
    right = to_source(e.right)
    rt = type(e.right)
    # left-associative: a right operand of equal precedence needs brackets
    if rt in _PREC and not isinstance(e.right, (Neg, Pow)) and _PREC[rt] <= prec:
        right = f"({right})"
    sep = " " if prec == 1 else ""
    return f"{left}{sep}{op}{sep}{right}"


def children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Num, Var)):
        return ()
    if isinstance(e, (Neg, Call)):
        return (e.arg,)
    if isinstance(e, Pow):
        return (e.base, e.exponent)
    return (e.left, e.right)


def free_variables(e: Expr) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset((e.name,))
    out: frozenset[str] = frozenset()
    for c in children(e):
        out |= free_variables(c)
    return out


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Simultaneously replace variables by expressions."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    if isinstance(e, Pow):
        return Pow(substitute(e.base, mapping), substitute(e.exponent, mapping))
    return type(e)(substitute(e.left, mapping), substitute(e.right, mapping))


# --------------------------------------------------------------------------
# Dual numbers
# --------------------------------------------------------------------------


class Dual:
    """``re + du*eps`` with ``eps**2 == 0``.

    Components may be floats, arrays or Duals themselves (nesting gives
    second derivatives).  Every seeded variable must share the same nesting
    depth so that perturbations are never confused.
    """

    __slots__ = ("re", "du")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, re: Any, du: Any):
        self.re = re
        self.du = du

    def __repr__(self) -> str:
        return f"Dual({self.re!r}, {self.du!r})"

    def __neg__(self) -> Dual:
        return Dual(-self.re, -self.du)

    def __add__(self, other: Any) -> Dual:
        if isinstance(other, Dual):
            return Dual(self.re + other.re, self.du + other.du)
        return Dual(self.re + other, self.du)

    __radd__ = __add__

    def __sub__(self, other: Any) -> Dual:
        if isinstance(other, Dual):
            return Dual(self.re - other.re, self.du - other.du)
        return Dual(self.re - other, self.du)

    def __rsub__(self, other: Any) -> Dual:
        return Dual(other - self.re, -self.du)

    def __mul__(self, other: Any) -> Dual:
        if isinstance(other, Dual):
            return Dual(self.re * other.re, self.re * other.du + self.du * other.re)
        return Dual(self.re * other, self.du * other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> Dual:
        if isinstance(other, Dual):
            q = self.re / other.re
            return Dual(q, (self.du - q * other.du) / other.re)
        return Dual(self.re / other, self.du / other)

    def __rtruediv__(self, other: Any) -> Dual:
        q = other / self.re
        return Dual(q, -q * self.du / self.re)

    def __pow__(self, n: int) -> Dual:
        if n == 0:
            return Dual(1.0, 0.0 * self.du)
        return Dual(self.re**n, n * self.re ** (n - 1) * self.du)


Value = Union[float, np.ndarray, Dual]


def primal(u: Any) -> Any:
    """Innermost real part of a (possibly nested) dual value."""
    while isinstance(u, Dual):
        u = u.re
    return u


def _lift(f: Callable, df: Callable) -> Callable:
    def g(u):
        if isinstance(u, Dual):
            return Dual(g(u.re), df(u.re) * u.du)
        return f(u)

    return g


def _dsqrt(a):
    return 0.5 / _sqrt(a)


def _dtan(a):
    c = _cos(a)
    return 1.0 / (c * c)


def _dtanh(a):
    th = _tanh(a)
    return 1.0 - th * th


_sin = _lift(np.sin, lambda a: _cos(a))
_cos = _lift(np.cos, lambda a: -_sin(a))
_tan = _lift(np.tan, _dtan)
_exp = _lift(np.exp, lambda a: _exp(a))
_log = _lift(np.log, lambda a: 1.0 / a)
_sqrt = _lift(np.sqrt, _dsqrt)
_tanh = _lift(np.tanh, _dtanh)

_FUNCS = {
    "sin": _sin,
    "cos": _cos,
    "tan": _tan,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "tanh": _tanh,
}


# --------------------------------------------------------------------------
# Compilation to closures
# --------------------------------------------------------------------------

# Compiled form: fn(env, strict) -> value.  strict=False lets NaN/inf flow
# (used by the batched solver, which rejects non-finite trial points).
Compiled = Callable[[Mapping[str, Any], bool], Any]


def _integer_exponent(e: Expr) -> int | None:
    sign = 1
    if isinstance(e, Neg):
        sign, e = -1, e.arg
    if isinstance(e, Num) and float(e.value).is_integer() and abs(e.value) <= 1024:
        return sign * int(e.value)
    return None


def _any(mask) -> bool:
    return bool(np.any(mask))


@functools.lru_cache(maxsize=4096)
def compile_expr(e: Expr) -> Compiled:
    if isinstance(e, Num):
        v = float(e.value)
        return lambda env, strict: v
    if isinstance(e, Var):
        name = e.name

        def var(env, strict):
            try:
                return env[name]
            except KeyError:
                raise UnboundVariableError(f"unbound variable {name!r}") from None

        return var
    if isinstance(e, Neg):
        a = compile_expr(e.arg)
        return lambda env, strict: -a(env, strict)
    if isinstance(e, Add):
        a, b = compile_expr(e.left), compile_expr(e.right)
        return lambda env, strict: a(env, strict) + b(env, strict)
    if isinstance(e, Sub):
        a, b = compile_expr(e.left), compile_expr(e.right)
        return lambda env, strict: a(env, strict) - b(env, strict)
    if isinstance(e, Mul):
        a, b = compile_expr(e.left), compile_expr(e.right)
        return lambda env, strict: a(env, strict) * b(env, strict)
    if isinstance(e, Div):
        a, b = compile_expr(e.left), compile_expr(e.right)

        def div(env, strict):
            num, den = a(env, strict), b(env, strict)
            if strict and _any(primal(den) == 0):
                raise DomainError("division by zero")
            return num / den

        return div
    if isinstance(e, Pow):
        base = compile_expr(e.base)
        n = _integer_exponent(e.exponent)
        if n is not None:

            def ipow(env, strict):
                u = base(env, strict)
                if n < 0 and strict and _any(primal(u) == 0):
                    raise DomainError("zero raised to a negative power")
                if isinstance(u, Dual):
                    return u**n
                return np.power(np.asarray(u, dtype=float), n) if n < 0 else u**n

            return ipow
        expo = compile_expr(e.exponent)

        def rpow(env, strict):
            u = base(env, strict)
            if strict and _any(primal(u) <= 0):
                raise DomainError("non-integer power requires a positive base")
            return _exp(expo(env, strict) * _log(u))

        return rpow
    if isinstance(e, Call):
        a = compile_expr(e.arg)
        f = _FUNCS[e.func]
        name = e.func

        def call(env, strict):
            u = a(env, strict)
            if strict:
                p = primal(u)
                if name == "log" and _any(p <= 0):
                    raise DomainError("log of a non-positive argument")
                if name == "sqrt":
                    if _any(p < 0):
                        raise DomainError("sqrt of a negative argument")
                    if isinstance(u, Dual) and _any(p == 0):
                        raise NonDifferentiableError("sqrt is not differentiable at 0")
            return f(u)

        return call
    raise TypeError(f"not an expression node: {e!r}")


def _run(e: Expr, env: Mapping[str, Any], strict: bool) -> Any:
    fn = compile_expr(e)
    with np.errstate(all="ignore"):
        out = fn(env, strict)
    if strict and not np.all(np.isfinite(primal(out))):
        raise DomainError("non-finite result")
    return out


# --------------------------------------------------------------------------
# Public evaluation API
# --------------------------------------------------------------------------


def evaluate(e: Expr, binding: Mapping[str, Any]) -> Any:
    """Value of ``e`` under ``binding``; raises on domain violations."""
    out = _run(e, binding, True)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    return float(out) if np.isscalar(out) else out


def grad(e: Expr, wrt: Sequence[str], binding: Mapping[str, float]) -> np.ndarray:
    """Exact derivative of ``e`` with respect to each name in ``wrt``."""
    env = dict(binding)
    seeds = np.eye(len(wrt))
    for i, name in enumerate(wrt):
        if name not in env:
            raise UnboundVariableError(f"unbound variable {name!r}")
        env[name] = Dual(float(env[name]), seeds[i])
    out = _run(e, env, True)
    du = out.du if isinstance(out, Dual) else 0.0
    return np.broadcast_to(np.asarray(du, dtype=float), (len(wrt),)).copy()


def _part(r: Any, *path: str) -> Any:
    for attr in path:
        r = getattr(r, attr) if isinstance(r, Dual) else 0.0
    return r


def derivatives(
    e: Expr,
    env: Mapping[str, Any],
    wrt: Sequence[str],
    order: int,
    strict: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Batched value, gradient and Hessian of ``e``.

    Values in ``env`` may be arrays of a common batch shape ``B``; the
    returned value has shape ``B``, the gradient ``B + (k,)`` and the
    Hessian ``B + (k, k)`` with ``k = len(wrt)``.  All directions are
    propagated in a single pass by stacking seeds along a trailing axis.
    """
    k = len(wrt)
    batch = np.broadcast_shapes(*(np.shape(v) for v in env.values()))
    base = {name: (np.asarray(v, dtype=float)[..., None] if np.ndim(v) else v) for name, v in env.items()}
    if order == 0 or k == 0:
        out = _run(e, env, strict)
        value = np.broadcast_to(np.asarray(primal(out), dtype=float), batch).copy()
        zeros_g = np.zeros(batch + (k,)) if order >= 1 else None
        zeros_h = np.zeros(batch + (k, k)) if order >= 2 else None
        return value, zeros_g, zeros_h
    if order == 1:
        local = dict(base)
        eye = np.eye(k)
        for i, name in enumerate(wrt):
            local[name] = Dual(base[name], eye[i])
        out = _run(e, local, strict)
        shape = batch + (k,)
        value = np.broadcast_to(np.asarray(primal(out), dtype=float), shape)[..., 0].copy()
        g = np.broadcast_to(np.asarray(_part(out, "du"), dtype=float), shape).copy()
        return value, g, None
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    outer = np.array([[float(p[0] == v) for p in pairs] for v in range(k)])
    inner = np.array([[float(p[1] == v) for p in pairs] for v in range(k)])
    local = dict(base)
    for v, name in enumerate(wrt):
        local[name] = Dual(Dual(base[name], inner[v]), Dual(outer[v], 0.0))
    out = _run(e, local, strict)
    shape = batch + (len(pairs),)
    value = np.broadcast_to(np.asarray(primal(out), dtype=float), shape)[..., 0].copy()
    first = np.broadcast_to(np.asarray(_part(out, "re", "du"), dtype=float), shape)
    second = np.broadcast_to(np.asarray(_part(out, "du", "du"), dtype=float), shape)
    diag = [pairs.index((j, j)) for j in range(k)]
    g = first[..., diag].copy()
    h = np.empty(batch + (k, k))
    for p, (i, j) in enumerate(pairs):
        h[..., i, j] = second[..., p]
        h[..., j, i] = second[..., p]
    return value, g, h
