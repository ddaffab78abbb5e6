"""Differentiable scalar expressions over ``x1..xn``, ``t`` and ``u1..um``.

Expressions are immutable trees. They are parsed from strings such as
``"-2*(x2 - x1^2)"``, differentiated symbolically, and compiled into numpy
callables that evaluate on single points or on whole batches at once::

    >>> e = parse_expr("x1*sin(x2)")
    >>> str(diff(e, "x2"))
    'x1*cos(x2)'
    >>> f = compile_exprs([e], n=2)
    >>> float(f(np.array([2.0, 0.0]))[0])
    0.0

Evaluation raises :class:`DomainError` for division by zero, ``log`` or
``sqrt`` outside their domain, and non-integer powers of negative numbers.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ExprSyntaxError, UnknownSymbolError

FUNCTIONS = ("sin", "cos", "tanh", "exp", "log", "sqrt", "abs", "sign")
CONSTANTS = {"pi": math.pi}


class Expr:
    """Base class of expression nodes. Use the module functions to build trees."""

    __slots__ = ()

    def __str__(self):
        return to_string(self)

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, other):
        return power(self, as_expr(other))


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # one of + - * / ^
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    arg: Expr


ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return parse_expr(value)
    return Const(float(value))


# ---------------------------------------------------------------------------
# simplifying constructors (used by differentiation and programmatic building)


def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.value == value)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    return BinOp("-", a, b)


def neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    if _is_const(b) and not _is_const(a):
        a, b = b, a
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return Const(a.value / b.value)
    return BinOp("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return ONE
    if _is_const(b, 1.0):
        return a
    return BinOp("^", a, b)


def call(fn: str, a: Expr) -> Expr:
    if fn not in FUNCTIONS:
        raise UnknownSymbolError(f"unknown function {fn!r}")
    return Call(fn, a)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None:
            stripped = len(source[pos:]) - len(source[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {source[pos + stripped]!r}", source, pos + stripped)
        kind = m.lastgroup
        text = m.group(kind)
        tokens.append((kind, "^" if text == "**" else text, m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source, allowed):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.allowed = allowed

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        kind, value, pos = self.take()
        if value != text:
            raise ExprSyntaxError(f"expected {text!r}, got {value or 'end of input'!r}", self.source, pos)

    def parse(self):
        e = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {value!r}", self.source, pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        kind, value, _ = self.peek()
        if kind == "op" and value in ("-", "+"):
            self.take()
            inner = self.unary()
            return Neg(inner) if value == "-" else inner
        return self.pow()

    def pow(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, value, pos = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise UnknownSymbolError(f"unknown function {value!r} at position {pos}")
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(value, arg)
            if value in CONSTANTS:
                return Const(CONSTANTS[value])
            if self.allowed is not None and value not in self.allowed:
                raise UnknownSymbolError(f"unknown symbol {value!r} at position {pos} in {self.source!r}")
            if self.allowed is None and not _VAR_NAME.fullmatch(value):
                raise UnknownSymbolError(f"unknown symbol {value!r} at position {pos} in {self.source!r}")
            return Var(value)
        if value == "(":
            e = self.expr()
            self.expect(")")
            return e
        raise ExprSyntaxError(f"unexpected {value or 'end of input'!r}", self.source, pos)


_VAR_NAME = re.compile(r"x[1-9]\d*|u[1-9]\d*|t")


def allowed_symbols(n: int, m: int = 0, time: bool = True) -> frozenset:
    names = {f"x{i + 1}" for i in range(n)} | {f"u{j + 1}" for j in range(m)}
    if time:
        names.add("t")
    return frozenset(names)


def parse_expr(source: str, allowed: Iterable[str] | None = None) -> Expr:
    """Parse ``source``. ``allowed`` restricts the variable names that may appear."""
    allowed = None if allowed is None else frozenset(allowed)
    return _Parser(source, allowed).parse()


# ---------------------------------------------------------------------------
# structure queries


def free_symbols(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Neg):
        return free_symbols(e.arg)
    if isinstance(e, Call):
        return free_symbols(e.arg)
    return free_symbols(e.left) | free_symbols(e.right)


def substitute(e: Expr, mapping: dict) -> Expr:
    """Replace variables by expressions (``mapping`` values may be Expr or numbers)."""
    if isinstance(e, Var):
        return as_expr(mapping[e.name]) if e.name in mapping else e
    if isinstance(e, Const):
        return e
    if isinstance(e, Neg):
        return neg(substitute(e.arg, mapping))
    if isinstance(e, Call):
        return Call(e.fn, substitute(e.arg, mapping))
    return _rebuild(e.op, substitute(e.left, mapping), substitute(e.right, mapping))


def _rebuild(op, a, b):
    return {"+": add, "-": sub, "*": mul, "/": div, "^": power}[op](a, b)


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, var: str) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to the variable ``var``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if var not in free_symbols(e):
        return ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, var))
    if isinstance(e, Call):
        a = e.arg
        da = diff(a, var)
        fn = e.fn
        if fn == "sin":
            outer = Call("cos", a)
        elif fn == "cos":
            outer = neg(Call("sin", a))
        elif fn == "tanh":
            outer = sub(ONE, power(Call("tanh", a), Const(2.0)))
        elif fn == "exp":
            outer = e
        elif fn == "log":
            return div(da, a)
        elif fn == "sqrt":
            return div(da, mul(Const(2.0), e))
        elif fn == "abs":
            outer = Call("sign", a)
        elif fn == "sign":
            return ZERO
        else:  # pragma: no cover - guarded by the parser
            raise UnknownSymbolError(fn)
        return mul(outer, da)
    a, b = e.left, e.right
    op = e.op
    if op == "+":
        return add(diff(a, var), diff(b, var))
    if op == "-":
        return sub(diff(a, var), diff(b, var))
    if op == "*":
        return add(mul(diff(a, var), b), mul(a, diff(b, var)))
    if op == "/":
        da, db = diff(a, var), diff(b, var)
        if _is_const(db, 0.0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, Const(2.0)))
    # power
    if isinstance(b, Const):
        return mul(mul(Const(b.value), power(a, Const(b.value - 1.0))), diff(a, var))
    if var not in free_symbols(a):
        return mul(mul(e, Call("log", a)), diff(b, var))
    return mul(e, add(mul(diff(b, var), Call("log", a)), div(mul(b, diff(a, var)), a)))


def gradient(e: Expr, variables: Sequence[str]) -> list:
    return [diff(e, v) for v in variables]


def jacobian(exprs: Sequence[Expr], variables: Sequence[str]) -> list:
    return [[diff(e, v) for v in variables] for e in exprs]


def state_names(n: int) -> list:
    return [f"x{i + 1}" for i in range(n)]


def input_names(m: int) -> list:
    return [f"u{j + 1}" for j in range(m)]


# ---------------------------------------------------------------------------
# printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_string(e: Expr, prec: int = 0) -> str:
    if isinstance(e, Const):
        s = _fmt_num(e.value)
        return f"({s})" if e.value < 0 or (s.startswith("-")) else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({to_string(e.arg)})"
    if isinstance(e, Neg):
        s = "-" + to_string(e.arg, _PREC["neg"])
        return f"({s})" if prec >= _PREC["neg"] else s
    p = _PREC[e.op]
    if e.op == "^":
        s = f"{to_string(e.left, p + 1)}^{to_string(e.right, p)}"
    else:
        # left-associative: the right operand needs parentheses at equal precedence
        s = f"{to_string(e.left, p)}{_spaced(e.op)}{to_string(e.right, p + 1)}"
    return f"({s})" if prec > p else s


def _spaced(op):
    return f" {op} " if op in "+-" else op


# ---------------------------------------------------------------------------
# numeric evaluation


def _div(a, b):
    if np.any(b == 0):
        raise DomainError("division by zero")
    return a / b


def _log(a):
    if np.any(a <= 0):
        raise DomainError("log of a non-positive number")
    return np.log(a)


def _sqrt(a):
    if np.any(a < 0):
        raise DomainError("sqrt of a negative number")
    return np.sqrt(a)


def _ipow(a, k):
    if k < 0 and np.any(a == 0):
        raise DomainError("division by zero in negative power")
    return a ** k


def _rpow(a, b):
    if np.any(a < 0):
        raise DomainError("non-integer power of a negative number")
    if np.any((a == 0) & (b <= 0)):
        raise DomainError("non-positive power of zero")
    return np.power(a, b)


def _gpow(a, b):
    # exponent only known at run time
    b_int = np.equal(np.mod(b, 1.0), 0.0)
    if np.any((a < 0) & ~b_int):
        raise DomainError("non-integer power of a negative number")
    if np.any((a == 0) & (b <= 0)):
        raise DomainError("non-positive power of zero")
    return np.power(a, b)


_NAMESPACE = {
    "_div": _div, "_log": _log, "_sqrt": _sqrt, "_ipow": _ipow, "_rpow": _rpow, "_gpow": _gpow,
    "_sin": np.sin, "_cos": np.cos, "_tanh": np.tanh, "_exp": np.exp, "_abs": np.abs,
    "_sign": np.sign,
}


def to_source(e: Expr) -> str:
    """Python source for ``e`` in terms of arrays ``x``, ``u`` (last axis) and ``t``."""
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        if e.name == "t":
            return "t"
        return f"{e.name[0]}[..., {int(e.name[1:]) - 1}]"
    if isinstance(e, Neg):
        return f"(-{to_source(e.arg)})"
    if isinstance(e, Call):
        return f"_{e.fn}({to_source(e.arg)})"
    a, b = to_source(e.left), to_source(e.right)
    if e.op in "+-*":
        return f"({a} {e.op} {b})"
    if e.op == "/":
        return f"_div({a}, {b})"
    if isinstance(e.right, Const):
        k = e.right.value
        if k == int(k):
            return f"_ipow({a}, {int(k)})"
        return f"_rpow({a}, {k!r})"
    return f"_gpow({a}, {b})"


@lru_cache(maxsize=4096)
def _compile_tuple(exprs: tuple) -> Callable:
    body = ", ".join(to_source(e) for e in exprs)
    code = f"lambda x, t, u: ({body},)"
    return eval(compile(code, "<expr>", "eval"), dict(_NAMESPACE))


def compile_exprs(exprs: Sequence[Expr], n: int, m: int = 0) -> Callable:
    """Compile a list of expressions into ``fn(x, t=0.0, u=None) -> array (..., k)``.

    ``x`` has shape ``(..., n)``; ``t`` a scalar or an array broadcastable to the
    batch shape; ``u`` shape ``(..., m)``. Constant entries are broadcast.
    """
    raw = _compile_tuple(tuple(exprs))
    k = len(exprs)

    def fn(x, t=0.0, u=None):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        u = np.zeros(x.shape[:-1] + (max(m, 1),)) if u is None else np.asarray(u, dtype=float)
        if x.shape[-1] != n:
            raise ValueError(f"expected state of dimension {n}, got {x.shape[-1]}")
        batch = np.broadcast_shapes(x.shape[:-1], t.shape, u.shape[:-1])
        with np.errstate(over="ignore", invalid="ignore"):
            values = raw(x, t, u)
        out = np.empty(batch + (k,))
        for i, v in enumerate(values):
            out[..., i] = v
        return out

    return fn


def compile_matrix(rows: Sequence[Sequence[Expr]], n: int, m: int = 0) -> Callable:
    """Like :func:`compile_exprs` for a matrix of expressions, returning ``(..., r, c)``."""
    r = len(rows)
    c = len(rows[0]) if r else 0
    flat = compile_exprs([e for row in rows for e in row], n, m)

    def fn(x, t=0.0, u=None):
        v = flat(x, t, u)
        return v.reshape(v.shape[:-1] + (r, c))

    return fn
