"""
Arithmetic expressions over variables ``x1 .. xn``.

Expressions are immutable trees built from constants, variables, negation,
the four binary operators and non-negative integer powers. They can be
parsed from text, evaluated, differentiated symbolically and compiled to
straight-line Python code that works on floats and numpy arrays alike.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

import numpy as np

__all__ = [
    "Expression",
    "Const",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "ExpressionError",
    "ExprSyntaxError",
    "DivisionByZeroError",
    "NonFiniteResultError",
    "parse",
    "evaluate",
    "differentiate",
    "variables",
    "compile_functions",
    "ipow",
]


class ExpressionError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExpressionError):
    """Raised when text cannot be parsed. ``position`` is a 0-based column."""

    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position}: {text!r}")


class DivisionByZeroError(ZeroDivisionError, ArithmeticError):
    """A quotient denominator evaluated to zero."""


class NonFiniteResultError(ArithmeticError):
    """Evaluation finished but produced an infinite or NaN value."""


# ---------------------------------------------------------------------------
# Tree nodes


class Expression:
    """Base class of all expression nodes."""

    __slots__ = ()

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k: int):
        return power(self, k)

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, repr=False, eq=True)
class Const(Expression):
    value: float

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, repr=False, eq=True)
class Var(Expression):
    index: int  # 1-based

    def __post_init__(self):
        if self.index < 1:
            raise ExpressionError(f"variable index must be >= 1, got {self.index}")

    def __repr__(self):
        return f"Var({self.index})"


@dataclass(frozen=True, repr=False, eq=True)
class Neg(Expression):
    arg: Expression

    def __repr__(self):
        return f"Neg({self.arg!r})"


@dataclass(frozen=True, repr=False, eq=True)
class _Binary(Expression):
    left: Expression
    right: Expression

    def __repr__(self):
        return f"{type(self).__name__}({self.left!r}, {self.right!r})"


class Add(_Binary):
    pass


class Sub(_Binary):
    pass


class Mul(_Binary):
    pass


class Div(_Binary):
    pass


@dataclass(frozen=True, repr=False, eq=True)
class Pow(Expression):
    base: Expression
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or self.exponent < 0:
            raise ExpressionError(f"power exponent must be a non-negative integer, got {self.exponent!r}")

    def __repr__(self):
        return f"Pow({self.base!r}, {self.exponent})"


def _coerce(v) -> Expression:
    if isinstance(v, Expression):
        return v
    if isinstance(v, (int, float)):
        return Const(float(v))
    raise TypeError(f"cannot use {type(v).__name__} in an expression")


ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(e: Expression, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


# Smart constructors: constant folding plus the 0/1 identities.


def neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
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
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if isinstance(b, Const):
        if b.value == 0.0:
            # kept symbolic so evaluation reports the division by zero
            return Div(a, b)
        if isinstance(a, Const):
            return Const(a.value / b.value)
        if b.value == 1.0:
            return a
    if _is_const(a, 0.0):
        return ZERO
    return Div(a, b)


def power(a: Expression, k: int) -> Expression:
    if isinstance(k, float) and k.is_integer():
        k = int(k)
    if not isinstance(k, int) or k < 0:
        raise ExpressionError(f"power exponent must be a non-negative integer, got {k!r}")
    if k == 0:
        return ONE
    if k == 1:
        return a
    if isinstance(a, Const):
        return Const(ipow(a.value, k))
    if isinstance(a, Pow):
        return Pow(a.base, a.exponent * k)
    return Pow(a, k)


# ---------------------------------------------------------------------------
# Integer powers
#
# Every evaluation path (tree walk, compiled scalar code, compiled array code)
# raises to integer powers through the same multiplication chain so that all
# of them agree to the last bit.


def _pow_chain(k: int) -> list[tuple[int, int]]:
    """Steps of a left-to-right binary powering scheme.

    Returns a list of ``(a, b)`` pairs meaning "multiply partial power a by
    partial power b"; partial powers are numbered by their exponent.
    """
    steps = []
    acc = 1
    for bit in bin(k)[3:]:
        steps.append((acc, acc))
        acc *= 2
        if bit == "1":
            steps.append((acc, 1))
            acc += 1
    return steps


def ipow(v, k: int):
    """Raise ``v`` (float or array) to the non-negative integer power ``k``."""
    if k == 0:
        return 1.0
    parts = {1: v}
    acc = 1
    for a, b in _pow_chain(k):
        parts[a + b] = parts[a] * parts[b]
        acc = a + b
    return parts[acc]


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)
_VARNAME = re.compile(r"x([1-9][0-9]*)$")


class _Parser:
    def __init__(self, text: str, n_vars: int):
        self.text = text
        self.n_vars = n_vars
        self.tokens = self._tokenize(text)
        self.pos = 0

    def _tokenize(self, text):
        tokens = []
        i = 0
        while i < len(text):
            if text[i].isspace():
                i += 1
                continue
            m = _TOKEN.match(text, i)
            if m is None:
                raise ExprSyntaxError(f"unexpected character {text[i]!r}", text, i)
            start = m.start(m.lastgroup)
            tokens.append((m.lastgroup, m.group(m.lastgroup), start))
            i = m.end()
        tokens.append(("end", "", len(text)))
        return tokens

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value):
        kind, val, at = self.take()
        if val != value or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", self.text, at)

    def parse(self) -> Expression:
        e = self.sum()
        kind, val, at = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", self.text, at)
        return e

    def sum(self):
        e = self.product()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.product()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def product(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.unary()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, at = self.peek()
        if kind == "op" and val == "^":
            self.take()
            exp_at = self.peek()[2]
            exponent = self.power()  # right-associative
            if not isinstance(exponent, Const):
                raise ExprSyntaxError("exponent must be a constant", self.text, exp_at)
            k = exponent.value
            if not float(k).is_integer() or k < 0:
                raise ExprSyntaxError(
                    f"exponent must be a non-negative integer, got {k!r}", self.text, exp_at
                )
            return power(base, int(k))
        return base

    def atom(self):
        kind, val, at = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            m = _VARNAME.match(val)
            if m is None:
                raise ExprSyntaxError(f"unknown variable {val!r}", self.text, at)
            idx = int(m.group(1))
            if idx > self.n_vars:
                raise ExprSyntaxError(
                    f"variable index out of range: {val} (n_vars={self.n_vars})", self.text, at
                )
            return Var(idx)
        if kind == "op" and val == "(":
            e = self.sum()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", self.text, at)


def parse(text: str, n_vars: int) -> Expression:
    """Parse ``text`` into an expression over ``x1 .. x{n_vars}``.

    Precedence, from tightest: ``^`` (right-associative, non-negative integer
    constant exponents), unary minus, ``* /``, ``+ -``. Binary operators of
    equal precedence associate to the left.

    Raises
    ------
    ExprSyntaxError
        On malformed input, unknown names or variable indices above ``n_vars``.
    """
    if n_vars < 1:
        raise ValueError("n_vars must be positive")
    return _Parser(text, n_vars).parse()


# ---------------------------------------------------------------------------
# Printing

_PREC = {Add: 1, Sub: 1, Mul: 2, Div: 2, Neg: 3, Pow: 4}


def _fmt_const(v: float) -> str:
    r = repr(float(v))
    return f"({r})" if r.startswith("-") else r


def to_text(e: Expression) -> str:
    """Render ``e`` in the parser's grammar; ``parse(to_text(e))`` evaluates identically."""
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return f"x{e.index}"
    if isinstance(e, Neg):
        inner = to_text(e.arg)
        if _PREC.get(type(e.arg), 5) < _PREC[Neg]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Pow):
        inner = to_text(e.base)
        if not isinstance(e.base, (Var,)) and not (isinstance(e.base, Const) and math.copysign(1.0, e.base.value) > 0):
            inner = f"({inner})"
        return f"{inner}^{e.exponent}"
    if isinstance(e, _Binary):
        op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
        p = _PREC[type(e)]
        left = to_text(e.left)
        if _PREC.get(type(e.left), 5) < p:
            left = f"({left})"
        right = to_text(e.right)
        # right operand needs parentheses at equal precedence (left-associative grammar)
        if _PREC.get(type(e.right), 5) <= p:
            right = f"({right})"
        return f"{left} {op} {right}"
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(e: Expression, point: Sequence[float]) -> float:
    """Evaluate ``e`` at ``point`` (``point[0]`` is ``x1``).

    Raises
    ------
    DivisionByZeroError
        If a quotient denominator is zero on the evaluation path.
    NonFiniteResultError
        If the result overflows or is NaN.
    """
    point = [float(v) for v in point]
    value = _eval(e, point)
    if not math.isfinite(value):
        raise NonFiniteResultError(f"expression evaluated to {value}")
    return value


def _eval(e: Expression, p: list[float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        if e.index > len(p):
            raise ExpressionError(f"x{e.index} is not defined for a point of length {len(p)}")
        return p[e.index - 1]
    if isinstance(e, Neg):
        return -_eval(e.arg, p)
    if isinstance(e, Pow):
        return ipow(_eval(e.base, p), e.exponent)
    a = _eval(e.left, p)
    b = _eval(e.right, p)
    if isinstance(e, Add):
        return a + b
    if isinstance(e, Sub):
        return a - b
    if isinstance(e, Mul):
        return a * b
    if isinstance(e, Div):
        if b == 0.0:
            raise DivisionByZeroError(f"division by zero in {to_text(e)}")
        return a / b
    raise TypeError(type(e))


def variables(e: Expression) -> frozenset[int]:
    """1-based indices of the variables that occur in ``e``."""
    if isinstance(e, Var):
        return frozenset((e.index,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    return variables(e.left) | variables(e.right)


# ---------------------------------------------------------------------------
# Differentiation


def differentiate(e: Expression, var: int) -> Expression:
    """Symbolic partial derivative of ``e`` with respect to ``x{var}``."""
    if var < 1:
        raise ExpressionError(f"variable index must be >= 1, got {var}")
    return _diff(e, var)


def _diff(e: Expression, v: int) -> Expression:
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.index == v else ZERO
    if isinstance(e, Neg):
        return neg(_diff(e.arg, v))
    if isinstance(e, Add):
        return add(_diff(e.left, v), _diff(e.right, v))
    if isinstance(e, Sub):
        return sub(_diff(e.left, v), _diff(e.right, v))
    if isinstance(e, Mul):
        return add(mul(_diff(e.left, v), e.right), mul(e.left, _diff(e.right, v)))
    if isinstance(e, Div):
        da, db = _diff(e.left, v), _diff(e.right, v)
        if _is_const(db, 0.0):
            return div(da, e.right)
        return div(sub(mul(da, e.right), mul(e.left, db)), power(e.right, 2))
    if isinstance(e, Pow):
        k = e.exponent
        if k == 0:
            return ZERO
        db = _diff(e.base, v)
        return mul(mul(Const(float(k)), power(e.base, k - 1)), db)
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# Compilation


class _CodeGen:
    """Emit straight-line code with common subexpressions shared."""

    def __init__(self):
        self.lines: list[str] = []
        self.names: dict[Expression, str] = {}
        self.counter = 0

    def fresh(self) -> str:
        self.counter += 1
        return f"_t{self.counter}"

    def emit(self, e: Expression) -> str:
        if isinstance(e, Const):
            return f"({e.value!r})"
        if isinstance(e, Var):
            return f"x{e.index}"
        cached = self.names.get(e)
        if cached is not None:
            return cached
        if isinstance(e, Neg):
            rhs = f"-{self.emit(e.arg)}"
        elif isinstance(e, Pow):
            rhs = self._emit_pow(self.emit(e.base), e.exponent)
        else:
            op = {Add: "+", Sub: "-", Mul: "*", Div: "/"}[type(e)]
            a = self.emit(e.left)
            b = self.emit(e.right)
            rhs = f"{a} {op} {b}"
        name = self.fresh()
        self.lines.append(f"{name} = {rhs}")
        self.names[e] = name
        return name

    def _emit_pow(self, base: str, k: int) -> str:
        if k == 0:
            return "1.0"
        parts = {1: base}
        acc = 1
        for a, b in _pow_chain(k):
            name = self.fresh()
            self.lines.append(f"{name} = {parts[a]} * {parts[b]}")
            parts[a + b] = name
            acc = a + b
        return parts[acc]


def compile_source(exprs: Sequence[Expression], n_vars: int, name: str = "_f") -> str:
    """Python source of a function ``name(x)`` returning a tuple of values.

    ``x`` is any sequence of ``n_vars`` floats or equally shaped arrays.
    """
    gen = _CodeGen()
    outs = [gen.emit(e) for e in exprs]
    head = [f"def {name}(x):"]
    if n_vars:
        unpack = ", ".join(f"x{i}" for i in range(1, n_vars + 1))
        head.append(f"    {unpack}, = x")
    body = [f"    {line}" for line in gen.lines]
    ret = "    return (" + "".join(f"{o}, " for o in outs) + ")"
    return "\n".join(head + body + [ret]) + "\n"


def compile_functions(exprs: Sequence[Expression], n_vars: int) -> Callable[[Sequence], tuple]:
    """Compile ``exprs`` into one callable returning all their values.

    The generated code uses only ``+ - * /`` so it runs on Python floats and
    numpy arrays and produces bit-identical results on both. Constant outputs
    are returned as floats (not broadcast).
    """
    for e in exprs:
        bad = [i for i in variables(e) if i > n_vars]
        if bad:
            raise ExpressionError(f"x{max(bad)} exceeds n_vars={n_vars}")
    src = compile_source(exprs, n_vars)
    ns: dict = {}
    exec(compile(src, "<dpsaddle.expr>", "exec"), ns)
    fn = ns["_f"]
    fn.source = src
    return fn


def evaluate_many(exprs: Sequence[Expression], points: np.ndarray) -> np.ndarray:
    """Evaluate several expressions on a batch of points.

    ``points`` has shape ``(N, n_vars)``; the result has shape ``(N, len(exprs))``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fn = compile_functions(exprs, points.shape[1])
    cols = fn(list(points.T))
    out = np.empty((points.shape[0], len(exprs)))
    for j, c in enumerate(cols):
        out[:, j] = c
    return out


ExpressionLike = Union[Expression, str]


def as_expression(e: ExpressionLike, n_vars: int) -> Expression:
    if isinstance(e, Expression):
        return e
    return parse(e, n_vars)


def jacobian(exprs: Iterable[Expression], n_vars: int) -> list[list[Expression]]:
    """Symbolic Jacobian: ``J[j][i] = d exprs[j] / d x{i+1}``."""
    return [[differentiate(e, i) for i in range(1, n_vars + 1)] for e in exprs]
