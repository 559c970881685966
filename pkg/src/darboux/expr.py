"""Scalar expression trees: parsing, evaluation and symbolic differentiation.

Expressions are immutable.  Evaluation accepts either floats or numpy arrays
for the variable bindings, so one tree can be evaluated on a whole batch of
points at once.

Grammar (whitespace-insensitive)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" unary)?
    atom   := number | ident | func "(" expr ")" | "(" expr ")"

``^`` is right-associative and binds tighter than unary minus, so ``-x^2``
is ``-(x^2)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

Value = Union[float, np.ndarray]
Binding = Mapping[str, Value]

FUNCTIONS = ("sin", "cos", "exp", "log", "sqrt", "tanh")


class ExpressionError(Exception):
    pass


class ParseError(ExpressionError, ValueError):
    def __init__(self, message: str, source: str, offset: int):
        self.source = source
        self.offset = offset
        super().__init__(f"{message} at byte {offset}: {source!r}")


class UnknownFunctionError(ParseError):
    pass


class UnboundVariableError(ExpressionError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(name)

    def __str__(self) -> str:
        return f"unbound variable {self.name!r}"


class DomainError(ExpressionError, ArithmeticError):
    """Raised when a node is evaluated outside its domain."""

    def __init__(self, message: str, node: Expression):
        self.node = node
        super().__init__(f"{message} in {node}")


class Expression:
    """Base class of all expression nodes."""

    __slots__ = ()

    def evaluate(self, binding: Binding) -> Value:
        raise NotImplementedError

    def diff(self, var: str) -> Expression:
        raise NotImplementedError

    def free_variables(self) -> frozenset[str]:
        raise NotImplementedError

    def rename(self, mapping: Mapping[str, str]) -> Expression:
        raise NotImplementedError

    def __call__(self, **binding: Value) -> Value:
        return self.evaluate(binding)


@dataclass(frozen=True)
class Const(Expression):
    value: float

    def evaluate(self, binding):
        return self.value

    def diff(self, var):
        return ZERO

    def free_variables(self):
        return frozenset()

    def rename(self, mapping):
        return self

    def __str__(self) -> str:
        text = repr(float(self.value))
        return f"({text})" if self.value < 0 else text


ZERO = Const(0.0)
ONE = Const(1.0)


@dataclass(frozen=True)
class Var(Expression):
    name: str

    def evaluate(self, binding):
        try:
            return binding[self.name]
        except KeyError:
            raise UnboundVariableError(self.name) from None

    def diff(self, var):
        return ONE if var == self.name else ZERO

    def free_variables(self):
        return frozenset((self.name,))

    def rename(self, mapping):
        return Var(mapping.get(self.name, self.name))

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Neg(Expression):
    arg: Expression

    def evaluate(self, binding):
        return -self.arg.evaluate(binding)

    def diff(self, var):
        return neg(self.arg.diff(var))

    def free_variables(self):
        return self.arg.free_variables()

    def rename(self, mapping):
        return Neg(self.arg.rename(mapping))

    def __str__(self) -> str:
        return f"(-{self.arg})"


def _check(cond, message: str, node: Expression) -> None:
    if np.any(cond):
        raise DomainError(message, node)


@dataclass(frozen=True)
class Call(Expression):
    func: str
    arg: Expression

    def evaluate(self, binding):
        a = self.arg.evaluate(binding)
        f = self.func
        if f == "log":
            _check(np.less_equal(a, 0.0), "log of nonpositive value", self)
            return np.log(a)
        if f == "sqrt":
            _check(np.less(a, 0.0), "sqrt of negative value", self)
            return np.sqrt(a)
        if f == "exp":
            with np.errstate(over="ignore"):
                out = np.exp(a)
            _check(np.isinf(out), "exp overflow", self)
            return out
        return getattr(np, f)(a)

    def diff(self, var):
        if var not in self.free_variables():
            return ZERO
        a = self.arg
        f = self.func
        if f == "sin":
            outer = Call("cos", a)
        elif f == "cos":
            outer = neg(Call("sin", a))
        elif f == "exp":
            outer = self
        elif f == "log":
            return div(a.diff(var), a)
        elif f == "sqrt":
            return div(a.diff(var), mul(Const(2.0), self))
        else:  # tanh
            outer = sub(ONE, Pow(self, Const(2.0)))
        return mul(outer, a.diff(var))

    def free_variables(self):
        return self.arg.free_variables()

    def rename(self, mapping):
        return Call(self.func, self.arg.rename(mapping))

    def __str__(self) -> str:
        return f"{self.func}({self.arg})"


@dataclass(frozen=True)
class BinOp(Expression):
    left: Expression
    right: Expression
    symbol = "?"

    def free_variables(self):
        return self.left.free_variables() | self.right.free_variables()

    def rename(self, mapping):
        return type(self)(self.left.rename(mapping), self.right.rename(mapping))

    def __str__(self) -> str:
        return f"({self.left} {self.symbol} {self.right})"


class Add(BinOp):
    symbol = "+"

    def evaluate(self, binding):
        return self.left.evaluate(binding) + self.right.evaluate(binding)

    def diff(self, var):
        return add(self.left.diff(var), self.right.diff(var))


class Sub(BinOp):
    symbol = "-"

    def evaluate(self, binding):
        return self.left.evaluate(binding) - self.right.evaluate(binding)

    def diff(self, var):
        return sub(self.left.diff(var), self.right.diff(var))


class Mul(BinOp):
    symbol = "*"

    def evaluate(self, binding):
        return self.left.evaluate(binding) * self.right.evaluate(binding)

    def diff(self, var):
        a, b = self.left, self.right
        return add(mul(a.diff(var), b), mul(a, b.diff(var)))


class Div(BinOp):
    symbol = "/"

    def evaluate(self, binding):
        num = self.left.evaluate(binding)
        den = self.right.evaluate(binding)
        _check(np.equal(den, 0.0), "division by zero", self)
        return num / den

    def diff(self, var):
        a, b = self.left, self.right
        da, db = a.diff(var), b.diff(var)
        if db == ZERO:
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), Pow(b, Const(2.0)))


class Pow(BinOp):
    symbol = "^"

    def evaluate(self, binding):
        base = self.left.evaluate(binding)
        expo = self.right.evaluate(binding)
        base_arr = np.asarray(base, dtype=float)
        expo_arr = np.asarray(expo, dtype=float)
        noninteger = expo_arr != np.round(expo_arr)
        _check((base_arr < 0) & noninteger, "negative base with non-integer exponent", self)
        _check((base_arr == 0) & (expo_arr < 0), "zero to a negative power", self)
        with np.errstate(over="ignore"):
            out = np.power(base_arr, expo_arr)
        _check(np.isinf(out), "power overflow", self)
        if np.ndim(out) == 0:
            return float(out)
        return out

    def diff(self, var):
        a, b = self.left, self.right
        if var not in self.free_variables():
            return ZERO
        if var not in b.free_variables():
            # power rule; valid for negative bases with integer exponents
            return mul(mul(b, Pow(a, sub(b, ONE))), a.diff(var))
        # general case a^b = exp(b log a)
        term = add(mul(b.diff(var), Call("log", a)), div(mul(b, a.diff(var)), a))
        return mul(self, term)


# Constructors with trivial constant folding; keeps derivative trees small.


def add(a: Expression, b: Expression) -> Expression:
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    return Add(a, b)


def sub(a: Expression, b: Expression) -> Expression:
    if b == ZERO:
        return a
    if a == ZERO:
        return neg(b)
    return Sub(a, b)


def mul(a: Expression, b: Expression) -> Expression:
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    return Mul(a, b)


def div(a: Expression, b: Expression) -> Expression:
    if a == ZERO:
        return ZERO
    if b == ONE:
        return a
    return Div(a, b)


def neg(a: Expression) -> Expression:
    if a == ZERO:
        return ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z][A-Za-z0-9]*)
  | (?P<op>[-+*/^()])
    """,
    re.VERBOSE,
)


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(source):
            m = _TOKEN.match(source, pos)
            if m is None:
                self._fail(f"unexpected character {source[pos]!r}", pos)
            kind = m.lastgroup
            if kind != "ws":
                self.tokens.append((kind, m.group(), pos))
            pos = m.end()
        self.tokens.append(("end", "", len(source)))
        self.index = 0

    def _fail(self, message: str, pos: int, cls=ParseError):
        offset = len(self.source[:pos].encode("utf-8"))
        raise cls(message, self.source, offset)

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.index]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.index]
        self.index += 1
        return tok

    def accept(self, text: str) -> bool:
        kind, value, _ = self.peek()
        if kind == "op" and value == text:
            self.index += 1
            return True
        return False

    def parse(self) -> Expression:
        e = self.expr()
        kind, value, pos = self.peek()
        if kind != "end":
            if value == ")":
                self._fail("unmatched closing parenthesis", pos)
            self._fail(f"unexpected token {value!r}", pos)
        return e

    def expr(self) -> Expression:
        e = self.term()
        while True:
            if self.accept("+"):
                e = Add(e, self.term())
            elif self.accept("-"):
                e = Sub(e, self.term())
            else:
                return e

    def term(self) -> Expression:
        e = self.unary()
        while True:
            if self.accept("*"):
                e = Mul(e, self.unary())
            elif self.accept("/"):
                e = Div(e, self.unary())
            else:
                return e

    def unary(self) -> Expression:
        if self.accept("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.accept("^"):
            return Pow(base, self.unary())
        return base

    def atom(self) -> Expression:
        kind, value, pos = self.take()
        if kind == "number":
            return Const(float(value))
        if kind == "ident":
            nkind, nvalue, _ = self.peek()
            if nkind == "op" and nvalue == "(":
                if value not in FUNCTIONS:
                    self._fail(f"unknown function {value!r}", pos, UnknownFunctionError)
                open_pos = self.take()[2]
                arg = self.expr()
                if not self.accept(")"):
                    self._fail("unclosed parenthesis", open_pos)
                return Call(value, arg)
            if value in FUNCTIONS:
                self._fail(f"function {value!r} requires an argument", pos)
            return Var(value)
        if kind == "op" and value == "(":
            inner = self.expr()
            if not self.accept(")"):
                self._fail("unclosed parenthesis", pos)
            return inner
        if kind == "end":
            self._fail("unexpected end of input", pos)
        self._fail(f"unexpected token {value!r}", pos)


def parse(source: str) -> Expression:
    """Parse ``source`` into an expression tree."""
    return _Parser(source).parse()


def evaluate(e: Expression, binding: Binding) -> Value:
    """Evaluate ``e``; array bindings evaluate elementwise."""
    out = e.evaluate(binding)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    if isinstance(out, (int, float, np.floating)):
        return float(out)
    return out


def evaluate_on(e: Expression, binding: Binding, shape: tuple[int, ...]) -> np.ndarray:
    """Evaluate and broadcast the result to ``shape`` (constants come back scalar)."""
    return np.broadcast_to(np.asarray(evaluate(e, binding), dtype=float), shape)


def diff(e: Expression, var: str) -> Expression:
    """Exact partial derivative of ``e`` with respect to ``var``."""
    return e.diff(var)


def unparse(e: Expression) -> str:
    return str(e)


def is_zero(e: Expression) -> bool:
    return e == ZERO


def constant_value(e: Expression) -> float | None:
    if isinstance(e, Const):
        return e.value
    return None


def finite_difference(e: Expression, var: str, binding: Binding, h: float = 1e-6) -> float:
    """Central difference of ``e`` in ``var``; an independent check on :func:`diff`."""
    hi = dict(binding)
    lo = dict(binding)
    hi[var] = binding[var] + h
    lo[var] = binding[var] - h
    return (evaluate(e, hi) - evaluate(e, lo)) / (2 * h)


__all__ = [
    "Expression",
    "Const",
    "Var",
    "Neg",
    "Call",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "ParseError",
    "UnknownFunctionError",
    "UnboundVariableError",
    "DomainError",
    "ExpressionError",
    "parse",
    "evaluate",
    "evaluate_on",
    "diff",
    "unparse",
    "finite_difference",
]
