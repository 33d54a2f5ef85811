"""Scalar-field expressions: parsing, evaluation and second-order forward AD.

Expressions are written in a small infix language::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | base ('^' integer)?
    base   := number | ident | ident '(' expr ')' | '(' expr ')'

Identifiers are the coordinate names of the enclosing chart, the constant
``pi``, or one of the builtin functions in :data:`FUNCTIONS`.

Evaluation is vectorised: a point argument may be a single coordinate tuple
or an array of shape ``(N, n)``; results then carry a leading batch axis.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "ExprSyntaxError",
    "UnknownIdentifier",
    "DomainError",
    "Const",
    "Var",
    "Neg",
    "BinOp",
    "Pow",
    "Call",
    "Jet2",
    "FUNCTIONS",
    "parse",
    "to_source",
    "evaluate",
    "eval_jet2",
    "differentiate",
    "bump",
]

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "abs", "bump")
NAMED_CONSTANTS = {"pi": math.pi}


class ExprSyntaxError(SyntaxError):
    """Malformed expression. ``offset`` is the 1-based byte position."""

    def __init__(self, message, offset, expected=None):
        self.expected = expected
        text = f"{message} at offset {offset}"
        if expected:
            text += f", expected {expected!r}"
        super().__init__(text)
        self.offset = offset


class UnknownIdentifier(ValueError):
    def __init__(self, name, offset):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class DomainError(ArithmeticError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (node at offset {offset})")
        self.offset = offset


# -- AST ---------------------------------------------------------------------
# Offsets are excluded from equality so that reparsed trees compare equal.


@dataclass(frozen=True)
class Const:
    value: float
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Var:
    name: str
    index: int
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Neg:
    arg: "Expr"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: int
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"
    offset: int = field(default=0, compare=False)


Expr = Union[Const, Var, Neg, BinOp, Pow, Call]


# -- parser ------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    raw = source.encode("utf-8")
    # byte offsets, so that non-ASCII input still reports positions correctly
    def byte_offset(char_pos):
        return len(source[:char_pos].encode("utf-8")) + 1

    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(source, pos)
        if not m or m.end() == pos:
            stripped = len(source[pos:]) - len(source[pos:].lstrip())
            raise ExprSyntaxError(
                f"unexpected character {source[pos + stripped]!r}",
                byte_offset(pos + stripped),
            )
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), byte_offset(start)))
        pos = m.end()
    tokens.append(("end", "", len(raw) + 1))
    return tokens


class _Parser:
    def __init__(self, source, coords):
        self.tokens = _tokenize(source)
        self.i = 0
        self.coords = {name: k for k, name in enumerate(coords)}

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, offset = self.tok
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"unexpected {found}", offset, expected=value)
        return self.advance()

    def parse(self):
        node = self.expr()
        kind, text, offset = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"unexpected {text!r}", offset, expected="end of input")
        return node

    def expr(self):
        node = self.term()
        while self.tok[1] in ("+", "-") and self.tok[0] == "op":
            _, op, offset = self.advance()
            node = BinOp(op, node, self.term(), offset)
        return node

    def term(self):
        node = self.factor()
        while self.tok[1] in ("*", "/") and self.tok[0] == "op":
            _, op, offset = self.advance()
            node = BinOp(op, node, self.factor(), offset)
        return node

    def factor(self):
        kind, text, offset = self.tok
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.factor(), offset)
        node = self.base()
        if self.tok[0] == "op" and self.tok[1] == "^":
            _, _, pow_offset = self.advance()
            kind, text, exp_offset = self.tok
            if kind != "num" or not text.isdigit():
                raise ExprSyntaxError(
                    "exponent must be a nonnegative integer literal",
                    exp_offset,
                    expected="integer",
                )
            self.advance()
            node = Pow(node, int(text), pow_offset)
        return node

    def base(self):
        kind, text, offset = self.tok
        if kind == "num":
            self.advance()
            return Const(float(text), offset)
        if kind == "op" and text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if kind == "ident":
            self.advance()
            if self.tok[0] == "op" and self.tok[1] == "(":
                if text not in FUNCTIONS:
                    raise UnknownIdentifier(text, offset)
                self.advance()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg, offset)
            if text in self.coords:
                return Var(text, self.coords[text], offset)
            if text in NAMED_CONSTANTS:
                return Const(NAMED_CONSTANTS[text], offset)
            if text in FUNCTIONS:
                raise ExprSyntaxError(f"function {text!r} needs an argument",
                                      self.tok[2], expected="(")
            raise UnknownIdentifier(text, offset)
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {found}", offset, expected="expression")


def parse(source: str, coords: Sequence[str]) -> Expr:
    """Parse ``source`` with the given coordinate names in scope."""
    return _Parser(source, list(coords)).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def to_source(node: Expr) -> str:
    """Render an AST as text that parses back to the same tree."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    if isinstance(node, Neg):
        inner = to_source(node.arg)
        if isinstance(node.arg, BinOp):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        inner = to_source(node.base)
        if not isinstance(node.base, (Var, Call)):
            inner = f"({inner})"
        return f"{inner}^{node.exponent}"
    if isinstance(node, BinOp):
        prec = _PREC[node.op]
        left = to_source(node.left)
        if isinstance(node.left, BinOp) and _PREC[node.left.op] < prec:
            left = f"({left})"
        right = to_source(node.right)
        # left-associative: any binary right operand of equal precedence needs parens
        if isinstance(node.right, BinOp) and _PREC[node.right.op] <= prec:
            right = f"({right})"
        elif isinstance(node.right, Neg):
            right = f"({right})"
        return f"{left} {node.op} {right}"
    raise TypeError(f"not an expression node: {node!r}")


# -- the bump profile --------------------------------------------------------


def _bump_derivs(s):
    """Value, first and second derivative of exp(1 - 1/(1-s^2)) on |s|<1, else 0."""
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    q = np.where(inside, 1.0 - s * s, 1.0)
    u = 1.0 - 1.0 / q
    b = np.where(inside, np.exp(u), 0.0)
    du = -2.0 * s / q**2
    ddu = -2.0 / q**2 - 8.0 * s * s / q**3
    # b underflows to 0 long before du, ddu overflow, so these products stay finite
    with np.errstate(invalid="ignore", over="ignore"):
        d1 = np.where(inside & (b > 0), b * du, 0.0)
        d2 = np.where(inside & (b > 0), b * (ddu + du * du), 0.0)
    return b, d1, d2


def bump(s):
    """Smooth compactly supported profile with bump(0) = 1 and support [-1, 1]."""
    return _bump_derivs(s)[0]


# -- value-only evaluation ---------------------------------------------------


def _check_point(point, nvars):
    x = np.asarray(point, dtype=float)
    if x.shape[-1:] != (nvars,):
        raise ValueError(f"point has dimension {x.shape[-1:]}, expected {nvars}")
    return x


def _unary_value(name, u, offset):
    if name == "log":
        if np.any(u <= 0):
            raise DomainError("log of nonpositive value", offset)
        return np.log(u)
    if name == "sqrt":
        if np.any(u < 0):
            raise DomainError("sqrt of negative value", offset)
        return np.sqrt(u)
    if name == "bump":
        return bump(u)
    if name == "abs":
        return np.abs(u)
    return getattr(np, name)(u)


def _value(node, x):
    if isinstance(node, Const):
        return np.full(x.shape[:-1], node.value)
    if isinstance(node, Var):
        return x[..., node.index]
    if isinstance(node, Neg):
        return -_value(node.arg, x)
    if isinstance(node, Pow):
        return _value(node.base, x) ** node.exponent
    if isinstance(node, Call):
        return _unary_value(node.func, _value(node.arg, x), node.offset)
    if isinstance(node, BinOp):
        a = _value(node.left, x)
        b = _value(node.right, x)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if np.any(b == 0):
            raise DomainError("division by zero", node.offset)
        return a / b
    raise TypeError(node)


def evaluate(node: Expr, point, nvars: int | None = None):
    """Evaluate ``node`` at ``point`` (shape ``(n,)`` or ``(N, n)``)."""
    x = np.asarray(point, dtype=float)
    if nvars is not None:
        x = _check_point(x, nvars)
    out = _value(node, x)
    return float(out) if out.ndim == 0 else out


# -- second-order forward AD -------------------------------------------------


@dataclass(frozen=True)
class Jet2:
    """Value, gradient and Hessian of a scalar field (with optional batch axis)."""

    value: np.ndarray
    gradient: np.ndarray
    hessian: np.ndarray

    @classmethod
    def constant(cls, c, batch, n):
        return cls(np.full(batch, float(c)), np.zeros(batch + (n,)), np.zeros(batch + (n, n)))

    @classmethod
    def variable(cls, x, k):
        batch, n = x.shape[:-1], x.shape[-1]
        grad = np.zeros(batch + (n,))
        grad[..., k] = 1.0
        return cls(x[..., k].copy(), grad, np.zeros(batch + (n, n)))

    def apply(self, f0, f1, f2):
        """Chain rule for a unary function with derivatives f0, f1, f2 at ``value``."""
        g = self.gradient
        outer = g[..., :, None] * g[..., None, :]
        return Jet2(
            f0,
            f1[..., None] * g,
            f2[..., None, None] * outer + f1[..., None, None] * self.hessian,
        )

    def __add__(self, other):
        return Jet2(self.value + other.value, self.gradient + other.gradient,
                    self.hessian + other.hessian)

    def __sub__(self, other):
        return Jet2(self.value - other.value, self.gradient - other.gradient,
                    self.hessian - other.hessian)

    def __neg__(self):
        return Jet2(-self.value, -self.gradient, -self.hessian)

    def __mul__(self, other):
        a, b = self, other
        cross = a.gradient[..., :, None] * b.gradient[..., None, :]
        return Jet2(
            a.value * b.value,
            a.value[..., None] * b.gradient + b.value[..., None] * a.gradient,
            a.value[..., None, None] * b.hessian
            + b.value[..., None, None] * a.hessian
            + cross
            + np.swapaxes(cross, -1, -2),
        )


def _jet_unary(name, u: Jet2, offset) -> Jet2:
    v = u.value
    if name == "sin":
        s, c = np.sin(v), np.cos(v)
        return u.apply(s, c, -s)
    if name == "cos":
        s, c = np.sin(v), np.cos(v)
        return u.apply(c, -s, -c)
    if name == "tan":
        t = np.tan(v)
        sec2 = 1.0 + t * t
        return u.apply(t, sec2, 2.0 * t * sec2)
    if name == "exp":
        e = np.exp(v)
        return u.apply(e, e, e)
    if name == "log":
        if np.any(v <= 0):
            raise DomainError("log of nonpositive value", offset)
        return u.apply(np.log(v), 1.0 / v, -1.0 / (v * v))
    if name == "sqrt":
        if np.any(v <= 0):
            raise DomainError("sqrt is not differentiable at nonpositive values", offset)
        r = np.sqrt(v)
        return u.apply(r, 0.5 / r, -0.25 / (r * v))
    if name == "tanh":
        t = np.tanh(v)
        d = 1.0 - t * t
        return u.apply(t, d, -2.0 * t * d)
    if name == "abs":
        sgn = np.sign(v)
        return u.apply(np.abs(v), sgn, np.zeros_like(v))
    if name == "bump":
        return u.apply(*_bump_derivs(v))
    raise UnknownIdentifier(name, offset)


def _jet(node, x) -> Jet2:
    batch, n = x.shape[:-1], x.shape[-1]
    if isinstance(node, Const):
        return Jet2.constant(node.value, batch, n)
    if isinstance(node, Var):
        return Jet2.variable(x, node.index)
    if isinstance(node, Neg):
        return -_jet(node.arg, x)
    if isinstance(node, Pow):
        u = _jet(node.base, x)
        k = node.exponent
        if k == 0:
            return Jet2.constant(1.0, batch, n)
        v = u.value
        f0 = v**k
        f1 = k * v ** (k - 1)
        f2 = k * (k - 1) * v ** (k - 2) if k >= 2 else np.zeros_like(v)
        return u.apply(f0, f1, f2)
    if isinstance(node, Call):
        return _jet_unary(node.func, _jet(node.arg, x), node.offset)
    if isinstance(node, BinOp):
        a = _jet(node.left, x)
        b = _jet(node.right, x)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        w = b.value
        if np.any(w == 0):
            raise DomainError("division by zero", node.offset)
        return a * b.apply(1.0 / w, -1.0 / (w * w), 2.0 / (w * w * w))
    raise TypeError(node)


def eval_jet2(node: Expr, point, nvars: int | None = None) -> Jet2:
    """Value, gradient and Hessian of ``node`` at ``point``.

    The Hessian is symmetrised explicitly; products of gradients are
    symmetric only up to rounding otherwise.
    """
    x = np.asarray(point, dtype=float)
    if nvars is not None:
        x = _check_point(x, nvars)
    jet = _jet(node, x)
    hess = 0.5 * (jet.hessian + np.swapaxes(jet.hessian, -1, -2))
    return Jet2(jet.value, jet.gradient, hess)


# -- symbolic differentiation ------------------------------------------------


def differentiate(node: Expr, index: int) -> Expr:
    """AST of the partial derivative of ``node`` in coordinate ``index``.

    Used where a metric is built from first derivatives of a user field
    (graphs of functions), so that the metric still carries exact jets.
    Only the zero constant is folded.
    """
    zero = Const(0.0)

    def is_zero(e):
        return isinstance(e, Const) and e.value == 0.0

    def mul(a, b):
        if is_zero(a) or is_zero(b):
            return zero
        if isinstance(a, Const) and a.value == 1.0:
            return b
        if isinstance(b, Const) and b.value == 1.0:
            return a
        return BinOp("*", a, b)

    def add(a, b):
        if is_zero(a):
            return b
        if is_zero(b):
            return a
        return BinOp("+", a, b)

    def d(e):
        if isinstance(e, Const):
            return zero
        if isinstance(e, Var):
            return Const(1.0) if e.index == index else zero
        if isinstance(e, Neg):
            de = d(e.arg)
            return zero if is_zero(de) else Neg(de)
        if isinstance(e, Pow):
            k = e.exponent
            if k == 0:
                return zero
            inner = Const(1.0) if k == 1 else (e.base if k == 2 else Pow(e.base, k - 1))
            return mul(mul(Const(float(k)), inner), d(e.base))
        if isinstance(e, BinOp):
            da, db = d(e.left), d(e.right)
            if e.op == "+":
                return add(da, db)
            if e.op == "-":
                if is_zero(db):
                    return da
                return BinOp("-", da, db)
            if e.op == "*":
                return add(mul(da, e.right), mul(e.left, db))
            # (a/b)' = a'/b - a b'/b^2
            first = zero if is_zero(da) else BinOp("/", da, e.right)
            if is_zero(db):
                return first
            second = BinOp("/", mul(e.left, db), Pow(e.right, 2))
            if is_zero(first):
                return Neg(second)
            return BinOp("-", first, second)
        if isinstance(e, Call):
            du = d(e.arg)
            if is_zero(du):
                return zero
            u = e.arg
            f = e.func
            if f == "sin":
                outer = Call("cos", u)
            elif f == "cos":
                outer = Neg(Call("sin", u))
            elif f == "tan":
                outer = BinOp("+", Const(1.0), Pow(Call("tan", u), 2))
            elif f == "exp":
                outer = e
            elif f == "log":
                outer = BinOp("/", Const(1.0), u)
            elif f == "sqrt":
                outer = BinOp("/", Const(0.5), e)
            elif f == "tanh":
                outer = BinOp("-", Const(1.0), Pow(Call("tanh", u), 2))
            elif f == "abs":
                outer = BinOp("/", u, e)
            else:
                raise ValueError(f"cannot differentiate {f!r} symbolically")
            return mul(outer, du)
        raise TypeError(e)

    return d(node)
