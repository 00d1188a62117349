"""Coefficient expressions: parsing, unparsing and forward-mode differentiation.

Grammar (whitespace insignificant)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := "-" unary | power
    power  := atom ("^" ["-"] INTEGER)*
    atom   := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Names are ``u``, ``x1`` .. ``xd`` (plus ``t`` where a caller allows it) and the
functions in :data:`FUNCTIONS`.  Exponents are integer literals only; a chain
``x^2^3`` folds to the left.

Evaluation works on floats and on numpy arrays alike (broadcasting), carrying a
single directional derivative alongside each value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
    "tanh": 1,
    "atan": 1,
    "sqrt": 1,
    "abs": 1,
    "min": -2,  # negative: at least that many arguments
    "max": -2,
}

_VAR_RE = re.compile(r"x([1-9][0-9]*)\Z")


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.offset = offset
        self.expected = expected
        detail = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{message} at byte {offset}{detail}")


class UnknownIdentifier(ValueError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at byte {offset}")


class EvalDomainError(ArithmeticError):
    """Raised when an expression is evaluated outside its domain."""

    def __init__(self, reason: str, subexpr: "Expr"):
        self.reason = reason
        self.subexpr = subexpr
        super().__init__(f"{reason} in {unparse(subexpr)!r}")


class Expr:
    """Base class of the immutable syntax tree."""

    __slots__ = ()

    def __str__(self) -> str:
        return unparse(self)


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
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int


@dataclass(frozen=True)
class Call(Expr):
    func: str
    args: tuple[Expr, ...]


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    kind: str  # "num", "name", "op", "end"
    text: str
    offset: int


def _tokenize(src: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {src[pos]!r}", len(src[:pos].encode()))
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), len(src[:pos].encode())))
        pos = m.end()
    toks.append(_Tok("end", "", len(src.encode())))
    return toks


_ATOM_START = frozenset({"NUMBER", "NAME", "(", "-"})


class _Parser:
    def __init__(self, src: str, dim: int | None, extra: tuple[str, ...]):
        self.toks = _tokenize(src)
        self.i = 0
        self.dim = dim
        self.extra = extra

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _fail(self, expected) -> ExprSyntaxError:
        t = self.tok
        what = "end of input" if t.kind == "end" else f"token {t.text!r}"
        return ExprSyntaxError(f"unexpected {what}", t.offset, frozenset(expected))

    def _accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            raise self._fail({text})

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise self._fail({"+", "-", "*", "/", "^", "end of input"})
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self._accept("-"):
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        while self._accept("^"):
            sign = -1 if self._accept("-") else 1
            t = self.tok
            if t.kind != "num" or not t.text.isdigit():
                raise ExprSyntaxError("exponent must be an integer literal", t.offset,
                                      frozenset({"INTEGER"}))
            self.i += 1
            base = Pow(base, sign * int(t.text))
        return base

    def atom(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(float(t.text))
        if t.kind == "name":
            self.i += 1
            if t.text in FUNCTIONS:
                return self.call(t)
            self._check_var(t)
            return Var(t.text)
        if self._accept("("):
            e = self.expr()
            self._expect(")")
            return e
        raise self._fail(_ATOM_START)

    def call(self, name: _Tok) -> Expr:
        self._expect("(")
        args = [self.expr()]
        while self._accept(","):
            args.append(self.expr())
        self._expect(")")
        arity = FUNCTIONS[name.text]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            raise ExprSyntaxError(f"wrong number of arguments to {name.text}", name.offset)
        return Call(name.text, tuple(args))

    def _check_var(self, t: _Tok) -> None:
        if t.text == "u" or t.text in self.extra:
            return
        m = _VAR_RE.match(t.text)
        if m and (self.dim is None or int(m.group(1)) <= self.dim):
            return
        raise UnknownIdentifier(t.text, t.offset)


def parse(src: str, dim: int | None = None, extra: tuple[str, ...] = ()) -> Expr:
    """Parse `src` into an expression tree.

    `dim` bounds the admissible ``x<k>`` indices (None accepts any); `extra`
    lists additional variable names such as ``"t"``.
    """
    if not src or not src.strip():
        raise ExprSyntaxError("empty expression", 0, _ATOM_START)
    return _Parser(src, dim, tuple(extra)).parse()


# ---------------------------------------------------------------------------
# unparse

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(e: Expr) -> int:
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Pow):
        return 4
    return 5


def unparse(e: Expr) -> str:
    """Render `e` so that ``parse(unparse(e)) == e``."""
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        inner = unparse(e.arg)
        return f"-({inner})" if _prec(e.arg) < 3 else f"-{inner}"
    if isinstance(e, Pow):
        base = unparse(e.base)
        if _prec(e.base) < 4:
            base = f"({base})"
        return f"{base}^{e.exponent}"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        left, right = unparse(e.left), unparse(e.right)
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
        return f"{left} {e.op} {right}"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(unparse(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


def variables(e: Expr) -> set[str]:
    """Names of all variables occurring in `e`."""
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return variables(e.arg)
    if isinstance(e, Pow):
        return variables(e.base)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        out: set[str] = set()
        for a in e.args:
            out |= variables(a)
        return out
    return set()


def max_x_index(e: Expr) -> int:
    idx = [int(m.group(1)) for m in map(_VAR_RE.match, variables(e)) if m]
    return max(idx, default=0)


# ---------------------------------------------------------------------------
# evaluation with one tangent direction


def _env(x, u, t) -> dict:
    env = {"u": u}
    if x is not None:
        for k, xk in enumerate(x, start=1):
            env[f"x{k}"] = xk
    if t is not None:
        env["t"] = t
    return env


def _any(mask) -> bool:
    return bool(np.any(mask))


def _select(cond, a, b):
    if np.ndim(cond) == 0:
        return a if cond else b
    return np.where(cond, a, b)


def _dual(e: Expr, env: dict, wrt: str | None, kinks: list) -> tuple:
    """Return (value, derivative) of `e` along the unit direction `wrt`."""
    if isinstance(e, Num):
        return e.value, 0.0
    if isinstance(e, Var):
        try:
            val = env[e.name]
        except KeyError:
            raise EvalDomainError("unbound variable", e) from None
        return val, (1.0 if e.name == wrt else 0.0)
    if isinstance(e, Neg):
        v, d = _dual(e.arg, env, wrt, kinks)
        return -v, -d
    if isinstance(e, BinOp):
        a, da = _dual(e.left, env, wrt, kinks)
        b, db = _dual(e.right, env, wrt, kinks)
        if e.op == "+":
            return a + b, da + db
        if e.op == "-":
            return a - b, da - db
        if e.op == "*":
            return a * b, da * b + a * db
        if _any(np.equal(b, 0)):
            raise EvalDomainError("division by zero", e)
        q = a / b
        return q, (da - q * db) / b
    if isinstance(e, Pow):
        v, d = _dual(e.base, env, wrt, kinks)
        n = e.exponent
        if n == 0:
            return np.ones_like(v) if np.ndim(v) else 1.0, 0.0
        if n < 0 and _any(np.equal(v, 0)):
            raise EvalDomainError("negative power of zero", e)
        vn1 = v ** (n - 1) if n > 0 else 1.0 / v ** (1 - n)
        return vn1 * v, n * vn1 * d
    if isinstance(e, Call):
        return _call(e, env, wrt, kinks)
    raise TypeError(f"not an expression: {e!r}")


def _call(e: Call, env: dict, wrt, kinks: list) -> tuple:
    f = e.func
    if f in ("min", "max"):
        v, d = _dual(e.args[0], env, wrt, kinks)
        for arg in e.args[1:]:
            w, dw = _dual(arg, env, wrt, kinks)
            tie = np.equal(v, w)
            if _any(tie):
                kinks.append(e)
            if f == "min":
                pick_v = np.less(v, w)
                d_tie = np.minimum(d, dw)
                v = np.minimum(v, w)
            else:
                pick_v = np.greater(v, w)
                d_tie = np.maximum(d, dw)
                v = np.maximum(v, w)
            d = _select(tie, d_tie, _select(pick_v, d, dw))
        return v, d

    g, dg = _dual(e.args[0], env, wrt, kinks)
    if f == "sin":
        return np.sin(g), np.cos(g) * dg
    if f == "cos":
        return np.cos(g), -np.sin(g) * dg
    if f == "exp":
        v = np.exp(g)
        return v, v * dg
    if f == "log":
        if _any(np.less_equal(g, 0)):
            raise EvalDomainError("log of non-positive value", e)
        return np.log(g), dg / g
    if f == "tanh":
        v = np.tanh(g)
        return v, (1.0 - v * v) * dg
    if f == "atan":
        return np.arctan(g), dg / (1.0 + g * g)
    if f == "sqrt":
        if _any(np.less(g, 0)):
            raise EvalDomainError("sqrt of negative value", e)
        v = np.sqrt(g)
        zero = np.equal(g, 0)
        if _any(zero):
            if _any(np.logical_and(zero, np.not_equal(dg, 0))):
                raise EvalDomainError("derivative of sqrt at zero", e)
            with np.errstate(divide="ignore", invalid="ignore"):
                return v, _select(zero, 0.0, 0.5 * dg / v)
        return v, 0.5 * dg / v
    if f == "abs":
        zero = np.equal(g, 0)
        if _any(zero):
            kinks.append(e)
        # right-hand derivative at the kink
        return np.abs(g), _select(zero, np.abs(dg), np.sign(g) * dg)
    raise EvalDomainError(f"unknown function {f}", e)


def evaluate(e: Expr, x=None, u=0.0, t=None):
    """Value of `e` at (x, u[, t]); `x` is a sequence of coordinates."""
    return _dual(e, _env(x, u, t), None, [])[0]


def eval_with_partial(e: Expr, x, u, wrt: str, *, t=None, return_kink: bool = False):
    """Value and exact partial derivative of `e` with respect to variable `wrt`.

    At a kink of ``abs``/``min``/``max`` the partial is the right-hand
    derivative; pass ``return_kink=True`` to also get a flag telling whether
    such a point was hit.
    """
    kinks: list = []
    v, d = _dual(e, _env(x, u, t), wrt, kinks)
    if np.ndim(v) and np.ndim(d) == 0:
        d = np.full(np.shape(v), float(d))
    if return_kink:
        return v, d, bool(kinks)
    return v, d
