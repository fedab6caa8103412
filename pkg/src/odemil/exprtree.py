"""Operator trees for ODE right-hand sides.

A system ``dx_i/dt = f_i(x)`` is an :class:`OdeSystem` holding one
:class:`Expression` per dimension.  Trees serialize to prefix (Polish)
notation; constants appear in the token list as plain Python floats so the
round trip is lossless.  Quantization of constants happens in
:mod:`odemil.tokenizer`, not here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np

BINARY_OPS = ("add", "mul")
UNARY_OPS = ("sin", "square", "inv", "id")
SEP = "SEP"
MAX_DIM = 4
VARIABLES = tuple(f"x{i}" for i in range(MAX_DIM))

Token = Union[str, float]


class ParseError(ValueError):
    """Raised for malformed prefix sequences."""


@dataclass(frozen=True)
class Expression:
    op: str
    children: tuple["Expression", ...] = ()
    value: float | None = None
    index: int | None = None

    def __post_init__(self):
        if self.op in BINARY_OPS:
            arity = 2
        elif self.op in UNARY_OPS:
            arity = 1
        elif self.op == "const":
            arity = 0
            if self.value is None or not math.isfinite(self.value):
                raise ValueError(f"constant must be a finite real, got {self.value!r}")
        elif self.op == "var":
            arity = 0
            if self.index is None or not 0 <= self.index < MAX_DIM:
                raise ValueError(f"bad variable index {self.index!r}")
        else:
            raise ValueError(f"unknown operator {self.op!r}")
        if len(self.children) != arity:
            raise ValueError(f"{self.op} expects {arity} children, got {len(self.children)}")

    def nodes(self) -> Iterator["Expression"]:
        yield self
        for c in self.children:
            yield from c.nodes()

    def depth(self) -> int:
        """Edges on the longest root-to-leaf path (a leaf has depth 0)."""
        if not self.children:
            return 0
        return 1 + max(c.depth() for c in self.children)

    def max_var_index(self) -> int:
        return max((n.index for n in self.nodes() if n.op == "var"), default=-1)

    def count(self, ops: Sequence[str]) -> int:
        return sum(1 for n in self.nodes() if n.op in ops)

    def map_constants(self, fn: Callable[[float], float]) -> "Expression":
        if self.op == "const":
            return const(fn(self.value))
        if not self.children:
            return self
        return Expression(self.op, tuple(c.map_constants(fn) for c in self.children))

    def __str__(self) -> str:
        return to_infix(self)


def const(v: float) -> Expression:
    return Expression("const", value=float(v))


def var(i: int) -> Expression:
    return Expression("var", index=int(i))


def add(a: Expression, b: Expression) -> Expression:
    return Expression("add", (a, b))


def mul(a: Expression, b: Expression) -> Expression:
    return Expression("mul", (a, b))


def unary(op: str, a: Expression) -> Expression:
    return Expression(op, (a,))


@dataclass(frozen=True)
class OdeSystem:
    expressions: tuple[Expression, ...]

    def __post_init__(self):
        object.__setattr__(self, "expressions", tuple(self.expressions))
        d = len(self.expressions)
        if not 1 <= d <= MAX_DIM:
            raise ValueError(f"system dimension must be in [1, {MAX_DIM}], got {d}")
        for e in self.expressions:
            if e.max_var_index() >= d:
                raise ValueError(f"expression {e} references a variable >= dimension {d}")

    @property
    def dim(self) -> int:
        return len(self.expressions)

    def map_constants(self, fn: Callable[[float], float]) -> "OdeSystem":
        return OdeSystem(tuple(e.map_constants(fn) for e in self.expressions))

    def __str__(self) -> str:
        return "\n".join(f"dx{i}/dt = {to_infix(e)}" for i, e in enumerate(self.expressions))


# --- evaluation -----------------------------------------------------------

def _inv(a):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.divide(1.0, a)


_UNARY_FN = {
    "sin": np.sin,
    "square": np.square,
    "inv": _inv,
    "id": lambda a: a,
}


def eval_expr(expr: Expression, x) -> float:
    """Value of ``expr`` at state ``x``.

    Singular points (``inv(0)``, overflow) give ``inf``/``nan`` instead of raising.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a vector")
    if expr.max_var_index() >= x.shape[0]:
        raise ValueError(
            f"expression uses x{expr.max_var_index()} but x has length {x.shape[0]}"
        )
    return float(_eval(expr, x))


def _eval(e: Expression, x):
    op = e.op
    if op == "var":
        return x[e.index]
    if op == "const":
        return e.value
    with np.errstate(over="ignore", invalid="ignore"):
        if op == "add":
            return _eval(e.children[0], x) + _eval(e.children[1], x)
        if op == "mul":
            return _eval(e.children[0], x) * _eval(e.children[1], x)
        return _UNARY_FN[op](_eval(e.children[0], x))


def compile_expr(expr: Expression) -> Callable:
    """Closure-compiled evaluator; works on scalars or arrays indexed along axis 0."""
    op = expr.op
    if op == "var":
        i = expr.index
        return lambda x: x[i]
    if op == "const":
        v = expr.value
        return lambda x: v
    fs = [compile_expr(c) for c in expr.children]
    if op == "add":
        a, b = fs
        return lambda x: a(x) + b(x)
    if op == "mul":
        a, b = fs
        return lambda x: a(x) * b(x)
    g = _UNARY_FN[op]
    (a,) = fs
    return lambda x: g(a(x))


def compile_system(system: OdeSystem) -> Callable[[np.ndarray], np.ndarray]:
    """Vector field ``x -> f(x)`` as one callable.  Non-finite values pass through."""
    fs = [compile_expr(e) for e in system.expressions]

    def rhs(x):
        with np.errstate(all="ignore"):
            return np.array([f(x) for f in fs], dtype=float)

    return rhs


# --- prefix serialization -------------------------------------------------

def expr_to_prefix(expr: Expression) -> list[Token]:
    out: list[Token] = []
    for n in expr.nodes():
        if n.op == "const":
            out.append(float(n.value))
        elif n.op == "var":
            out.append(VARIABLES[n.index])
        else:
            out.append(n.op)
    return out


def to_prefix(system: OdeSystem) -> list[Token]:
    """Prefix tokens for all dimensions, joined by ``SEP``."""
    out: list[Token] = []
    for i, e in enumerate(system.expressions):
        if i:
            out.append(SEP)
        out.extend(expr_to_prefix(e))
    return out


def _parse_one(tokens: Sequence[Token], pos: int, dim: int) -> tuple[Expression, int]:
    if pos >= len(tokens):
        raise ParseError("arity underflow: sequence ended while operands were expected")
    tok = tokens[pos]
    if isinstance(tok, (float, int)) and not isinstance(tok, bool):
        if not math.isfinite(tok):
            raise ParseError(f"non-finite constant {tok!r}")
        return const(tok), pos + 1
    if tok in BINARY_OPS:
        a, pos = _parse_one(tokens, pos + 1, dim)
        b, pos = _parse_one(tokens, pos, dim)
        return Expression(tok, (a, b)), pos
    if tok in UNARY_OPS:
        a, pos = _parse_one(tokens, pos + 1, dim)
        return Expression(tok, (a,)), pos
    if tok in VARIABLES:
        i = VARIABLES.index(tok)
        if i >= dim:
            raise ParseError(f"variable {tok} out of range for dimension {dim}")
        return var(i), pos + 1
    if tok == SEP:
        raise ParseError("arity underflow: separator where an operand was expected")
    raise ParseError(f"unknown token {tok!r}")


def parse_expr(tokens: Sequence[Token], dim: int) -> Expression:
    expr, pos = _parse_one(tokens, 0, dim)
    if pos != len(tokens):
        raise ParseError(f"arity overflow: {len(tokens) - pos} trailing tokens")
    return expr


def split_segments(tokens: Sequence[Token]) -> list[list[Token]]:
    segs: list[list[Token]] = [[]]
    for t in tokens:
        if t == SEP and isinstance(t, str):
            segs.append([])
        else:
            segs[-1].append(t)
    return segs


def parse_prefix(tokens: Sequence[Token], dim: int) -> OdeSystem:
    """Inverse of :func:`to_prefix`; rejects anything malformed."""
    segs = split_segments(tokens)
    if len(segs) != dim:
        raise ParseError(f"expected {dim} SEP-delimited segments, got {len(segs)}")
    return OdeSystem(tuple(parse_expr(s, dim) for s in segs))


def prefix_to_str(tokens: Sequence[Token]) -> str:
    return " ".join(repr(t) if isinstance(t, float) else str(t) for t in tokens)


def str_to_prefix(text: str) -> list[Token]:
    out: list[Token] = []
    for t in text.split():
        if t in BINARY_OPS or t in UNARY_OPS or t in VARIABLES or t == SEP:
            out.append(t)
        else:
            try:
                out.append(float(t))
            except ValueError:
                raise ParseError(f"unknown token {t!r}") from None
    return out


# --- infix rendering (reports only) --------------------------------------

def _fmt_const(v: float) -> str:
    return f"{v:.6g}"


def to_infix(e: Expression) -> str:
    op = e.op
    if op == "var":
        return VARIABLES[e.index]
    if op == "const":
        s = _fmt_const(e.value)
        return f"({s})" if e.value < 0 else s
    if op == "add":
        return f"{to_infix(e.children[0])} + {to_infix(e.children[1])}"
    if op == "mul":
        parts = []
        for c in e.children:
            s = to_infix(c)
            parts.append(f"({s})" if c.op == "add" else s)
        return "*".join(parts)
    (c,) = e.children
    inner = to_infix(c)
    if op == "square":
        return f"{inner}^2" if not c.children else f"({inner})^2"
    if op == "inv":
        return f"1/{inner}" if not c.children else f"1/({inner})"
    if op == "id":
        return inner if not c.children else f"({inner})"
    return f"{op}({inner})"


def render_system(system: OdeSystem) -> str:
    return "; ".join(f"dx{i}/dt = {to_infix(e)}" for i, e in enumerate(system.expressions))
