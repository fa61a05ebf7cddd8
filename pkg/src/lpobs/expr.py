"""Arithmetic expression language for plant definitions in config files.

Plants are declared in JSON as expression strings over the state variables
``x0[i]``, ``xi[k][j]``, the outputs ``y[k]``, the inputs ``u[j]`` and time
``t`` (all indices 1-based, matching the usual control-theory subscripts).
Supported operators are ``+ - * / ^`` with ``^`` binding tightest and
associating to the right, then unary minus, then ``* /``, then ``+ -``.
Available functions: sin, cos, tan, tanh, exp, log, abs, sqrt.

Parsed trees are immutable and reentrant; evaluation is plain IEEE double
arithmetic with explicit errors on domain violations (log of a nonpositive
value, division by zero) and on non-finite results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

__all__ = [
    "Expr", "Num", "Var", "Unary", "Binary", "Call",
    "ExprError", "ExprSyntaxError", "ExprBindError", "ExprEvalError",
    "EvalEnv", "parse", "bind_check", "evaluate", "to_string",
]

FUNCTIONS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "tanh": math.tanh,
    "exp": math.exp, "log": math.log, "abs": abs, "sqrt": math.sqrt,
}

# variable kinds and how many indices each takes
_VAR_ARITY = {"x0": 1, "xi": 2, "y": 1, "u": 1, "t": 0}


class ExprError(ValueError):
    """Base class for expression errors; carries a byte offset when known."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class ExprSyntaxError(ExprError):
    pass


class ExprBindError(ExprError):
    pass


class ExprEvalError(ExprError):
    pass


@dataclass(frozen=True)
class Expr:
    pass


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    kind: str                 # "x0" | "xi" | "y" | "u" | "t"
    i: int = 0                # first index (1-based), 0 for t
    j: int = 0                # second index for xi


@dataclass(frozen=True)
class Unary(Expr):
    op: str                   # "-"
    operand: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str                   # "+" "-" "*" "/" "^"
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr


# ---------------------------------------------------------------------------
# tokenizer

_OPS = "+-*/^()[],"


def _tokenize(text: str):
    """Yield (kind, value, offset) tokens; kind in {num, name, op}."""
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c in _OPS:
            yield ("op", c, i)
            i += 1
            continue
        if c.isdigit() or c == ".":
            start = i
            while i < n and (text[i].isdigit() or text[i] == "."):
                i += 1
            if i < n and text[i] in "eE":
                k = i + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    i = k
                    while i < n and text[i].isdigit():
                        i += 1
            try:
                value = float(text[start:i])
            except ValueError:
                raise ExprSyntaxError(f"bad numeric literal {text[start:i]!r}", start)
            yield ("num", value, start)
            continue
        if c.isalpha() or c == "_":
            start = i
            while i < n and (text[i].isalnum() or text[i] == "_"):
                i += 1
            yield ("name", text[start:i], start)
            continue
        raise ExprSyntaxError(f"unexpected character {c!r}", i)
    yield ("end", "", n)


class _Parser:
    """Recursive-descent parser over the token stream."""

    def __init__(self, text: str):
        self.text = text
        self.tokens = list(_tokenize(text))
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, value: str):
        kind, v, off = self.next()
        if kind != "op" or v != value:
            raise ExprSyntaxError(f"expected {value!r}, found {v!r}", off)
        return off

    def parse(self) -> Expr:
        node = self.add()
        kind, v, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"trailing input {v!r}", off)
        return node

    def add(self) -> Expr:
        node = self.mul()
        while True:
            kind, v, _ = self.peek()
            if kind == "op" and v in "+-":
                self.next()
                node = Binary(v, node, self.mul())
            else:
                return node

    def mul(self) -> Expr:
        node = self.unary()
        while True:
            kind, v, _ = self.peek()
            if kind == "op" and v in "*/":
                self.next()
                node = Binary(v, node, self.unary())
            else:
                return node

    def unary(self) -> Expr:
        kind, v, _ = self.peek()
        if kind == "op" and v == "-":
            self.next()
            return Unary("-", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, v, _ = self.peek()
        if kind == "op" and v == "^":
            self.next()
            # right-associative; exponent may carry its own unary minus
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, v, off = self.next()
        if kind == "num":
            return Num(v)
        if kind == "op" and v == "(":
            node = self.add()
            self.expect(")")
            return node
        if kind == "name":
            if v in FUNCTIONS:
                self.expect("(")
                arg = self.add()
                self.expect(")")
                return Call(v, arg)
            if v in _VAR_ARITY:
                return self.variable(v, off)
            raise ExprSyntaxError(f"unknown function or variable {v!r}", off)
        raise ExprSyntaxError(f"unexpected token {v!r}", off)

    def variable(self, name: str, off: int) -> Expr:
        arity = _VAR_ARITY[name]
        if arity == 0:
            return Var("t")
        idx = []
        for _ in range(arity):
            self.expect("[")
            kind, v, ioff = self.next()
            if kind != "num" or v != int(v) or v < 1:
                raise ExprSyntaxError(f"index must be a positive integer, found {v!r}", ioff)
            idx.append(int(v))
            self.expect("]")
        if arity == 1:
            return Var(name, idx[0])
        return Var(name, idx[0], idx[1])


def parse(text: str) -> Expr:
    """Parse an expression string into an immutable syntax tree."""
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# binding validation against a plant's structure indices

def bind_check(e: Expr, n0: int, r: Sequence[int], allowed: Iterable[str]) -> None:
    """Check every variable reference is in-bounds and permitted.

    ``allowed`` lists the variable kinds legal in this context (e.g. a
    multiplier expression may only read ``y``).  Raises ExprBindError.
    """
    m = len(r)
    allowed = set(allowed)

    def walk(node: Expr):
        if isinstance(node, Var):
            if node.kind not in allowed:
                raise ExprBindError(
                    f"variable {node.kind!r} is not allowed here (allowed: {sorted(allowed)})")
            if node.kind == "x0" and not (1 <= node.i <= n0):
                raise ExprBindError(f"x0[{node.i}] out of range 1..{n0}")
            if node.kind in ("y", "u") and not (1 <= node.i <= m):
                raise ExprBindError(f"{node.kind}[{node.i}] out of range 1..{m}")
            if node.kind == "xi":
                if not (1 <= node.i <= m):
                    raise ExprBindError(f"xi[{node.i}][..] channel out of range 1..{m}")
                if not (1 <= node.j <= r[node.i - 1]):
                    raise ExprBindError(
                        f"xi[{node.i}][{node.j}] out of range 1..{r[node.i - 1]}")
        elif isinstance(node, Unary):
            walk(node.operand)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, Call):
            walk(node.arg)

    walk(e)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalEnv:
    """Bound values for one evaluation; any field may be left None."""
    x0: Optional[Sequence[float]] = None
    xi: Optional[Sequence[Sequence[float]]] = None   # ragged, per channel
    y: Optional[Sequence[float]] = None
    u: Optional[Sequence[float]] = None
    t: Optional[float] = None


def evaluate(e: Expr, env: EvalEnv) -> float:
    """Evaluate the tree in IEEE double precision.

    Raises ExprEvalError on unbound variables, domain violations and
    non-finite results (NaN/Inf never propagate silently).
    """
    val = _eval(e, env)
    if not math.isfinite(val):
        raise ExprEvalError(f"non-finite result {val!r}")
    return val


def _eval(e: Expr, env: EvalEnv) -> float:
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return _lookup(e, env)
    if isinstance(e, Unary):
        return -_eval(e.operand, env)
    if isinstance(e, Binary):
        a = _eval(e.left, env)
        b = _eval(e.right, env)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0.0:
                raise ExprEvalError("division by zero")
            return a / b
        if e.op == "^":
            try:
                return math.pow(a, b)
            except (ValueError, OverflowError) as exc:
                raise ExprEvalError(f"invalid power {a}^{b}: {exc}") from None
        raise ExprEvalError(f"unknown operator {e.op!r}")
    if isinstance(e, Call):
        a = _eval(e.arg, env)
        if e.func == "log" and a <= 0.0:
            raise ExprEvalError(f"log of nonpositive value {a}")
        if e.func == "sqrt" and a < 0.0:
            raise ExprEvalError(f"sqrt of negative value {a}")
        try:
            return float(FUNCTIONS[e.func](a))
        except (ValueError, OverflowError) as exc:
            raise ExprEvalError(f"{e.func}({a}) failed: {exc}") from None
    raise ExprEvalError(f"unknown node {e!r}")


def _lookup(v: Var, env: EvalEnv) -> float:
    if v.kind == "t":
        if env.t is None:
            raise ExprEvalError("variable t is unbound")
        return float(env.t)
    table = getattr(env, v.kind)
    if table is None:
        raise ExprEvalError(f"variable {v.kind!r} is unbound")
    try:
        if v.kind == "xi":
            return float(table[v.i - 1][v.j - 1])
        return float(table[v.i - 1])
    except (IndexError, TypeError):
        raise ExprEvalError(f"index out of range for {v.kind}[{v.i}]") from None


# ---------------------------------------------------------------------------
# pretty printing (parse(to_string(parse(s))) is structurally identical)

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "unary": 3, "^": 4, "atom": 5}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary):
        return _PREC["unary"]
    return _PREC["atom"]


def to_string(e: Expr) -> str:
    """Render the tree back to a parseable string."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        if e.kind == "t":
            return "t"
        if e.kind == "xi":
            return f"xi[{e.i}][{e.j}]"
        return f"{e.kind}[{e.i}]"
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, Unary):
        inner = to_string(e.operand)
        if _prec(e.operand) < _PREC["unary"]:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Binary):
        p = _PREC[e.op]
        left = to_string(e.left)
        right = to_string(e.right)
        if e.op == "^":
            # right-associative: parenthesize a left operand of equal or
            # lower precedence, keep chains like a^b^c bare on the right
            if _prec(e.left) <= p:
                left = f"({left})"
            if _prec(e.right) < _PREC["unary"]:
                right = f"({right})"
        else:
            if _prec(e.left) < p:
                left = f"({left})"
            if _prec(e.right) <= p:
                right = f"({right})"
        return f"{left}{e.op}{right}"
    raise TypeError(f"not an expression node: {e!r}")
