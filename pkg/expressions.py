"""
Small arithmetic language for user-supplied fields V(x, t), ξ(t) and gauge functions f(x, t).

Grammar (lowest to highest precedence):
    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := primary ("^" unary)?          # right-associative, binds tighter than unary minus
    primary := NUMBER | NAME | NAME "(" expr ("," expr)* ")" | "(" expr ")"

Offsets in errors are UTF-8 byte offsets into the source text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from errors import ArityError, ExpressionDomainError, ExpressionSyntaxError, UnknownIdentifierError

DEFAULT_VARIABLES = ("x", "t")

FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}

# ----- AST -----


@dataclass(frozen=True)
class Number:
    value: float
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Variable:
    name: str
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class UnaryMinus:
    operand: "Node"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class BinaryOp:
    op: str
    left: "Node"
    right: "Node"
    offset: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple["Node", ...]
    offset: int = field(default=0, compare=False)


Node = Union[Number, Variable, UnaryMinus, BinaryOp, Call]


# ----- lexer -----

_TOKEN = re.compile(
    rb"""
    (?P<space>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    offset: int


def _tokenize(data: bytes) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(data):
        match = _TOKEN.match(data, pos)
        if match is None:
            raise ExpressionSyntaxError(f"unexpected character {data[pos:pos + 1]!r}", offset=pos)
        kind = match.lastgroup
        if kind != "space":
            tokens.append(_Token(kind, match.group().decode("ascii"), pos))
        pos = match.end()
    tokens.append(_Token("end", "", len(data)))
    return tokens


# ----- parser -----


class _Parser:
    def __init__(self, data: bytes, variables: Sequence[str]) -> None:
        self.tokens = _tokenize(data)
        self.index = 0
        self.variables = tuple(variables)

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _accept(self, text: str) -> bool:
        if self.current.kind == "op" and self.current.text == text:
            self.index += 1
            return True
        return False

    def _expect(self, text: str) -> _Token:
        token = self.current
        if not self._accept(text):
            found = token.text or "end of input"
            raise ExpressionSyntaxError(f"expected '{text}' but found '{found}'", offset=token.offset)
        return token

    def parse(self) -> Node:
        node = self.expr()
        if self.current.kind != "end":
            raise ExpressionSyntaxError(f"unexpected '{self.current.text}'", offset=self.current.offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.kind == "op" and self.current.text in "+-":
            token = self.current
            self.index += 1
            node = BinaryOp(token.text, node, self.term(), token.offset)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.current.kind == "op" and self.current.text in "*/":
            token = self.current
            self.index += 1
            node = BinaryOp(token.text, node, self.unary(), token.offset)
        return node

    def unary(self) -> Node:
        token = self.current
        if self._accept("-"):
            return UnaryMinus(self.unary(), token.offset)
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        token = self.current
        if self._accept("^"):
            return BinaryOp("^", base, self.unary(), token.offset)
        return base

    def primary(self) -> Node:
        token = self.current
        if token.kind == "number":
            self.index += 1
            value = float(token.text)
            if not np.isfinite(value):
                raise ExpressionSyntaxError(f"number {token.text} is out of range", offset=token.offset)
            return Number(value, token.offset)
        if token.kind == "name":
            self.index += 1
            if self.current.kind == "op" and self.current.text == "(":
                return self.call(token)
            if token.text in FUNCTIONS:
                raise ArityError(f"function '{token.text}' needs an argument", offset=token.offset)
            if token.text not in self.variables:
                raise UnknownIdentifierError(f"unknown identifier '{token.text}'", offset=token.offset)
            return Variable(token.text, token.offset)
        if self._accept("("):
            node = self.expr()
            self._expect(")")
            return node
        found = token.text or "end of input"
        raise ExpressionSyntaxError(f"unexpected '{found}'", offset=token.offset)

    def call(self, name: _Token) -> Node:
        if name.text not in FUNCTIONS:
            raise UnknownIdentifierError(f"unknown function '{name.text}'", offset=name.offset)
        self._expect("(")
        if self.current.kind == "op" and self.current.text == ")":
            raise ArityError(f"function '{name.text}' takes 1 argument, got 0", offset=name.offset)
        args = [self.expr()]
        while self._accept(","):
            args.append(self.expr())
        self._expect(")")
        if len(args) != 1:
            raise ArityError(f"function '{name.text}' takes 1 argument, got {len(args)}", offset=name.offset)
        return Call(name.text, tuple(args), name.offset)


def parse_expression(text: str, variables: Sequence[str] = DEFAULT_VARIABLES) -> "Expression":
    return Expression(text, _Parser(text.encode("utf-8"), variables).parse(), tuple(variables))


# ----- printing -----


def to_text(node: Node) -> str:
    """Fully parenthesized form; parsing it gives back an equal tree."""
    if isinstance(node, Number):
        return repr(node.value)
    if isinstance(node, Variable):
        return node.name
    if isinstance(node, UnaryMinus):
        return f"(-{to_text(node.operand)})"
    if isinstance(node, BinaryOp):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


def free_variables(node: Node) -> set[str]:
    if isinstance(node, Variable):
        return {node.name}
    if isinstance(node, UnaryMinus):
        return free_variables(node.operand)
    if isinstance(node, BinaryOp):
        return free_variables(node.left) | free_variables(node.right)
    if isinstance(node, Call):
        return set().union(*(free_variables(a) for a in node.args))
    return set()


# ----- evaluation -----


def _checked(values: np.ndarray, detail: str, offset: int) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise ExpressionDomainError(detail, offset=offset)
    return values


def _evaluate(node: Node, scope: dict[str, np.ndarray]) -> np.ndarray:
    if isinstance(node, Number):
        return np.asarray(node.value)
    if isinstance(node, Variable):
        return scope[node.name]
    if isinstance(node, UnaryMinus):
        return -_evaluate(node.operand, scope)
    if isinstance(node, Call):
        arg = _evaluate(node.args[0], scope)
        if node.name == "log" and np.any(arg <= 0):
            raise ExpressionDomainError("log of a non-positive value", offset=node.offset)
        if node.name == "sqrt" and np.any(arg < 0):
            raise ExpressionDomainError("sqrt of a negative value", offset=node.offset)
        return _checked(FUNCTIONS[node.name](arg), f"{node.name} overflowed", node.offset)

    left = _evaluate(node.left, scope)
    right = _evaluate(node.right, scope)
    if node.op == "+":
        out = left + right
    elif node.op == "-":
        out = left - right
    elif node.op == "*":
        out = left * right
    elif node.op == "/":
        if np.any(right == 0):
            raise ExpressionDomainError("division by zero", offset=node.offset)
        out = left / right
    else:
        if np.any((left == 0) & (right < 0)):
            raise ExpressionDomainError("zero raised to a negative power", offset=node.offset)
        if np.any((left < 0) & (right != np.round(right))):
            raise ExpressionDomainError("negative base with a non-integer exponent", offset=node.offset)
        out = np.power(left.astype(float), right)
    return _checked(out, f"'{node.op}' produced a non-finite value", node.offset)


@dataclass(frozen=True)
class Expression:
    source: str
    root: Node
    variables: tuple[str, ...] = DEFAULT_VARIABLES

    def __str__(self) -> str:
        return to_text(self.root)

    def evaluate(self, x=0.0, t=0.0) -> np.ndarray:
        """Vectorized over x (and t); the result has the broadcast shape of the inputs."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        with np.errstate(all="ignore"):
            value = _evaluate(self.root, {"x": x, "t": t})
        return np.broadcast_to(value, np.broadcast(x, t).shape).astype(float)

    def as_field(self) -> Callable[[np.ndarray, float], np.ndarray]:
        return lambda x, t: self.evaluate(x, t)

    def as_time_function(self) -> Callable[[float], float]:
        return lambda t: float(self.evaluate(0.0, t))

    def depends_on(self, name: str) -> bool:
        return name in free_variables(self.root)

    @property
    def is_constant_zero(self) -> bool:
        return isinstance(self.root, Number) and self.root.value == 0.0


def eval_expression(expr: Union[Expression, str], x=0.0, t=0.0) -> np.ndarray:
    if isinstance(expr, str):
        expr = parse_expression(expr)
    return expr.evaluate(x, t)
