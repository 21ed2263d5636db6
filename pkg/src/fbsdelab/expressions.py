"""Tiny arithmetic expression grammar for coefficient definitions.

Grammar (infix, left-associative except '^' which binds right and tighter
than unary minus):

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Allowed names: the variables t, x, y, z (and w as an alias of x for Markov
maps) plus the functions exp, log, sin, cos, tanh, abs and the constants pi
and e.  Compiled expressions evaluate vectorized over numpy arrays.
"""

from __future__ import annotations

import math
import re
from typing import Callable

import numpy as np

from .errors import ParseError

__all__ = ["compile_expression", "ALLOWED_FUNCTIONS", "ALLOWED_VARIABLES"]

ALLOWED_FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
}
ALLOWED_VARIABLES = ("t", "x", "y", "z", "w")
_CONSTANTS = {"pi": math.pi, "e": math.e}

_TOKEN = re.compile(r"\s*(?:(\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?|([A-Za-z_]\w*)|(\*\*|[-+*/^()]))")


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.tokens = []
        while self.pos < len(text):
            m = _TOKEN.match(text, self.pos)
            if not m or m.end() == self.pos:
                rest = text[self.pos:].lstrip()
                if not rest:
                    break
                raise ParseError(f"unexpected character {rest[0]!r} in expression",
                                 column=self.pos + 1)
            if m.group(1) is not None:
                self.tokens.append(("num", float(text[m.start(1):m.end()])))
            elif m.group(2) is not None:
                self.tokens.append(("name", m.group(2)))
            else:
                op = m.group(3)
                self.tokens.append(("op", "^" if op == "**" else op))
            self.pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok


def _parse_expr(tz):
    node = _parse_term(tz)
    while tz.peek() == ("op", "+") or tz.peek() == ("op", "-"):
        _, op = tz.next()
        rhs = _parse_term(tz)
        node = ("+", node, rhs) if op == "+" else ("-", node, rhs)
    return node


def _parse_term(tz):
    node = _parse_unary(tz)
    while tz.peek() == ("op", "*") or tz.peek() == ("op", "/"):
        _, op = tz.next()
        rhs = _parse_unary(tz)
        node = (op, node, rhs)
    return node


def _parse_unary(tz):
    # exponentiation binds tighter than the unary minus: -x^2 == -(x^2)
    if tz.peek() == ("op", "-"):
        tz.next()
        return ("neg", _parse_unary(tz))
    return _parse_power(tz)


def _parse_power(tz):
    node = _parse_atom(tz)
    if tz.peek() == ("op", "^"):
        tz.next()
        node = ("^", node, _parse_unary(tz))  # right-associative
    return node


def _parse_atom(tz):
    kind, val = tz.next()
    if kind == "num":
        return ("num", val)
    if kind == "name":
        if tz.peek() == ("op", "("):
            tz.next()
            if val not in ALLOWED_FUNCTIONS:
                raise ParseError(f"unknown function {val!r} in expression")
            arg = _parse_expr(tz)
            if tz.next() != ("op", ")"):
                raise ParseError("missing ')' in expression")
            return ("call", val, arg)
        if val in _CONSTANTS:
            return ("num", _CONSTANTS[val])
        if val not in ALLOWED_VARIABLES:
            raise ParseError(f"undefined symbol {val!r} in expression")
        return ("var", "x" if val == "w" else val)
    if kind == "op" and val == "(":
        node = _parse_expr(tz)
        if tz.next() != ("op", ")"):
            raise ParseError("missing ')' in expression")
        return node
    raise ParseError(f"unexpected token {val!r} in expression")


def _eval(node, env):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        return env[node[1]]
    if op == "neg":
        return -_eval(node[1], env)
    if op == "call":
        return ALLOWED_FUNCTIONS[node[1]](_eval(node[2], env))
    a = _eval(node[1], env)
    b = _eval(node[2], env)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "^":
        return a ** b
    raise ParseError(f"bad node {op!r}")


def compile_expression(text: str, variables=("t", "x", "y", "z")) -> Callable:
    """Compile an expression string into a vectorized callable.

    The callable takes positional arguments in the order of ``variables``;
    unknown symbols raise a parse error naming the symbol at compile time.
    """
    tz = _Tokenizer(text)
    if not tz.tokens:
        raise ParseError("empty expression")
    tree = _parse_expr(tz)
    if tz.peek() != (None, None):
        raise ParseError(f"trailing tokens in expression starting with {tz.peek()[1]!r}")
    varmap = ["x" if v == "w" else v for v in variables]

    def fn(*args):
        if len(args) != len(varmap):
            raise TypeError(f"expected {len(varmap)} arguments, got {len(args)}")
        env = {k: np.asarray(a, dtype=float) for k, a in zip(varmap, args)}
        out = _eval(tree, env)
        shape = np.broadcast(*[env[k] for k in varmap]).shape if varmap else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if shape else out

    fn.expression = text
    return fn
