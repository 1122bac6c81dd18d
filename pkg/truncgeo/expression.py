"""Arithmetic expressions for priors and user models in config files.

Grammar: numbers, variable names, + - * /, ** or ^ for powers, unary minus,
parentheses, and the functions log, exp, sqrt and pow. Text is parsed with
the ``ast`` module and compiled into a numpy closure; anything outside the
grammar is a ConfigError.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from truncgeo.exceptions import ConfigError

_BINARY = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: np.power,
    ast.BitXor: np.power,
}
_UNARY = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_FUNCTIONS = {"log": (np.log, 1), "exp": (np.exp, 1), "sqrt": (np.sqrt, 1), "pow": (np.power, 2)}
_CONSTANTS = {"pi": math.pi, "e": math.e}

Env = Mapping[str, object]


@dataclass(frozen=True)
class CompiledExpression:
    text: str
    names: frozenset
    fn: Callable[[Env], object]

    def __call__(self, env: Env) -> np.ndarray:
        return np.asarray(self.fn(env), dtype=float)


def _compile(node: ast.AST, allowed: frozenset, used: set) -> Callable[[Env], object]:
    if isinstance(node, ast.Expression):
        return _compile(node.body, allowed, used)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        value = float(node.value)
        return lambda env: value
    if isinstance(node, ast.Name):
        if node.id in allowed:
            used.add(node.id)
            name = node.id
            return lambda env: env[name]
        if node.id in _CONSTANTS:
            value = _CONSTANTS[node.id]
            return lambda env: value
        raise ConfigError(f"unknown name {node.id!r}; allowed: {sorted(allowed)}")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
        op = _BINARY[type(node.op)]
        left = _compile(node.left, allowed, used)
        right = _compile(node.right, allowed, used)
        return lambda env: op(np.asarray(left(env), dtype=float), right(env))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        op = _UNARY[type(node.op)]
        operand = _compile(node.operand, allowed, used)
        return lambda env: op(operand(env))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
        if node.func.id not in _FUNCTIONS or node.keywords:
            raise ConfigError(f"unsupported function {ast.unparse(node.func)!r}")
        func, arity = _FUNCTIONS[node.func.id]
        if len(node.args) != arity:
            raise ConfigError(f"{node.func.id} takes {arity} argument(s)")
        args = [_compile(a, allowed, used) for a in node.args]
        return lambda env: func(*(np.asarray(a(env), dtype=float) for a in args))
    raise ConfigError(f"unsupported syntax in expression: {ast.unparse(node)!r}")


def compile_expression(text: str, names: Iterable[str]) -> CompiledExpression:
    """Compile ``text`` over the variable ``names``."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError("expression must be a non-empty string")
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {text!r}: {exc.msg}") from exc
    allowed = frozenset(names)
    used: set = set()
    fn = _compile(tree, allowed, used)
    return CompiledExpression(text, frozenset(used), fn)


def theta_names(d: int, param_names: Iterable[str] = ()) -> dict[str, int]:
    """Names accepted for regular-parameter components, mapped to their index.

    theta_1 and theta1 always work; plain ``theta`` when d = 1; the model's
    own parameter names (alpha, beta, mu, sigma, ...) as well.
    """
    names = {}
    for i in range(d):
        names[f"theta_{i + 1}"] = i
        names[f"theta{i + 1}"] = i
    if d == 1:
        names["theta"] = 0
    for i, name in enumerate(param_names):
        names.setdefault(name, i)
    return names
