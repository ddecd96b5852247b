"""Restricted arithmetic expressions for coefficients in scenario documents.

Expressions use the variables ``x0, x1, ...`` (slow state), ``y0, y1, ...``
(fast state), any scenario parameter name, the constants ``pi`` and ``e`` and
the functions listed in ``FUNCTIONS``.  Only arithmetic, calls to those
functions and names are accepted; anything else is rejected before
compilation.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import ScenarioError

FUNCTIONS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "tanh": np.tanh, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs, "min": np.minimum, "max": np.maximum,
}
CONSTANTS = {"pi": np.pi, "e": np.e}

_ALLOWED = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
            ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd)


def compile_expression(text, names):
    """Compile ``text`` to a function of keyword arrays; ``names`` are the allowed variables."""
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ScenarioError(f"cannot parse expression {text!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ScenarioError(f"expression {text!r} uses unsupported syntax "
                                f"({type(node).__name__})")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ScenarioError(f"expression {text!r} has a non-numeric constant")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS or node.keywords:
                raise ScenarioError(f"expression {text!r} calls an unsupported function")
        if isinstance(node, ast.Name) and node.id not in FUNCTIONS \
                and node.id not in CONSTANTS and node.id not in names:
            raise ScenarioError(f"expression {text!r} uses unknown name {node.id!r}")
    code = compile(tree, "<scenario>", "eval")
    base = {"__builtins__": {}, **FUNCTIONS, **CONSTANTS}

    def evaluate(**env):
        return eval(code, base, env)  # noqa: S307 - AST restricted above

    return evaluate


def vector_field(exprs, params, n, m=None):
    """Batched map ``(x[, y]) -> (..., len(exprs))`` from component expressions."""
    names = {f"x{i}" for i in range(n)} | set(params)
    if m is not None:
        names |= {f"y{j}" for j in range(m)}
    comps = [compile_expression(e, names) for e in exprs]

    def env_for(x, y):
        env = dict(params)
        env.update({f"x{i}": x[..., i] for i in range(n)})
        if m is not None:
            env.update({f"y{j}": y[..., j] for j in range(m)})
        return env

    def field_xy(x, y=None):
        x = np.asarray(x, dtype=float)
        if m is not None:
            y = np.asarray(y, dtype=float)
            batch = np.broadcast_shapes(x.shape[:-1], y.shape[:-1])
        else:
            batch = x.shape[:-1]
        env = env_for(x, y)
        return np.stack([np.broadcast_to(np.asarray(c(**env), dtype=float), batch)
                         for c in comps], axis=-1)

    return field_xy


def matrix_field(rows, params, n, m=None):
    """Batched map ``(x[, y]) -> (..., rows, cols)`` from nested expression lists."""
    if not rows or len({len(r) for r in rows}) != 1:
        raise ScenarioError("matrix coefficients need equal-length nonempty rows")
    flat = vector_field([e for r in rows for e in r], params, n, m)
    shape = (len(rows), len(rows[0]))

    def field_xy(x, y=None):
        v = flat(x, y)
        return v.reshape(v.shape[:-1] + shape)

    return field_xy
