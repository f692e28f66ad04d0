"""Tiny safe evaluator for coefficient formulas in config files.

Supports arithmetic, the variables x, y, t, the constants pi and e, and a
fixed set of numpy functions. Anything else is rejected at compile time.
"""

import ast

import numpy as np

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp,
    "log": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "minimum": np.minimum, "maximum": np.maximum,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_VARS = ("x", "y", "t")

_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply,
           ast.Div: np.divide, ast.Pow: np.power, ast.Mod: np.mod}


def _check(node):
    if isinstance(node, ast.Expression):
        _check(node.body)
    elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check(node.left)
        _check(node.right)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _check(node.operand)
    elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        pass
    elif isinstance(node, ast.Name) and (node.id in _CONSTS or node.id in _VARS):
        pass
    elif (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
          and node.func.id in _FUNCS and not node.keywords):
        for arg in node.args:
            _check(arg)
    else:
        raise ValueError(f"disallowed expression element: {ast.dump(node)}")


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else +v
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](*[_eval(a, env) for a in node.args])
    raise AssertionError


def compile_expr(source):
    """Returns f(x[, y[, t]]) evaluating the formula, vectorized via numpy."""
    tree = ast.parse(source, mode="eval")
    _check(tree)

    def f(x, y=None, t=None):
        env = {"x": x}
        if y is not None:
            env["y"] = y
        if t is not None:
            env["t"] = t
        return _eval(tree, env)

    return f
