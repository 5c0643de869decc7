"""Built-in model problems and a loader for user-defined ones.

A custom problem is an INI file with a ``[problem]`` section, e.g.::

    [problem]
    mesh = reference_triangle      ; built-in name or path to a mesh file
    b = (1.0, 2.0)
    c = 3.0
    f = 2*x + 2*y + (1 - 2*x - y)*y + 2*(1 - x - 2*y)*x + 3*x*y*(1 - x - y)

Values are numpy expressions in ``x`` and ``y``; vector fields are tuples
and ``A`` is a nested 2x2 tuple.  Missing fields are zero (identity for
``A``).  Optional keys ``div_A`` and ``div_fvec`` feed the estimator.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

import numpy as np

from .fem import ProblemData
from .mesh import Triangulation, lshape, read_mesh, reference_triangle, unit_square, zshape

__all__ = ["Problem", "PROBLEMS", "get_problem", "load_custom_problem", "lshape_dcr", "zshape_convection"]

BUILTIN_MESHES = {
    "lshape": lshape,
    "zshape": zshape,
    "unit_square": unit_square,
    "reference_triangle": reference_triangle,
}


@dataclass(frozen=True)
class Problem:
    name: str
    mesh: Triangulation
    data: ProblemData
    description: str = ""


def _ones(x):
    return np.ones(len(x))


def _identity_field(x):
    return np.asarray(x, dtype=float)


def lshape_dcr() -> Problem:
    """-Lap u + x . grad u + u = 1 on the L-shaped domain, u = 0 on the boundary."""
    data = ProblemData(b=_identity_field, c=_ones, f=_ones)
    return Problem("lshape-dcr", lshape(), data, "-div(grad u) + x.grad u + u = 1 on (-1,1)^2 minus [0,1]x[-1,0]")


def zshape_convection() -> Problem:
    """-Lap u + (5, 5) . grad u = 1 on the Z-shaped domain."""
    data = ProblemData(b=lambda x: np.array([5.0, 5.0]), f=_ones)
    return Problem("zshape-convection", zshape(), data, "-div(grad u) + (5,5).grad u = 1 on the Z-shaped domain")


PROBLEMS = {"lshape-dcr": lshape_dcr, "zshape-convection": zshape_convection}

_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "arctan2", "sinh", "cosh", "tanh", "pi", "maximum", "minimum", "where")
}
_NAMESPACE["np"] = np


def _expression_field(expr: str, shape):
    try:
        code = compile(expr, "<problem expression>", "eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot evaluate expression {expr!r}: {exc.msg}") from exc

    def field(pts):
        ns = dict(_NAMESPACE, x=pts[:, 0], y=pts[:, 1])
        val = eval(code, {"__builtins__": {}}, ns)
        n = len(pts)
        if shape == ():
            return np.broadcast_to(np.asarray(val, dtype=float), (n,))
        if shape == (2,):
            comps = [np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in val]
            return np.stack(comps, axis=1)
        rows = [[np.broadcast_to(np.asarray(c, dtype=float), (n,)) for c in row] for row in val]
        return np.stack([np.stack(r, axis=1) for r in rows], axis=1)

    # fail early on syntax and shape problems
    probe = np.array([[0.25, 0.25]])
    try:
        out = field(probe)
    except Exception as exc:
        raise ValueError(f"cannot evaluate expression {expr!r}: {exc}") from exc
    if out.shape != (1,) + shape:
        raise ValueError(f"expression {expr!r} has shape {out.shape[1:]}, expected {shape}")
    return field


_SHAPES = {"A": (2, 2), "b": (2,), "c": (), "f": (), "fvec": (2,), "div_A": (2,), "div_fvec": ()}


def load_custom_problem(path) -> Problem:
    """Read a problem definition from an INI file (see module docstring)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(f"problem file {path} not found")
    if "problem" not in cp:
        raise ValueError(f"{path}: missing [problem] section")
    sec = cp["problem"]
    unknown = set(sec) - set(_SHAPES) - {"mesh", "name"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    mesh_name = sec.get("mesh", "").strip()
    if not mesh_name:
        raise ValueError(f"{path}: no mesh given")
    if mesh_name in BUILTIN_MESHES:
        mesh = BUILTIN_MESHES[mesh_name]()
    else:
        mpath = mesh_name if os.path.isabs(mesh_name) else os.path.join(os.path.dirname(os.path.abspath(path)), mesh_name)
        mesh = read_mesh(mpath)
    fields = {k: _expression_field(sec[k], shape) for k, shape in _SHAPES.items() if k in sec}
    name = sec.get("name", os.path.splitext(os.path.basename(path))[0])
    return Problem(name, mesh, ProblemData(**fields), f"custom problem from {path}")


def get_problem(name: str) -> Problem:
    """Built-in problem by name, or a custom problem from an INI path."""
    if name in PROBLEMS:
        return PROBLEMS[name]()
    if os.path.exists(name):
        return load_custom_problem(name)
    raise ValueError(f"unknown problem {name!r}; choose one of {sorted(PROBLEMS)} or give an INI file")
