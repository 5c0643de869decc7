"""Quadrature on the reference triangle and the unit interval."""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def triangle_rule(degree: int):
    """Collapsed Gauss rule on the reference triangle conv{(0,0),(1,0),(0,1)}.

    Exact for polynomials of total degree ``degree``.  Returns ``(points, weights)``
    with weights summing to 1/2.
    """
    n = max(1, (degree + 2) // 2)
    # Gauss-Jacobi in the collapsed direction absorbs the Duffy Jacobian (1 - s)
    s, ws = roots_jacobi(n, 1.0, 0.0)
    r, wr = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s + 1.0)
    ws = ws / 4.0
    r = 0.5 * (r + 1.0)
    wr = wr / 2.0
    S, R = np.meshgrid(s, r, indexing="ij")
    x = S.ravel()
    y = ((1.0 - S) * R).ravel()
    w = np.outer(ws, wr).ravel()
    pts = np.stack([x, y], axis=1)
    pts.setflags(write=False)
    w.setflags(write=False)
    return pts, w


@lru_cache(maxsize=None)
def line_rule(degree: int):
    """Gauss-Legendre rule on [0, 1], exact for degree ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w
