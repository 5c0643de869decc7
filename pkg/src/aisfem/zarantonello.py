"""Zarantonello symmetrization of a nonsymmetric Galerkin system.

With K the SPD matrix of the principal part and B the full (nonsymmetric)
matrix, one step maps u to the solution x of

    K x = K u + delta (F - B u).

The fixed point is the Galerkin solution B u* = F.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .solvers import solve_direct

__all__ = ["ZarantonelloStep", "step_rhs", "exact_map", "estimate_delta", "contraction_bound", "DeltaEstimate"]


@dataclass(frozen=True)
class ZarantonelloStep:
    delta: float
    stiffness: object
    nonsym: object
    load: np.ndarray

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        n = self.stiffness.shape[0]
        if self.nonsym.shape != (n, n) or np.shape(self.load) != (n,):
            raise ValueError("stiffness, nonsymmetric matrix and load have inconsistent dimensions")

    @property
    def dim(self) -> int:
        return self.stiffness.shape[0]

    def rhs(self, u) -> np.ndarray:
        return step_rhs(self, u)

    def __call__(self, u) -> np.ndarray:
        return exact_map(self, u)


def step_rhs(z: ZarantonelloStep, u) -> np.ndarray:
    """G = K u + delta (F - B u)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (z.dim,):
        raise ValueError(f"vector of length {u.shape} does not match dimension {z.dim}")
    return z.stiffness @ u + z.delta * (z.load - z.nonsym @ u)


def exact_map(z: ZarantonelloStep, u) -> np.ndarray:
    """Phi(delta; u) by a direct solve with the stiffness matrix."""
    return solve_direct(z.stiffness, step_rhs(z, u))


@dataclass(frozen=True)
class DeltaEstimate:
    alpha: float
    L: float
    delta_star: float

    def __iter__(self):
        return iter((self.alpha, self.L, self.delta_star))


def estimate_delta(z: ZarantonelloStep, samples: int = 200, seed=0, warn: bool = True) -> DeltaEstimate:
    """Sampled ellipticity and continuity constants of b w.r.t. the energy norm.

    ``alpha`` is the smallest Rayleigh quotient b(v,v)/|||v|||^2 over the
    random vectors, ``L`` the largest |b(u,v)|/(|||u||| |||v|||) over all
    pairs (including u = v), and ``delta_star = alpha / L^2``.  Sampling
    can only overestimate the ellipticity constant and underestimate the
    continuity constant.
    """
    if samples < 10:
        raise ValueError("at least 10 samples are required")
    n = z.dim
    if n == 0:
        return DeltaEstimate(np.nan, np.nan, np.nan)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, samples))
    KV = z.stiffness @ V
    BV = z.nonsym @ V
    norms = np.sqrt(np.einsum("ij,ij->j", V, KV))
    # entry (i, j) is b(v_j, v_i)
    G = V.T @ BV
    G /= norms[:, None] * norms[None, :]
    alpha = float(np.diag(G).min())
    L = float(np.abs(G).max())
    est = DeltaEstimate(alpha, L, alpha / L**2 if L > 0 else np.nan)
    if warn and est.delta_star > 0 and z.delta >= 2 * est.delta_star:
        warnings.warn(
            f"delta = {z.delta} is at least twice the sampled optimum {est.delta_star:.3g}; "
            "the symmetrization may not contract",
            RuntimeWarning,
            stacklevel=2,
        )
    return est


def contraction_bound(delta: float, alpha: float, L: float) -> float:
    """sqrt(1 - delta (2 alpha - delta L^2)), the energy contraction of the exact map.

    Returns a value >= 1 when ``delta`` is too large for the given constants.
    """
    return float(np.sqrt(max(1.0 - delta * (2.0 * alpha - delta * L**2), 0.0)))
