"""Contractive iterative solvers for the SPD stiffness systems of a mesh hierarchy.

Two iterations are provided, both built on the sequence of nested adaptive
spaces and both smoothing only the dofs that are new or whose basis function
changed at each level (see :func:`changed_dofs`):

* ``mg-vcycle`` (default): a symmetric V-cycle with local forward/backward
  Gauss-Seidel,
* ``pcg-bpx``: conjugate gradients preconditioned by an additive multilevel
  (BPX-type) preconditioner with local Jacobi scaling.  Its contraction
  still creeps up slowly with the number of levels.

The coarsest retained level is solved exactly; levels below the finest one
whose dimension fits under ``coarse_cap`` are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

__all__ = [
    "SOLVER_KINDS",
    "MultilevelHierarchy",
    "NotSPDError",
    "SolverError",
    "IterativeSolver",
    "solver_step",
    "solve_direct",
    "solve_to_tolerance",
    "measure_contraction",
    "new_element_dofs",
    "changed_dofs",
]

SOLVER_KINDS = ("pcg-bpx", "mg-vcycle")


class SolverError(RuntimeError):
    pass


class NotSPDError(SolverError):
    pass


def solve_direct(K, rhs) -> np.ndarray:
    """Sparse LU solve, used as oracle and as the direct baseline.

    Works for nonsymmetric matrices.  Raises :class:`SolverError` if the
    factorization is singular or the residual exceeds ``1e-10 ||rhs||``.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n) or rhs.shape != (n,):
        raise ValueError(f"system of shape {K.shape} does not match right-hand side of length {rhs.shape}")
    if n == 0:
        return np.zeros(0)
    try:
        x = sla.splu(sp.csc_matrix(K)).solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"direct solve failed: {exc}") from exc
    nr = np.linalg.norm(rhs)
    res = np.linalg.norm(K @ x - rhs)
    if not np.all(np.isfinite(x)) or res > 1e-10 * max(nr, np.finfo(float).tiny):
        if nr == 0.0 and res == 0.0:
            return x
        raise SolverError(f"direct solve inaccurate: residual {res:.3e} for |rhs| = {nr:.3e}")
    return x


def new_element_dofs(fine_space, parent) -> np.ndarray:
    """Free dofs (in fine numbering) touching an element created by refinement."""
    counts = np.bincount(parent, minlength=int(parent.max()) + 1 if len(parent) else 0)
    new = counts[parent] > 1
    d = fine_space.element_free_dofs[new].ravel()
    return np.unique(d[d >= 0])


def changed_dofs(P, tol: float = 1e-12) -> np.ndarray:
    """Fine dofs whose basis function is new or differs from a coarse one.

    Coarse basis function ``j`` survives unchanged exactly when column ``j``
    of the prolongation ``P`` is a unit vector; its row is then excluded.
    """
    P = sp.csc_matrix(P, copy=True)
    P.data[np.abs(P.data) <= tol] = 0.0
    P.eliminate_zeros()
    start = P.indptr[:-1][np.diff(P.indptr) == 1]
    kept = P.indices[start[np.abs(P.data[start] - 1.0) <= tol]]
    mask = np.ones(P.shape[0], dtype=bool)
    mask[kept] = False
    return np.flatnonzero(mask)


@dataclass
class _Level:
    K: sp.csr_matrix
    P: sp.csr_matrix | None  # from the previous retained level
    local: np.ndarray
    diag_inv: np.ndarray = field(init=False)
    lower: sp.csr_matrix = field(init=False)
    upper: sp.csr_matrix = field(init=False)
    K_cols: sp.csc_matrix = field(init=False)

    def __post_init__(self):
        L = self.local
        d = self.K.diagonal()[L]
        if np.any(d <= 0):
            raise NotSPDError("stiffness matrix has a nonpositive diagonal entry")
        self.diag_inv = 1.0 / d
        KLL = self.K[L][:, L]
        self.lower = sp.tril(KLL, format="csr")
        self.upper = sp.triu(KLL, format="csr")
        self.K_cols = sp.csc_matrix(self.K)[:, L]

    @property
    def dim(self):
        return self.K.shape[0]


class MultilevelHierarchy:
    """Nested adaptive levels with local smoothing sets.

    Levels are appended as the mesh is refined.  Each level stores the
    free-dof stiffness matrix, the prolongation from the previous level and
    the dofs that need smoothing (those of newly created elements).
    """

    def __init__(self, K0, coarse_cap: int = 500):
        if coarse_cap < 0:
            raise ValueError("coarse_cap must be nonnegative")
        self.coarse_cap = int(coarse_cap)
        self.levels: list[_Level] = []
        self._coarse = None
        self.n_levels_total = 0
        self.push(K0)

    def push(self, K, P=None, local=None):
        """Append a level; ``P`` maps the previous finest level to this one."""
        K = sp.csr_matrix(K)
        n = K.shape[0]
        if self.levels:
            if P is None:
                raise ValueError("prolongation required for a refined level")
            if P.shape != (n, self.levels[-1].dim):
                raise ValueError(f"prolongation of shape {P.shape} does not connect dims {self.levels[-1].dim} -> {n}")
        self.n_levels_total += 1
        if local is None:
            local = np.arange(n)
        local = np.asarray(local, dtype=np.int64)
        if n <= self.coarse_cap or not self.levels:
            # new coarsest level, solved directly
            self.levels = [_Level(K, None, np.arange(n))]
            self._factor(K)
            return
        self.levels.append(_Level(K, sp.csr_matrix(P), local))

    def _factor(self, K):
        if K.shape[0] == 0:
            self._coarse = None
            return
        try:
            self._coarse = sla.splu(sp.csc_matrix(K))
        except RuntimeError as exc:
            raise SolverError(f"coarse factorization failed: {exc}") from exc

    @property
    def dim(self):
        return self.levels[-1].dim

    @property
    def K(self):
        return self.levels[-1].K

    def coarse_solve(self, r):
        if self._coarse is None:
            return np.zeros_like(r)
        return self._coarse.solve(r)

    def bpx(self, r):
        """Additive multilevel preconditioner applied to a residual."""
        rs = [r]
        for lev in self.levels[:0:-1]:
            rs.append(lev.P.T @ rs[-1])
        rs.reverse()
        z = self.coarse_solve(rs[0])
        for lev, rl in zip(self.levels[1:], rs[1:]):
            z = lev.P @ z
            z[lev.local] += lev.diag_inv * rl[lev.local]
        return z

    def vcycle(self, r, level=None):
        """One symmetric V-cycle for K e = r from e = 0."""
        if level is None:
            level = len(self.levels) - 1
        if level == 0:
            return self.coarse_solve(r)
        lev = self.levels[level]
        L = lev.local
        e = np.zeros_like(r)
        eL = sla.spsolve_triangular(lev.lower, r[L], lower=True) if len(L) else np.zeros(0)
        e[L] = eL
        res = r - lev.K_cols @ eL
        e += lev.P @ self.vcycle(lev.P.T @ res, level - 1)
        resL = r[L] - lev.K[L] @ e
        e[L] += sla.spsolve_triangular(lev.upper, resL, lower=False) if len(L) else 0.0
        return e


class IterativeSolver:
    """Stateful iteration for K w = rhs on the finest level of a hierarchy.

    One call of :meth:`step` is one pCG iteration (``pcg-bpx``) or one
    V-cycle (``mg-vcycle``).  The pCG search direction is kept between
    calls; build a new instance when the right-hand side changes.
    """

    def __init__(self, hierarchy: MultilevelHierarchy, rhs, w0, kind: str = "mg-vcycle"):
        if kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {kind!r}; expected one of {SOLVER_KINDS}")
        self.h = hierarchy
        self.kind = kind
        n = hierarchy.dim
        self.rhs = np.asarray(rhs, dtype=float)
        w0 = np.asarray(w0, dtype=float)
        if self.rhs.shape != (n,) or w0.shape != (n,):
            raise ValueError(f"vectors of length {self.rhs.shape}, {w0.shape} do not match dimension {n}")
        self.w = w0.copy()
        self.r = self.rhs - hierarchy.K @ self.w
        self.p = None
        self.rz = None
        self.steps = 0

    def step(self) -> np.ndarray:
        K = self.h.K
        self.steps += 1
        if self.kind == "mg-vcycle":
            self.w = self.w + self.h.vcycle(self.r)
            self.r = self.rhs - K @ self.w
            return self.w.copy()
        if not np.any(self.r):
            return self.w.copy()
        z = self.h.bpx(self.r)
        rz = float(self.r @ z)
        if rz <= 0:
            if rz == 0:
                return self.w.copy()
            raise NotSPDError(f"preconditioner not positive definite (r.z = {rz:.3e})")
        self.p = z if self.p is None else z + (rz / self.rz) * self.p
        self.rz = rz
        Kp = K @ self.p
        curv = float(self.p @ Kp)
        if curv <= 0:
            raise NotSPDError(f"negative curvature p.Kp = {curv:.3e} in pCG: matrix is not SPD")
        a = rz / curv
        self.w = self.w + a * self.p
        self.r = self.r - a * Kp
        return self.w.copy()

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.r))


def solver_step(hierarchy: MultilevelHierarchy, rhs, w, kind: str = "mg-vcycle") -> np.ndarray:
    """One solver step from ``w`` without memory (first pCG iteration or one V-cycle)."""
    return IterativeSolver(hierarchy, rhs, w, kind).step()


def solve_to_tolerance(hierarchy, rhs, w0=None, kind="mg-vcycle", rtol=1e-10, maxiter=10000):
    """Iterate until ``||rhs - K w|| <= rtol ||rhs||``; returns ``(w, steps)``."""
    if w0 is None:
        w0 = np.zeros(hierarchy.dim)
    it = IterativeSolver(hierarchy, rhs, w0, kind)
    target = rtol * np.linalg.norm(rhs)
    while it.residual_norm > target:
        if it.steps >= maxiter:
            raise SolverError(f"no convergence after {maxiter} steps (residual {it.residual_norm:.3e})")
        it.step()
    return it.w, it.steps


def measure_contraction(hierarchy, rhs, trials: int = 3, steps: int = 5, kind: str = "mg-vcycle", seed=0,
                        starts=None) -> float:
    """Largest observed per-step energy error ratio from random starts.

    The exact solution comes from :func:`solve_direct`.  ``starts`` replaces
    the ``trials`` random start vectors.  Starts that are already exact
    (zero error) are skipped; if every start is exact the result is 0.
    """
    if starts is None and trials < 1:
        raise ValueError("trials must be at least 1")
    K = hierarchy.K
    rhs = np.asarray(rhs, dtype=float)
    w_star = solve_direct(K, rhs)
    if starts is None:
        rng = np.random.default_rng(seed)
        starts = (rng.standard_normal(hierarchy.dim) for _ in range(trials))
    q = 0.0
    for w in starts:
        w = np.asarray(w, dtype=float)
        it = IterativeSolver(hierarchy, rhs, w, kind)
        e_old = _enorm(K, w_star - w)
        for _ in range(steps):
            if e_old <= 1e-13 * max(_enorm(K, w_star), 1.0):
                break
            w = it.step()
            e_new = _enorm(K, w_star - w)
            q = max(q, e_new / e_old)
            e_old = e_new
    return q


def _enorm(K, v):
    return float(np.sqrt(max(v @ (K @ v), 0.0)))
