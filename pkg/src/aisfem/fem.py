"""Lagrange finite element spaces, assembly, energy norms and prolongation.

Degrees of freedom are numbered vertices first (mesh order), then edge
nodes (edge order, running from the lower to the higher vertex index),
then element-interior nodes.  Dirichlet dofs are eliminated: every
assembled operator and vector lives on the free dofs only.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .mesh import Triangulation
from .quadrature import triangle_rule

__all__ = [
    "LagrangeElement",
    "FiniteElementSpace",
    "ProblemData",
    "build_space",
    "assemble_a",
    "assemble_b",
    "assemble_load",
    "assemble_convection_reaction",
    "energy_norm",
    "prolongation_matrix",
    "prolong",
    "interpolate",
    "evaluate",
    "NestingError",
]

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))
CHUNK = 40000


class NestingError(ValueError):
    """The fine mesh is not a refinement of the coarse mesh."""


class LagrangeElement:
    """Nodal P_m basis on the reference triangle."""

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {degree}")
        m = self.degree = degree
        self.exponents = np.array([(a, d - a) for d in range(m + 1) for a in range(d, -1, -1)])
        nodes = [REF_VERTICES[i] for i in range(3)]
        for a, b in LOCAL_EDGES:
            for i in range(1, m):
                s = i / m
                nodes.append((1 - s) * REF_VERTICES[a] + s * REF_VERTICES[b])
        # interior nodes, barycentric (i, j, k)/m with all entries >= 1
        for j in range(1, m):
            for k in range(1, m - j):
                nodes.append(np.array([j / m, k / m]))
        self.nodes = np.array(nodes)
        self.n_basis = len(self.nodes)
        self.n_edge = m - 1
        self.n_interior = (m - 1) * (m - 2) // 2
        vander = self._monomials(self.nodes)
        self.coeffs = np.linalg.inv(vander)

    def _monomials(self, pts, dx=0, dy=0):
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.zeros((len(pts), len(self.exponents)))
        for n, (a, b) in enumerate(self.exponents):
            if a < dx or b < dy:
                continue
            ca = np.prod(np.arange(a - dx + 1, a + 1)) if dx else 1.0
            cb = np.prod(np.arange(b - dy + 1, b + 1)) if dy else 1.0
            out[:, n] = ca * cb * pts[:, 0] ** (a - dx) * pts[:, 1] ** (b - dy)
        return out

    def values(self, pts):
        """Basis values, shape (npts, n_basis)."""
        return self._monomials(pts) @ self.coeffs

    def gradients(self, pts):
        """Reference gradients, shape (npts, n_basis, 2)."""
        gx = self._monomials(pts, 1, 0) @ self.coeffs
        gy = self._monomials(pts, 0, 1) @ self.coeffs
        return np.stack([gx, gy], axis=-1)

    def hessians(self, pts):
        """Reference Hessians, shape (npts, n_basis, 2, 2)."""
        hxx = self._monomials(pts, 2, 0) @ self.coeffs
        hxy = self._monomials(pts, 1, 1) @ self.coeffs
        hyy = self._monomials(pts, 0, 2) @ self.coeffs
        return np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)


@lru_cache(maxsize=None)
def element(degree: int) -> LagrangeElement:
    return LagrangeElement(degree)


@dataclass(frozen=True, eq=False)
class FiniteElementSpace:
    """P_m Lagrange space over a triangulation with Dirichlet constraints."""

    mesh: Triangulation
    degree: int
    element_dofs: np.ndarray      # (N, n_basis) global dof indices
    dof_coords: np.ndarray        # (n_dofs, 2)
    dirichlet_mask: np.ndarray    # (n_dofs,) bool

    @property
    def n_dofs(self) -> int:
        return len(self.dof_coords)

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)

    @property
    def dim(self) -> int:
        return len(self.free)

    @cached_property
    def free_index(self) -> np.ndarray:
        """Global dof -> position among free dofs, -1 for Dirichlet dofs."""
        out = np.full(self.n_dofs, -1, dtype=np.int64)
        out[self.free] = np.arange(self.dim)
        return out

    @cached_property
    def element_free_dofs(self) -> np.ndarray:
        return self.free_index[self.element_dofs]

    @property
    def element_type(self) -> LagrangeElement:
        return element(self.degree)

    @cached_property
    def geometry(self):
        """Affine maps x = x0 + B xi: returns (x0, B, Binv, detB)."""
        p = self.mesh.vertices[self.mesh.elements]
        x0 = p[:, 0]
        B = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        det = B[:, 0, 0] * B[:, 1, 1] - B[:, 0, 1] * B[:, 1, 0]
        Binv = np.empty_like(B)
        Binv[:, 0, 0] = B[:, 1, 1] / det
        Binv[:, 1, 1] = B[:, 0, 0] / det
        Binv[:, 0, 1] = -B[:, 0, 1] / det
        Binv[:, 1, 0] = -B[:, 1, 0] / det
        return x0, B, Binv, det

    def full_vector(self, v):
        """Extend a free-dof vector by zero Dirichlet values."""
        out = np.zeros(self.n_dofs)
        out[self.free] = v
        return out


def build_space(mesh: Triangulation, degree: int, dirichlet: bool = True) -> FiniteElementSpace:
    """Lagrange space of the given degree; ``dirichlet=False`` leaves every dof free."""
    if int(degree) != degree or degree < 1:
        raise ValueError(f"polynomial degree must be a positive integer, got {degree}")
    degree = int(degree)
    el = element(degree)
    t = mesh.elements
    V, N = mesh.n_vertices, mesh.n_elements
    E = len(mesh.edges)
    ne, ni = el.n_edge, el.n_interior
    dofs = np.empty((N, el.n_basis), dtype=np.int64)
    dofs[:, :3] = t
    el2ed = mesh.element_edges
    for le, (a, b) in enumerate(LOCAL_EDGES):
        forward = t[:, a] < t[:, b]
        for i in range(ne):
            pos = np.where(forward, i, ne - 1 - i)
            dofs[:, 3 + le * ne + i] = V + el2ed[:, le] * ne + pos
    base = V + E * ne
    if ni:
        dofs[:, 3 + 3 * ne:] = base + np.arange(N)[:, None] * ni + np.arange(ni)[None, :]
    n_dofs = base + N * ni

    p = mesh.vertices[t]
    local = el.nodes
    lam = np.stack([1 - local[:, 0] - local[:, 1], local[:, 0], local[:, 1]], axis=1)
    xyz = lam[None, :, 0, None] * p[:, None, 0] + lam[None, :, 1, None] * p[:, None, 1] + lam[None, :, 2, None] * p[:, None, 2]
    coords = np.empty((n_dofs, 2))
    coords[dofs.ravel()] = xyz.reshape(-1, 2)

    mask = np.zeros(n_dofs, dtype=bool)
    if dirichlet:
        bmask = mesh.boundary_edge_mask
        mask[mesh.boundary_vertices] = True
        if ne:
            bed = np.flatnonzero(bmask)
            mask[(V + bed[:, None] * ne + np.arange(ne)[None, :]).ravel()] = True
    return FiniteElementSpace(mesh, degree, dofs, coords, mask)


# ---------------------------------------------------------------- problem data

Field = Optional[Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class ProblemData:
    """Coefficients of  -div(A grad u) + b . grad u + c u = f - div fvec.

    Every field is a callable on an (n, 2) array of points; ``None`` means
    zero (identity for ``A``).  ``div_A`` (row-wise divergence,
    ``(div A)_j = sum_i d_i A_ij``) and ``div_fvec`` are only needed by the
    estimator when ``A`` or ``fvec`` vary in space; ``None`` means zero.
    """

    A: Field = None
    b: Field = None
    c: Field = None
    f: Field = None
    fvec: Field = None
    div_A: Field = None
    div_fvec: Field = None

    def eval_A(self, x):
        if self.A is None:
            return None
        a = np.asarray(self.A(x), dtype=float)
        a = np.broadcast_to(a, (len(x), 2, 2)) if a.ndim == 2 else a.reshape(-1, 2, 2)
        if len(a) == 0:
            return a
        if not np.all(np.isfinite(a)):
            raise ValueError("diffusion matrix A is not finite at some quadrature points")
        if not np.allclose(a, np.swapaxes(a, 1, 2), rtol=1e-12, atol=1e-14 * np.abs(a).max()):
            raise ValueError("diffusion matrix A must be symmetric")
        det = a[:, 0, 0] * a[:, 1, 1] - a[:, 0, 1] ** 2
        if not (np.all(a[:, 0, 0] > 0) and np.all(det > 0)):
            raise ValueError("diffusion matrix A must be positive definite")
        return a

    def eval(self, name, x, shape=()):
        fn = getattr(self, name)
        if fn is None:
            return None
        val = np.asarray(fn(x), dtype=float)
        val = np.broadcast_to(val, (len(x),) + shape) if val.ndim <= len(shape) else val.reshape((len(x),) + shape)
        if not np.all(np.isfinite(val)):
            raise ValueError(f"coefficient {name} is not finite at some quadrature points")
        return val

    @property
    def symmetric(self) -> bool:
        return self.b is None and self.c is None


# ---------------------------------------------------------------- assembly

def _quad_points(space, pts, chunk):
    """Physical coordinates of reference points on a chunk of elements."""
    x0, B, _, _ = space.geometry
    B = B[chunk]
    return x0[chunk, None, :] + B[:, None, :, 0] * pts[None, :, 0, None] + B[:, None, :, 1] * pts[None, :, 1, None]


def map_gradients(Binv, gref):
    """B^{-T} grad: (E,2,2) x (Q,I,2) -> (E,Q,I,2); gref may also carry a leading E axis."""
    if gref.ndim == 3:
        gref = gref[None]
    return Binv[:, None, None, 0, :] * gref[..., 0, None] + Binv[:, None, None, 1, :] * gref[..., 1, None]


def dot2(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]


def _phys_gradients(space, gref, chunk):
    return map_gradients(space.geometry[2][chunk], gref)


def _chunks(n):
    for s in range(0, n, CHUNK):
        yield np.arange(s, min(n, s + CHUNK))


def _to_sparse(space, loc_blocks):
    """Sum element matrices into a CSR operator on free dofs."""
    n = space.dim
    rows, cols, vals = [], [], []
    for chunk, loc in loc_blocks:
        d = space.element_free_dofs[chunk]
        nb = d.shape[1]
        r = np.repeat(d, nb, axis=1).ravel()
        c = np.tile(d, (1, nb)).ravel()
        v = loc.reshape(len(chunk), -1).ravel()
        keep = (r >= 0) & (c >= 0)
        rows.append(r[keep])
        cols.append(c[keep])
        vals.append(v[keep])
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def stiffness_blocks(space, data: ProblemData, q_data: int = 2):
    el = space.element_type
    deg = 2 * space.degree - 2 + (q_data if data.A is not None else 0)
    pts, w = triangle_rule(deg)
    gref = el.gradients(pts)
    det = space.geometry[3]
    for chunk in _chunks(space.mesh.n_elements):
        G = _phys_gradients(space, gref, chunk)
        wd = w[None, :] * det[chunk, None]
        if data.A is None:
            AG = G
        else:
            x = _quad_points(space, pts, chunk).reshape(-1, 2)
            A = data.eval_A(x).reshape(len(chunk), len(w), 1, 2, 2)
            AG = A[..., 0] * G[..., 0, None] + A[..., 1] * G[..., 1, None]
        WG = G * wd[:, :, None, None]
        loc = np.matmul(WG[..., 0].transpose(0, 2, 1), AG[..., 0]) + np.matmul(WG[..., 1].transpose(0, 2, 1), AG[..., 1])
        yield chunk, loc


def lower_order_blocks(space, data: ProblemData, q_data: int = 2):
    """Element matrices of (b . grad u + c u, v)."""
    el = space.element_type
    pts, w = triangle_rule(2 * space.degree + q_data)
    phi = el.values(pts)
    gref = el.gradients(pts)
    det = space.geometry[3]
    for chunk in _chunks(space.mesh.n_elements):
        wd = w[None, :] * det[chunk, None]
        x = _quad_points(space, pts, chunk).reshape(-1, 2)
        loc = np.zeros((len(chunk), el.n_basis, el.n_basis))
        if data.b is not None:
            b = data.eval("b", x, (2,)).reshape(len(chunk), len(w), 1, 2)
            G = _phys_gradients(space, gref, chunk)
            bg = dot2(b, G)
            loc += np.matmul((wd[:, :, None] * phi[None]).transpose(0, 2, 1), bg)
        if data.c is not None:
            c = data.eval("c", x).reshape(len(chunk), len(w))
            loc += np.matmul((wd * c)[:, None, :] * phi.T[None], phi[None])
        yield chunk, loc


def assemble_a(space: FiniteElementSpace, data: ProblemData, q_data: int = 2) -> sp.csr_matrix:
    """Stiffness operator of a(u, v) = (A grad u, grad v) on the free dofs."""
    mat = _to_sparse(space, stiffness_blocks(space, data, q_data))
    if mat.nnz:
        asym = abs(mat - mat.T).max()
        if asym > 1e-12 * abs(mat).max():
            raise ValueError(f"stiffness operator is not symmetric (max deviation {asym:.3e})")
    return mat


def assemble_convection_reaction(space, data, q_data: int = 2) -> sp.csr_matrix:
    return _to_sparse(space, lower_order_blocks(space, data, q_data))


def assemble_b(space: FiniteElementSpace, data: ProblemData, q_data: int = 2, stiffness=None) -> sp.csr_matrix:
    """Operator of b(u, v) = a(u, v) + (b . grad u + c u, v); row = test function."""
    K = assemble_a(space, data, q_data) if stiffness is None else stiffness
    if data.b is None and data.c is None:
        return K.copy()
    mat = K + assemble_convection_reaction(space, data, q_data)
    mat.sort_indices()
    return mat.tocsr()


def assemble_load(space: FiniteElementSpace, data: ProblemData, q_data: int = 2) -> np.ndarray:
    """Load vector F(v) = (f, v) + (fvec, grad v) on the free dofs."""
    el = space.element_type
    out = np.zeros(space.n_dofs)
    if data.f is None and data.fvec is None:
        return out[space.free]
    pts, w = triangle_rule(2 * space.degree + q_data)
    phi = el.values(pts)
    gref = el.gradients(pts)
    det = space.geometry[3]
    for chunk in _chunks(space.mesh.n_elements):
        wd = w[None, :] * det[chunk, None]
        x = _quad_points(space, pts, chunk).reshape(-1, 2)
        loc = np.zeros((len(chunk), el.n_basis))
        if data.f is not None:
            f = data.eval("f", x).reshape(len(chunk), len(w))
            loc += np.einsum("eq,qi->ei", wd * f, phi)
        if data.fvec is not None:
            fv = data.eval("fvec", x, (2,)).reshape(len(chunk), len(w), 2)
            G = _phys_gradients(space, gref, chunk)
            loc += (wd[:, :, None] * dot2(fv[:, :, None, :], G)).sum(axis=1)
        out += np.bincount(space.element_dofs[chunk].ravel(), loc.ravel(), minlength=space.n_dofs)
    return out[space.free]


def energy_norm(stiffness, v) -> float:
    """|||v||| = sqrt(v^T K v)."""
    v = np.asarray(v, dtype=float)
    if v.shape != (stiffness.shape[0],):
        raise ValueError(f"vector of length {v.shape} does not match operator of size {stiffness.shape[0]}")
    return float(np.sqrt(max(float(v @ (stiffness @ v)), 0.0)))


# ---------------------------------------------------------------- evaluation, prolongation

def _locate(coarse_mesh: Triangulation, pts):
    from matplotlib.tri import Triangulation as MplTri

    tri = MplTri(coarse_mesh.vertices[:, 0], coarse_mesh.vertices[:, 1], coarse_mesh.elements)
    return tri.get_trifinder()(pts[:, 0], pts[:, 1])


def _coarse_ref_coords(space, cells, x):
    x0, _, Binv, _ = space.geometry
    d = x - x0[cells]
    Bi = Binv[cells]
    return Bi[:, :, 0] * d[:, 0, None] + Bi[:, :, 1] * d[:, 1, None]


def prolongation_matrix(coarse: FiniteElementSpace, fine: FiniteElementSpace, parent=None) -> sp.csr_matrix:
    """Exact embedding X_coarse -> X_fine as a (fine.dim, coarse.dim) matrix.

    ``parent`` maps each fine element to the coarse element containing it
    (as returned by :func:`aisfem.mesh.refine_with_parents`); without it the
    fine element centroids are located in the coarse mesh.
    """
    if coarse.degree != fine.degree:
        raise NestingError("spaces of different polynomial degree")
    fm = fine.mesh
    if parent is None:
        cent = fm.vertices[fm.elements].mean(axis=1)
        parent = _locate(coarse.mesh, cent)
        if (parent < 0).any():
            raise NestingError("fine elements outside the coarse mesh")
    parent = np.asarray(parent)
    if len(parent) != fm.n_elements:
        raise NestingError("parent map does not match the fine mesh")
    # one representative element per fine dof
    flat = fine.element_dofs.ravel()
    dofs, first = np.unique(flat, return_index=True)
    el_idx = first // fine.element_dofs.shape[1]
    cells = parent[el_idx]
    xi = _coarse_ref_coords(coarse, cells, fine.dof_coords[dofs])
    lam = np.stack([1 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]], axis=1)
    if lam.min() < -1e-9:
        raise NestingError("fine mesh is not a refinement of the coarse mesh")
    # the fine vertices must also lie inside the parent (full containment)
    pv = fm.vertices[fm.elements]
    xv = _coarse_ref_coords(coarse, np.repeat(parent, 3), pv.reshape(-1, 2))
    lv = np.stack([1 - xv[:, 0] - xv[:, 1], xv[:, 0], xv[:, 1]], axis=1)
    if lv.min() < -1e-9:
        raise NestingError("fine mesh is not a refinement of the coarse mesh")
    vals = coarse.element_type.values(xi)
    vals[np.abs(vals) < 1e-13] = 0.0
    rows = np.repeat(fine.free_index[dofs], vals.shape[1])
    cols = coarse.element_free_dofs[cells].ravel()
    v = vals.ravel()
    keep = (rows >= 0) & (cols >= 0) & (v != 0.0)
    P = sp.coo_matrix((v[keep], (rows[keep], cols[keep])), shape=(fine.dim, coarse.dim)).tocsr()
    P.sort_indices()
    return P


def prolong(coarse: FiniteElementSpace, fine: FiniteElementSpace, v_coarse, parent=None) -> np.ndarray:
    v_coarse = np.asarray(v_coarse, dtype=float)
    if v_coarse.shape != (coarse.dim,):
        raise ValueError("coefficient vector does not match the coarse space")
    return prolongation_matrix(coarse, fine, parent) @ v_coarse


def interpolate(space: FiniteElementSpace, func) -> np.ndarray:
    """Nodal interpolant of ``func`` restricted to the free dofs."""
    vals = np.asarray(func(space.dof_coords), dtype=float)
    return vals[space.free]


def evaluate(space: FiniteElementSpace, v, pts) -> np.ndarray:
    """Point values of the discrete function with free coefficients ``v``."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    cells = _locate(space.mesh, pts)
    if (cells < 0).any():
        raise ValueError("evaluation points outside the mesh")
    xi = _coarse_ref_coords(space, cells, pts)
    phi = space.element_type.values(xi)
    full = space.full_vector(v)
    return np.einsum("ni,ni->n", phi, full[space.element_dofs[cells]])
