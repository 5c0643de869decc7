"""Residual a posteriori error estimator.

For an element T with diameter h_T the squared indicator is

    h_T^2 ||-div(A grad v - fvec) + b . grad v + c v - f||_T^2
        + h_T ||[(A grad v - fvec) . n]||_{dT \\ boundary}^2

Each interior edge is integrated once and its jump term is added to
both adjacent elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import LOCAL_EDGES, REF_VERTICES, FiniteElementSpace, ProblemData, _chunks, _quad_points, dot2, map_gradients
from .quadrature import line_rule, triangle_rule

__all__ = ["IndicatorField", "ResidualEstimator", "estimate", "restrict", "write_indicators_csv"]


@dataclass(frozen=True)
class IndicatorField:
    """Squared element indicators eta(T; v)^2."""

    values: np.ndarray

    @property
    def total(self) -> float:
        """Sum of the squared indicators."""
        return float(self.values.sum())

    @property
    def eta(self) -> float:
        return float(np.sqrt(self.total))

    def __len__(self):
        return len(self.values)


def restrict(indicators: IndicatorField, subset) -> float:
    """(sum_{T in subset} eta_T^2)^(1/2)."""
    subset = np.asarray(subset, dtype=np.int64).ravel()
    n = len(indicators.values)
    if len(subset) and (subset.min() < 0 or subset.max() >= n):
        bad = subset[(subset < 0) | (subset >= n)][0]
        raise IndexError(f"element index {bad} out of range 0..{n - 1}")
    if len(np.unique(subset)) != len(subset):
        raise ValueError("subset contains duplicate indices")
    return float(np.sqrt(indicators.values[subset].sum()))


class ResidualEstimator:
    """Precomputed linear maps from coefficient vectors to residual samples.

    Everything that does not depend on the discrete function is set up once
    per mesh, so repeated evaluations cost a few gathers and contractions.
    """

    def __init__(self, space: FiniteElementSpace, data: ProblemData, q_data: int = 2):
        self.space = space
        mesh = space.mesh
        el = space.element_type
        m = space.degree
        N = mesh.n_elements
        h = mesh.diameters
        x0, B, Binv, det = space.geometry

        # volume residual: R = Rop . v_loc + r0
        pts, w = triangle_rule(2 * m + q_data)
        phi = el.values(pts)
        gref = el.gradients(pts)
        href = el.hessians(pts) if m >= 2 else None
        nq = len(w)
        self.vol_op = np.empty((N, nq, el.n_basis))
        self.vol_rhs = np.zeros((N, nq))
        for chunk in _chunks(N):
            x = _quad_points(space, pts, chunk).reshape(-1, 2)
            G = map_gradients(Binv[chunk], gref)
            op = np.zeros((len(chunk), nq, el.n_basis))
            if href is not None:
                H = np.einsum("ekd,qikl,elc->eqidc", Binv[chunk], href, Binv[chunk], optimize=True)
                A = data.eval_A(x)
                if A is None:
                    op -= H[..., 0, 0] + H[..., 1, 1]
                else:
                    A = A.reshape(len(chunk), nq, 1, 2, 2)
                    op -= (A * H).sum(axis=(-1, -2))
            divA = data.eval("div_A", x, (2,))
            if divA is not None:
                op -= dot2(divA.reshape(len(chunk), nq, 1, 2), G)
            b = data.eval("b", x, (2,))
            if b is not None:
                op += dot2(b.reshape(len(chunk), nq, 1, 2), G)
            c = data.eval("c", x)
            if c is not None:
                op += c.reshape(len(chunk), nq)[:, :, None] * phi[None]
            self.vol_op[chunk] = op
            rhs = np.zeros(len(chunk) * nq)
            f = data.eval("f", x)
            if f is not None:
                rhs -= f
            divf = data.eval("div_fvec", x)
            if divf is not None:
                rhs += divf
            self.vol_rhs[chunk] = rhs.reshape(len(chunk), nq)
        self.vol_weight = (h ** 2)[:, None] * det[:, None] * w[None, :]

        # normal-flux jumps on interior edges
        ee = mesh.edge_elements
        inner = np.flatnonzero(ee[:, 1] >= 0)
        self.inner_edges = inner
        e1, e2 = ee[inner, 0], ee[inner, 1]
        self.edge_elems = (e1, e2)
        tq, wq = line_rule(2 * m + q_data)
        ed = mesh.edges[inner]
        pa, pb = mesh.vertices[ed[:, 0]], mesh.vertices[ed[:, 1]]
        tangent = pb - pa
        length = np.linalg.norm(tangent, axis=1)
        xq = pa[:, None, :] + tq[None, :, None] * tangent[:, None, :]
        # configurations: local edge index and orientation w.r.t. (lower, upper) vertex
        cfg_grads = np.empty((6, len(tq), el.n_basis, 2))
        for le, (a, bb) in enumerate(LOCAL_EDGES):
            for rev in (0, 1):
                s, e = (a, bb) if not rev else (bb, a)
                rp = (1 - tq)[:, None] * REF_VERTICES[s] + tq[:, None] * REF_VERTICES[e]
                cfg_grads[2 * le + rev] = el.gradients(rp)
        A_edge = data.eval_A(xq.reshape(-1, 2))
        self.jump_ops = []
        t = mesh.elements
        for side, elems in enumerate((e1, e2)):
            le = np.argmax(mesh.element_edges[elems] == inner[:, None], axis=1)
            a_loc = np.array([p[0] for p in LOCAL_EDGES])[le]
            rev = (t[elems, a_loc] != ed[:, 0]).astype(np.int64)
            gq = cfg_grads[2 * le + rev]  # (nE, nq, nb, 2)
            G = map_gradients(Binv[elems], gq)
            # outward normal of this element on the edge
            centroid = mesh.vertices[t[elems]].mean(axis=1)
            n = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1) / length[:, None]
            flip = ((centroid - pa) * n).sum(axis=1) > 0
            n[flip] *= -1
            if A_edge is None:
                op = dot2(n[:, None, None, :], G)
            else:
                An = dot2(A_edge.reshape(len(inner), len(tq), 2, 2), n[:, None, None, :])
                op = dot2(An[:, :, None, :], G)
            # fvec . n cancels between the two sides for continuous fvec
            self.jump_ops.append(op)
        self.jump_weight = length[:, None] * wq[None, :]
        self.h = h

    def __call__(self, v) -> IndicatorField:
        space = self.space
        v = np.asarray(v, dtype=float)
        if v.shape != (space.dim,):
            raise ValueError(f"coefficient vector of length {v.shape} does not match space dimension {space.dim}")
        full = space.full_vector(v)
        vloc = full[space.element_dofs]
        R = np.matmul(self.vol_op, vloc[:, :, None])[..., 0] + self.vol_rhs
        eta2 = (self.vol_weight * R * R).sum(axis=1)
        if len(self.inner_edges):
            e1, e2 = self.edge_elems
            J = np.matmul(self.jump_ops[0], vloc[e1][:, :, None])[..., 0] + np.matmul(self.jump_ops[1], vloc[e2][:, :, None])[..., 0]
            jint = (self.jump_weight * J * J).sum(axis=1)
            N = space.mesh.n_elements
            contrib = np.bincount(e1, jint, minlength=N) + np.bincount(e2, jint, minlength=N)
            eta2 = eta2 + self.h * contrib
        return IndicatorField(eta2)


def estimate(space: FiniteElementSpace, data: ProblemData, v, q_data: int = 2) -> IndicatorField:
    return ResidualEstimator(space, data, q_data)(v)


def write_indicators_csv(indicators: IndicatorField, path, mesh=None) -> None:
    """Per-element CSV: element, (centroid x, y,) eta_sq."""
    with open(path, "w") as fh:
        if mesh is None:
            fh.write("element,eta_sq\n")
            for i, e in enumerate(indicators.values):
                fh.write(f"{i},{float(e)!r}\n")
        else:
            cent = mesh.vertices[mesh.elements].mean(axis=1)
            fh.write("element,x,y,eta_sq\n")
            for i, (e, c) in enumerate(zip(indicators.values, cent)):
                fh.write(f"{i},{float(c[0])!r},{float(c[1])!r},{float(e)!r}\n")
