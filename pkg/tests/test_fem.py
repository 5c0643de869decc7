from math import factorial

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from aisfem.fem import (
    NestingError,
    ProblemData,
    assemble_a,
    assemble_b,
    assemble_convection_reaction,
    assemble_load,
    build_space,
    energy_norm,
    evaluate,
    interpolate,
    prolong,
    prolongation_matrix,
)
from aisfem.mesh import Triangulation, lshape, refine_with_parents, uniform_refine, unit_square, zshape
from aisfem.problems import lshape_dcr
from aisfem.quadrature import line_rule, triangle_rule


def ref_triangle():
    return Triangulation(np.array([[0.0, 0], [1, 0], [0, 1]]), np.array([[0, 1, 2]]), np.array([[0, 1], [1, 2], [2, 0]]))


@pytest.mark.parametrize("deg", range(0, 11))
def test_triangle_rule_exact(deg):
    pts, w = triangle_rule(deg)
    for a in range(deg + 1):
        b = deg - a
        exact = factorial(a) * factorial(b) / factorial(a + b + 2)
        assert w @ (pts[:, 0] ** a * pts[:, 1] ** b) == pytest.approx(exact, rel=1e-13)


@pytest.mark.parametrize("deg", range(0, 11))
def test_line_rule_exact(deg):
    x, w = line_rule(deg)
    assert w @ x**deg == pytest.approx(1.0 / (deg + 1), rel=1e-13)


def test_degree_zero_rejected():
    with pytest.raises(ValueError):
        build_space(unit_square(), 0)


def test_dof_counts_by_hand():
    sq = unit_square()
    assert build_space(sq, 1).dim == 0
    fine = uniform_refine(sq, 1)
    # one centre vertex; four interior edges from the centre to the corners
    assert fine.n_elements == 4
    assert build_space(fine, 1).dim == 1
    assert build_space(fine, 2).dim == 1 + 4


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_lagrange_count_formula(m):
    mesh = uniform_refine(zshape(), 2)
    V, N = mesh.n_vertices, mesh.n_elements
    E = V + N - 1  # Euler formula for a simply connected domain
    sp_all = build_space(mesh, m, dirichlet=False)
    assert sp_all.n_dofs == V + (m - 1) * E + (m - 1) * (m - 2) // 2 * N
    nb = len(mesh.boundary_edges)  # boundary vertices = boundary edges on a closed polygon
    assert build_space(mesh, m).dim == sp_all.n_dofs - nb - (m - 1) * nb


@pytest.mark.parametrize("m", [1, 2, 3])
def test_shared_facets_share_dofs(m):
    space = build_space(uniform_refine(lshape(), 2), m)
    # every dof coordinate is attached to a unique location
    rounded = np.round(space.dof_coords, 12)
    assert len(np.unique(rounded, axis=0)) == space.n_dofs


def test_p1_reference_stiffness():
    space = build_space(ref_triangle(), 1, dirichlet=False)
    K = assemble_a(space, ProblemData()).toarray()
    expected = 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]])
    np.testing.assert_allclose(K, expected, rtol=0, atol=1e-13)


def test_p1_reference_mass():
    space = build_space(ref_triangle(), 1, dirichlet=False)
    M = assemble_convection_reaction(space, ProblemData(c=lambda x: np.ones(len(x)))).toarray()
    expected = 0.5 / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    np.testing.assert_allclose(M, expected, rtol=0, atol=1e-13)


def test_stiffness_linear_in_A():
    space = build_space(uniform_refine(lshape(), 2), 2)
    K1 = assemble_a(space, ProblemData())
    K2 = assemble_a(space, ProblemData(A=lambda x: 2 * np.eye(2)))
    assert abs(K2 - 2 * K1).max() <= 1e-14 * abs(K1).max()


def test_nonsymmetric_A_rejected():
    space = build_space(uniform_refine(lshape(), 1), 1)
    with pytest.raises(ValueError, match="symmetric"):
        assemble_a(space, ProblemData(A=lambda x: np.array([[1.0, 0.5], [0.0, 1.0]])))
    with pytest.raises(ValueError, match="positive definite"):
        assemble_a(space, ProblemData(A=lambda x: np.array([[1.0, 0.0], [0.0, -1.0]])))


@pytest.mark.parametrize("m", [1, 2, 3])
def test_energy_of_linear_interpolant(m):
    space = build_space(uniform_refine(unit_square(), 3), m, dirichlet=False)
    K = assemble_a(space, ProblemData())
    v = interpolate(space, lambda p: p[:, 0])
    assert energy_norm(K, v) ** 2 == pytest.approx(1.0, rel=1e-13)


def test_energy_norm_basic():
    space = build_space(uniform_refine(lshape(), 2), 1)
    K = assemble_a(space, ProblemData())
    v = np.random.default_rng(0).standard_normal(space.dim)
    assert energy_norm(K, np.zeros(space.dim)) == 0.0
    assert energy_norm(K, -3 * v) == pytest.approx(3 * energy_norm(K, v), rel=1e-14)
    with pytest.raises(ValueError):
        energy_norm(K, v[:-1])


def test_b_equals_a_without_lower_order():
    space = build_space(uniform_refine(zshape(), 2), 2)
    assert abs(assemble_b(space, ProblemData()) - assemble_a(space, ProblemData())).max() == 0.0


def test_lshape_b_is_coercive():
    pr = lshape_dcr()
    space = build_space(uniform_refine(pr.mesh, 3), 2)
    B = assemble_b(space, pr.data)
    S = 0.5 * (B + B.T)
    lam = spla.eigsh(S.tocsc(), k=1, sigma=0, which="LM", return_eigenvectors=False)
    assert lam[0] > 0
    V = np.random.default_rng(1).standard_normal((space.dim, 50))
    assert np.min(np.einsum("ij,ij->j", V, B @ V)) > 0


def test_zero_load():
    space = build_space(uniform_refine(lshape(), 1), 2)
    assert not np.any(assemble_load(space, ProblemData()))


def test_unit_load_is_patch_area_over_three():
    space = build_space(uniform_refine(zshape(), 2), 1)
    F = assemble_load(space, ProblemData(f=lambda x: np.ones(len(x))))
    mesh = space.mesh
    patch = np.bincount(mesh.elements.ravel(), np.repeat(mesh.areas, 3), minlength=mesh.n_vertices)
    np.testing.assert_allclose(F, patch[space.free] / 3, rtol=1e-13)


@pytest.mark.parametrize("m", [1, 2])
def test_vector_load_by_parts(m):
    space = build_space(uniform_refine(lshape(), 2), m)
    # constant fvec: int fvec . grad phi = 0 for phi vanishing on the boundary
    F = assemble_load(space, ProblemData(fvec=lambda x: np.array([1.5, -0.7])))
    assert np.abs(F).max() < 1e-14
    # fvec = (x, y): int fvec . grad phi = -int 2 phi
    F = assemble_load(space, ProblemData(fvec=lambda x: x.copy()))
    F2 = assemble_load(space, ProblemData(f=lambda x: np.full(len(x), -2.0)))
    np.testing.assert_allclose(F, F2, atol=1e-14)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_polynomial_reproduction(m):
    space = build_space(uniform_refine(lshape(), 1), m, dirichlet=False)
    poly = lambda p: (1 + p[:, 0] - 2 * p[:, 1]) ** m
    v = interpolate(space, poly)
    pts = np.random.default_rng(2).uniform(-1, 1, (200, 2))
    pts = pts[~((pts[:, 0] > 0) & (pts[:, 1] < 0))]
    np.testing.assert_allclose(evaluate(space, v, pts), poly(pts), rtol=1e-11, atol=1e-11)


def _random_refinement(mesh, rng, steps=3):
    parents = np.arange(mesh.n_elements)
    fine = mesh
    for _ in range(steps):
        marked = rng.choice(fine.n_elements, size=max(1, fine.n_elements // 3), replace=False)
        fine, p = refine_with_parents(fine, marked)
        parents = parents[p]
    return fine, parents


@pytest.mark.parametrize("m", [1, 2, 3])
def test_prolongation_is_exact_embedding(m):
    rng = np.random.default_rng(m)
    coarse = build_space(uniform_refine(lshape(), 1), m)
    fmesh, parent = _random_refinement(coarse.mesh, rng)
    fine = build_space(fmesh, m)
    v = rng.standard_normal(coarse.dim)
    w = prolong(coarse, fine, v, parent)
    Kc, Kf = assemble_a(coarse, ProblemData()), assemble_a(fine, ProblemData())
    assert energy_norm(Kf, w) == pytest.approx(energy_norm(Kc, v), rel=1e-12)
    pts = fmesh.vertices[fmesh.elements].mean(axis=1)
    np.testing.assert_allclose(evaluate(fine, w, pts), evaluate(coarse, v, pts), atol=1e-12)
    # the located parent map gives the same operator
    assert abs(prolongation_matrix(coarse, fine) - prolongation_matrix(coarse, fine, parent)).max() < 1e-14
    assert not np.any(prolong(coarse, fine, np.zeros(coarse.dim), parent))


def test_prolong_constant_without_constraints():
    coarse = build_space(lshape(), 1, dirichlet=False)
    fine = build_space(uniform_refine(lshape(), 2), 1, dirichlet=False)
    np.testing.assert_array_equal(prolong(coarse, fine, np.ones(coarse.dim)), np.ones(fine.dim))


def test_non_nested_rejected():
    a = build_space(uniform_refine(lshape(), 1), 1)
    b = build_space(uniform_refine(zshape(), 2), 1)
    with pytest.raises(NestingError):
        prolongation_matrix(a, b)
    with pytest.raises(NestingError):
        prolongation_matrix(build_space(uniform_refine(lshape(), 2), 1), a)
    with pytest.raises(NestingError):
        prolongation_matrix(a, build_space(uniform_refine(lshape(), 2), 2))


@pytest.mark.parametrize("m", [1, 2])
def test_galerkin_orthogonality(m):
    rng = np.random.default_rng(5)
    pr = lshape_dcr()
    coarse = build_space(uniform_refine(pr.mesh, 2), m)
    fmesh, parent = _random_refinement(coarse.mesh, rng)
    fine = build_space(fmesh, m)
    P = prolongation_matrix(coarse, fine, parent)
    Kh, Fh = assemble_a(fine, pr.data), assemble_load(fine, pr.data)
    KH, FH = assemble_a(coarse, pr.data), assemble_load(coarse, pr.data)
    uh = spla.spsolve(Kh.tocsc(), Fh)
    uH = spla.spsolve(KH.tocsc(), FH)
    e = uh - P @ uH
    for _ in range(5):
        v = P @ rng.standard_normal(coarse.dim)
        assert abs(e @ (Kh @ v)) <= 1e-10 * np.sqrt(e @ Kh @ e) * np.sqrt(v @ Kh @ v)


def test_galerkin_best_approximation():
    # for the symmetric a-problem the Galerkin solution minimises the energy error
    pr = lshape_dcr()
    rng = np.random.default_rng(7)
    ref_mesh = uniform_refine(pr.mesh, 5)
    ref = build_space(ref_mesh, 1)
    Kr = assemble_a(ref, pr.data)
    ur = spla.spsolve(Kr.tocsc(), assemble_load(ref, pr.data))
    for n in (2, 3):
        sp_n = build_space(uniform_refine(pr.mesh, n), 1)
        un = spla.spsolve(assemble_a(sp_n, pr.data).tocsc(), assemble_load(sp_n, pr.data))
        P = prolongation_matrix(sp_n, ref)
        err = energy_norm(Kr, ur - P @ un)
        for _ in range(10):
            cand = un + 0.1 * rng.standard_normal(sp_n.dim) * np.abs(un).max()
            assert err <= energy_norm(Kr, ur - P @ cand)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_random_stiffness_is_spd(m, seed):
    rng = np.random.default_rng(seed)
    mesh, _ = _random_refinement(zshape(), rng, steps=2)
    space = build_space(mesh, m)
    K = assemble_a(space, ProblemData())
    assert abs(K - K.T).max() <= 1e-12 * abs(K).max()
    v = rng.standard_normal(space.dim)
    assert v @ (K @ v) > 0
