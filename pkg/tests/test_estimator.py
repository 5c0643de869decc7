import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aisfem.estimator import IndicatorField, ResidualEstimator, estimate, restrict, write_indicators_csv
from aisfem.fem import ProblemData, build_space, interpolate
from aisfem.mesh import lshape, refine, reference_triangle, uniform_refine, unit_square, zshape
from aisfem.problems import lshape_dcr, zshape_convection

ONE = lambda x: np.ones(len(x))


def manufactured():
    """u = x y (1 - x - y) solves -Lap u + (1, 2).grad u + 3 u = f on the reference triangle."""
    u = lambda p: p[:, 0] * p[:, 1] * (1 - p[:, 0] - p[:, 1])

    def f(p):
        x, y = p[:, 0], p[:, 1]
        return 2 * x + 2 * y + (1 - 2 * x - y) * y + 2 * (1 - x - 2 * y) * x + 3 * x * y * (1 - x - y)

    data = ProblemData(b=lambda p: np.array([1.0, 2.0]), c=lambda p: np.full(len(p), 3.0), f=f)
    return u, data


@pytest.mark.parametrize("refinements", [0, 1, 3])
def test_exact_polynomial_solution_has_zero_estimator(refinements):
    u, data = manufactured()
    space = build_space(uniform_refine(reference_triangle(), refinements), 3)
    eta = estimate(space, data, interpolate(space, u))
    assert eta.total < 1e-26


@pytest.mark.parametrize("factory", [unit_square, lshape, zshape])
def test_zero_function_unit_load(factory):
    mesh = uniform_refine(factory(), 2)
    space = build_space(mesh, 1)
    eta = estimate(space, ProblemData(f=ONE), np.zeros(space.dim))
    np.testing.assert_allclose(eta.values, mesh.diameters**2 * mesh.areas, rtol=1e-12, atol=0)


def test_p1_hat_jumps_by_hand():
    # hat function of the centre of the square split into four triangles:
    # gradients (0,2), (-2,0), (0,-2), (2,0); each interior edge has length
    # sqrt(2)/2 and normal jump 2 sqrt(2), each triangle has diameter 1 and
    # two interior edges, so eta_T^2 = 2 * 8 * sqrt(2)/2 = 8 sqrt(2)
    space = build_space(uniform_refine(unit_square(), 1), 1)
    assert space.dim == 1
    eta = estimate(space, ProblemData(), np.ones(1))
    np.testing.assert_allclose(eta.values, np.full(4, 8 * np.sqrt(2)), rtol=1e-13)
    assert eta.total == pytest.approx(32 * np.sqrt(2), rel=1e-13)


def test_p2_quadratic_volume_residual():
    # v = x^2 is in P2 without jumps; -Lap v = -2, so eta_T^2 = 4 h_T^2 |T|
    mesh = uniform_refine(lshape(), 2)
    space = build_space(mesh, 2, dirichlet=False)
    v = interpolate(space, lambda p: p[:, 0] ** 2)
    eta = estimate(space, ProblemData(), v)
    np.testing.assert_allclose(eta.values, 4 * mesh.diameters**2 * mesh.areas, rtol=1e-12)


def test_constant_vector_load_is_invisible():
    pr = lshape_dcr()
    space = build_space(uniform_refine(pr.mesh, 2), 2)
    v = np.random.default_rng(0).standard_normal(space.dim)
    base = estimate(space, pr.data, v).values
    data = ProblemData(b=pr.data.b, c=pr.data.c, f=pr.data.f, fvec=lambda x: np.array([3.0, -1.0]))
    np.testing.assert_allclose(estimate(space, data, v).values, base, rtol=1e-11)


def test_vector_load_divergence_matches_scalar_load():
    # f = 0, fvec = (x, y): f - div fvec = -2, identical to f = -2 away from the boundary jumps
    mesh = uniform_refine(lshape(), 2)
    space = build_space(mesh, 1)
    v = np.random.default_rng(1).standard_normal(space.dim)
    a = estimate(space, ProblemData(fvec=lambda x: x.copy(), div_fvec=lambda x: np.full(len(x), 2.0)), v)
    b = estimate(space, ProblemData(f=lambda x: np.full(len(x), -2.0)), v)
    # the jump of fvec.n across interior edges vanishes since fvec is continuous
    np.testing.assert_allclose(a.values, b.values, rtol=1e-11)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3), st.integers(0, 1000))
def test_joint_scaling(s, seed):
    pr = zshape_convection()
    space = build_space(uniform_refine(pr.mesh, 1), 2)
    v = np.random.default_rng(seed).standard_normal(space.dim)
    scaled = ProblemData(b=pr.data.b, f=lambda x: s * pr.data.f(x))
    np.testing.assert_allclose(estimate(space, scaled, s * v).values, s**2 * estimate(space, pr.data, v).values,
                               rtol=1e-10, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_indicators_nonnegative_and_total(seed):
    rng = np.random.default_rng(seed)
    pr = lshape_dcr()
    mesh = refine(pr.mesh, rng.choice(6, size=3, replace=False))
    space = build_space(mesh, int(rng.integers(1, 4)))
    eta = estimate(space, pr.data, rng.standard_normal(space.dim))
    assert np.all(eta.values >= 0)
    assert eta.total == pytest.approx(np.sum(eta.values), rel=1e-12)
    assert eta.eta == pytest.approx(np.sqrt(eta.total))


def test_dimension_mismatch():
    space = build_space(uniform_refine(lshape(), 1), 1)
    with pytest.raises(ValueError):
        ResidualEstimator(space, ProblemData())(np.zeros(space.dim + 1))


def test_precomputed_matches_fresh():
    pr = lshape_dcr()
    space = build_space(uniform_refine(pr.mesh, 2), 2)
    est = ResidualEstimator(space, pr.data)
    rng = np.random.default_rng(4)
    for _ in range(3):
        v = rng.standard_normal(space.dim)
        np.testing.assert_array_equal(est(v).values, estimate(space, pr.data, v).values)


def test_restrict():
    field = IndicatorField(np.array([4.0, 1.0, 9.0, 0.0, 2.0]))
    assert restrict(field, np.arange(5)) == pytest.approx(field.eta)
    assert restrict(field, []) == 0.0
    u1, u2 = [0, 3], [1, 2, 4]
    assert restrict(field, u1 + u2) ** 2 == pytest.approx(restrict(field, u1) ** 2 + restrict(field, u2) ** 2)
    with pytest.raises(IndexError):
        restrict(field, [5])
    with pytest.raises(IndexError):
        restrict(field, [-1])


def test_indicator_csv(tmp_path):
    mesh = uniform_refine(unit_square(), 1)
    space = build_space(mesh, 1)
    eta = estimate(space, ProblemData(f=ONE), np.zeros(1))
    path = tmp_path / "eta.csv"
    write_indicators_csv(eta, path, mesh)
    rows = path.read_text().splitlines()
    assert rows[0] == "element,x,y,eta_sq"
    assert len(rows) == mesh.n_elements + 1
    assert float(rows[1].split(",")[-1]) == eta.values[0]
