import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aisfem.mesh import (
    C_CHILD,
    MeshError,
    Triangulation,
    load_mesh,
    lshape,
    read_mesh,
    refine,
    refine_with_parents,
    reference_triangle,
    save_mesh,
    uniform_refine,
    unit_square,
    validate,
    write_mesh,
    zshape,
)

SQUARE_V = [(0, 0), (1, 0), (1, 1), (0, 1)]
SQUARE_B = [(0, 1), (1, 2), (2, 3), (3, 0)]


def square(elements):
    return Triangulation(np.array(SQUARE_V, float), np.array(elements), np.array(SQUARE_B))


def test_hand_checked_square_is_valid():
    assert validate(square([(0, 1, 2), (0, 2, 3)])) == []


def test_negative_orientation_is_reported():
    viol = validate(square([(0, 2, 1), (0, 2, 3)]))
    assert len(viol) == 1
    assert viol[0].startswith("orientation") and "[0]" in viol[0]


def test_hanging_vertex_without_closure():
    # bisect element 0 of the square across the diagonal but leave element 1 intact
    v = np.array(SQUARE_V + [(0.5, 0.5)], float)
    t = np.array([(1, 2, 4), (0, 1, 4), (0, 2, 3)])
    mesh = Triangulation(v, t, np.array(SQUARE_B))
    # three elements touch the diagonal: two halves on one side, the whole edge on the other
    p = v[t]
    on_diag = [
        e for e in range(3)
        if sum(abs(q[0] - q[1]) < 1e-14 for q in p[e]) >= 2
    ]
    assert len(on_diag) == 3
    viol = validate(mesh)
    assert any(s.startswith("conformity") and "4" in s for s in viol)


def test_structural_violations():
    m = unit_square()
    assert any(s.startswith("boundary") for s in validate(Triangulation(m.vertices, m.elements, m.boundary_edges[:3])))
    assert any(s.startswith("index") for s in validate(Triangulation(m.vertices, [(0, 1, 9)], m.boundary_edges)))
    extra = Triangulation(np.vstack([m.vertices, [[5.0, 5.0]]]), m.elements, m.boundary_edges)
    assert any(s.startswith("unused") for s in validate(extra))
    assert validate(Triangulation(np.zeros((0, 2)), np.zeros((0, 3), int), np.zeros((0, 2), int)))[0].startswith("empty")


@pytest.mark.parametrize("factory", [unit_square, reference_triangle, lshape, zshape])
def test_builtin_meshes_valid(factory):
    assert validate(factory()) == []


def test_lshape_domain():
    m = lshape()
    assert (m.n_elements, m.n_vertices) == (6, 8)
    assert m.areas.sum() == pytest.approx(3.0)
    c = m.vertices[m.elements].mean(axis=1)
    assert not np.any((c[:, 0] > 0) & (c[:, 1] < 0))


def test_zshape_domain():
    m = zshape()
    assert m.areas.sum() == pytest.approx(3.5)
    # removed triangle conv{(0,0), (-1,0), (-1,-1)}: x < 0, y > x, y < 0
    c = m.vertices[m.elements].mean(axis=1)
    inside = (c[:, 0] < 0) & (c[:, 1] < 0) & (c[:, 1] > c[:, 0])
    assert not inside.any()
    assert np.abs(m.vertices).max() == 1.0


def test_empty_marking_is_identity():
    m = lshape()
    assert refine(m, []) == m


def test_square_mark_one_gives_four():
    m = refine(unit_square(), [0])
    assert m.n_elements == 4
    assert validate(m) == []


def test_mark_all_at_least_doubles():
    m = zshape()
    r = refine(m, np.arange(m.n_elements))
    assert r.n_elements >= 2 * m.n_elements
    assert validate(r) == []


def test_uniform_refine_definition():
    m = unit_square()
    assert uniform_refine(m, 0) == m
    assert uniform_refine(m, 1) == refine(m, np.arange(m.n_elements))
    with pytest.raises(MeshError):
        uniform_refine(m, -1)


@pytest.mark.parametrize("factory", [unit_square, lshape, zshape])
def test_uniform_growth_factor(factory):
    m = factory()
    for _ in range(4):
        r = uniform_refine(m, 1)
        assert 2 * m.n_elements <= r.n_elements <= C_CHILD * m.n_elements
        m = r


def test_uniform_refinement_shape_regular():
    def min_angle(m):
        p = m.vertices[m.elements]
        ang = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = (a * b).sum(1) / np.linalg.norm(a, axis=1) / np.linalg.norm(b, axis=1)
            ang.append(np.arccos(np.clip(cos, -1, 1)))
        return np.min(ang)

    for factory in (lshape, zshape):
        m = factory()
        a0 = min_angle(m)
        for _ in range(8):
            m = uniform_refine(m, 1)
        assert min_angle(m) >= a0 - 1e-12


def test_invalid_marking_rejected():
    m = lshape()
    with pytest.raises(MeshError, match="index 6"):
        refine(m, [6])
    with pytest.raises(MeshError, match="index -1"):
        refine(m, [-1])
    with pytest.raises(MeshError, match="duplicate"):
        refine(m, [1, 1])


def test_round_trip_and_file(tmp_path):
    m = uniform_refine(zshape(), 3)
    assert load_mesh(save_mesh(m)) == Triangulation(m.vertices, m.elements, m.boundary_edges)
    path = tmp_path / "z.mesh"
    write_mesh(m, path)
    assert read_mesh(path).n_elements == m.n_elements


def test_parse_errors_name_line():
    with pytest.raises(MeshError, match="no elements"):
        load_mesh("3 0 0\n0 0\n1 0\n0 1\n")
    with pytest.raises(MeshError, match="line 3"):
        load_mesh("3 1 0\n0 0\n1 x\n0 1\n0 1 2\n")
    with pytest.raises(MeshError, match="line 5"):
        load_mesh("3 1 0\n0 0\n1 0\n0 1\n0 1 7\n")
    with pytest.raises(MeshError):
        load_mesh("")


def _marks(draw_mesh_size):
    return st.lists(st.integers(0, draw_mesh_size - 1), unique=True, max_size=draw_mesh_size)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_random_refinement_properties(data):
    mesh = data.draw(st.sampled_from([lshape(), zshape(), unit_square()]))
    for _ in range(data.draw(st.integers(1, 5))):
        marked = data.draw(st.lists(st.integers(0, mesh.n_elements - 1), unique=True, max_size=mesh.n_elements))
        new, parent = refine_with_parents(mesh, marked)
        assert validate(new) == []
        # nestedness: old vertices survive at the same indices
        assert np.array_equal(new.vertices[: mesh.n_vertices], mesh.vertices)
        # every marked element is gone, every parent is covered exactly by its children
        counts = np.bincount(parent, minlength=mesh.n_elements)
        assert np.all(counts[marked] >= 2)
        assert counts.max() <= C_CHILD and counts.min() >= 1
        area = np.bincount(parent, new.areas, minlength=mesh.n_elements)
        np.testing.assert_allclose(area, mesh.areas, rtol=1e-12)
        assert np.all(new.generation[counts[parent] > 1] > mesh.generation[parent][counts[parent] > 1])
        # determinism
        again, p2 = refine_with_parents(mesh, list(reversed(marked)))
        assert again == new and np.array_equal(p2, parent)
        mesh = new
