"""Conforming triangulations and newest-vertex-bisection refinement.

Every element is stored as a vertex triple ``(i, j, k)`` with positive
orientation.  The refinement edge of an element is the edge ``i--j``
between its first two vertices; ``k`` is the newest vertex.  Bisection
keeps this convention, so refinement edges are inherited without any
extra bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "MeshError",
    "Triangulation",
    "validate",
    "refine",
    "refine_with_parents",
    "uniform_refine",
    "load_mesh",
    "save_mesh",
    "read_mesh",
    "write_mesh",
    "unit_square",
    "lshape",
    "zshape",
    "reference_triangle",
]

# maximal number of children per bisection pass (green/blue/bisec3 patterns)
C_CHILD = 4


class MeshError(ValueError):
    """Raised for malformed meshes, marked sets or mesh files."""


@dataclass(frozen=True, eq=False)
class Triangulation:
    """Immutable 2D triangulation.

    Parameters
    ----------
    vertices : (V, 2) float array
    elements : (N, 3) int array, refinement edge between columns 0 and 1
    boundary_edges : (B, 2) int array of Dirichlet boundary edges
    generation : (N,) int array, bisection depth of each element
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    generation: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        t = np.ascontiguousarray(self.elements, dtype=np.int64).reshape(-1, 3)
        b = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        g = self.generation
        g = np.zeros(len(t), dtype=np.int64) if g is None else np.asarray(g, dtype=np.int64)
        for a in (v, t, b, g):
            a.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "elements", t)
        object.__setattr__(self, "boundary_edges", b)
        object.__setattr__(self, "generation", g)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def __len__(self):
        return len(self.elements)

    def __eq__(self, other):
        if not isinstance(other, Triangulation):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.elements, other.elements)
            and np.array_equal(self.boundary_edges, other.boundary_edges)
            and np.array_equal(self.generation, other.generation)
        )

    __hash__ = object.__hash__

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, shape (E, 2)."""
        return self._edge_data[0]

    @cached_property
    def element_edges(self) -> np.ndarray:
        """Edge index of local edges (0-1, 1-2, 2-0) per element, shape (N, 3)."""
        return self._edge_data[1]

    @cached_property
    def _edge_data(self):
        t = self.elements
        loc = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        loc = np.sort(loc, axis=1)
        key = loc[:, 0] * max(self.n_vertices, 1) + loc[:, 1]
        _, first, inverse = np.unique(key, return_index=True, return_inverse=True)
        edges = loc[first]
        return edges, inverse.reshape(-1, 3)

    @cached_property
    def edge_elements(self) -> np.ndarray:
        """Adjacent elements per edge, shape (E, 2); second column -1 on the boundary.

        The first column holds the lower element index.
        """
        ne = len(self.edges)
        ee = self.element_edges.ravel()
        el = np.repeat(np.arange(self.n_elements), 3)
        order = np.argsort(ee, kind="stable")
        ee, el = ee[order], el[order]
        out = np.full((ne, 2), -1, dtype=np.int64)
        counts = np.bincount(ee, minlength=ne)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        out[:, 0] = el[starts]
        has2 = counts >= 2
        out[has2, 1] = el[starts[has2] + 1]
        return out

    @cached_property
    def edge_counts(self) -> np.ndarray:
        return np.bincount(self.element_edges.ravel(), minlength=len(self.edges))

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def diameters(self) -> np.ndarray:
        """Longest edge length of each element."""
        p = self.vertices[self.elements]
        lens = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        return lens.max(axis=1)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @cached_property
    def boundary_edge_mask(self) -> np.ndarray:
        """True for edges listed in ``boundary_edges``."""
        nv = max(self.n_vertices, 1)
        ekey = self.edges[:, 0] * nv + self.edges[:, 1]
        b = np.sort(self.boundary_edges, axis=1)
        bkey = b[:, 0] * nv + b[:, 1]
        return np.isin(ekey, bkey)


def validate(mesh: Triangulation) -> list[str]:
    """Return a list of invariant violations; empty iff the mesh is valid."""
    out = []
    V, N = mesh.n_vertices, mesh.n_elements
    t, b = mesh.elements, mesh.boundary_edges
    if N == 0:
        out.append("empty: mesh has no elements")
        return out
    if t.min() < 0 or t.max() >= V:
        bad = np.where((t < 0).any(axis=1) | (t >= V).any(axis=1))[0]
        out.append(f"index: elements {bad.tolist()} reference missing vertices")
        return out
    if len(b) and (b.min() < 0 or b.max() >= V):
        out.append("index: boundary edges reference missing vertices")
        return out
    degenerate = np.where((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))[0]
    if len(degenerate):
        out.append(f"degenerate: elements {degenerate.tolist()} repeat a vertex")
    neg = np.where(mesh.areas <= 0)[0]
    if len(neg):
        out.append(f"orientation: elements {neg.tolist()} have nonpositive signed area")
    counts = mesh.edge_counts
    over = np.where(counts > 2)[0]
    if len(over):
        out.append(f"conformity: edges {mesh.edges[over].tolist()} shared by more than two elements")
    # a hanging vertex lies in the interior of some edge
    single = np.where(counts == 1)[0]
    hanging = _hanging_vertices(mesh, single)
    if hanging:
        out.append(f"conformity: hanging vertices {hanging}")
    used = np.zeros(V, dtype=bool)
    used[t.ravel()] = True
    if not used.all():
        out.append(f"unused: vertices {np.where(~used)[0].tolist()} belong to no element")
    if len(mesh.generation) != N or (mesh.generation < 0).any():
        out.append(f"generation: expected {N} nonnegative entries")
    # boundary edges of the element graph vs boundary_edges
    nv = max(V, 1)
    bs = np.sort(b, axis=1)
    bkey = bs[:, 0] * nv + bs[:, 1]
    uniq, cnt = np.unique(bkey, return_counts=True)
    dup = uniq[cnt > 1]
    if len(dup):
        out.append(f"boundary: edges {[(int(k // nv), int(k % nv)) for k in dup]} listed twice")
    ekey = mesh.edges[single, 0] * nv + mesh.edges[single, 1]
    missing = np.setdiff1d(ekey, bkey)
    if len(missing) and not hanging:
        out.append(f"boundary: edges {[(int(k // nv), int(k % nv)) for k in missing]} missing from boundary_edges")
    extra = np.setdiff1d(bkey, ekey)
    if len(extra):
        out.append(f"boundary: listed edges {[(int(k // nv), int(k % nv)) for k in extra]} are not boundary edges")
    return out


def _hanging_vertices(mesh, single_edges):
    """Vertices lying strictly inside a single-element edge."""
    if len(single_edges) == 0:
        return []
    p = mesh.vertices
    e = mesh.edges[single_edges]
    a, c = p[e[:, 0]], p[e[:, 1]]
    # endpoints of other single edges are the only candidates
    cand = np.unique(e)
    found = set()
    d = c - a
    L2 = (d ** 2).sum(axis=1)
    for v in cand:
        x = p[v]
        s = ((x - a) * d).sum(axis=1) / L2
        cross = d[:, 0] * (x[1] - a[:, 1]) - d[:, 1] * (x[0] - a[:, 0])
        hit = (np.abs(cross) <= 1e-12 * L2) & (s > 1e-12) & (s < 1 - 1e-12)
        if hit.any():
            found.add(int(v))
    return sorted(found)


def refine_with_parents(mesh: Triangulation, marked) -> tuple[Triangulation, np.ndarray]:
    """Newest-vertex bisection of ``marked`` elements plus conforming closure.

    Returns the refined mesh and, for every new element, the index of the
    coarse element it lies in.  Unrefined elements are copied unchanged and
    keep their relative order in front of the children.
    """
    marked = _check_marked(mesh, marked)
    t = mesh.elements
    N, V = mesh.n_elements, mesh.n_vertices
    if len(marked) == 0:
        return mesh, np.arange(N)
    el2ed = mesh.element_edges
    nE = len(mesh.edges)
    emark = np.zeros(nE, dtype=bool)
    emark[el2ed[marked, 0]] = True
    # closure: any element with a marked edge gets its refinement edge marked
    while True:
        hit = emark[el2ed].any(axis=1)
        need = hit & ~emark[el2ed[:, 0]]
        if not need.any():
            break
        emark[el2ed[need, 0]] = True

    new_ids = np.full(nE, -1, dtype=np.int64)
    idx = np.where(emark)[0]
    new_ids[idx] = V + np.arange(len(idx))
    ed = mesh.edges[idx]
    coords = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[ed[:, 0]] + mesh.vertices[ed[:, 1]])])

    m = new_ids[el2ed]  # (N, 3) midpoints on edges 01, 12, 20
    has = m >= 0
    n1, n2, n3 = t[:, 0], t[:, 1], t[:, 2]
    m1, m2, m3 = m[:, 0], m[:, 1], m[:, 2]
    none = ~has[:, 0]
    b1 = has[:, 0] & ~has[:, 1] & ~has[:, 2]
    b12 = has[:, 0] & has[:, 1] & ~has[:, 2]
    b13 = has[:, 0] & ~has[:, 1] & has[:, 2]
    b123 = has[:, 0] & has[:, 1] & has[:, 2]

    gen = mesh.generation
    blocks, parents, gens = [], [], []

    def emit(mask, tris, dg):
        ids = np.where(mask)[0]
        if len(ids) == 0:
            return
        arr = np.stack([np.stack(tr, axis=1)[ids] for tr in tris], axis=1).reshape(-1, 3)
        blocks.append(arr)
        parents.append(np.repeat(ids, len(tris)))
        gens.append((gen[ids][:, None] + np.asarray(dg)[None, :]).ravel())

    emit(none, [(n1, n2, n3)], [0])
    emit(b1, [(n3, n1, m1), (n2, n3, m1)], [1, 1])
    emit(b12, [(n3, n1, m1), (m1, n2, m2), (n3, m1, m2)], [1, 2, 2])
    emit(b13, [(m1, n3, m3), (n1, m1, m3), (n2, n3, m1)], [2, 2, 1])
    emit(b123, [(m1, n3, m3), (n1, m1, m3), (m1, n2, m2), (n3, m1, m2)], [2, 2, 2, 2])

    # children of one parent are stored contiguously in parent order
    elements = np.vstack(blocks)
    parent = np.concatenate(parents)
    generation = np.concatenate(gens)
    unref = parent[: none.sum()]
    order = np.concatenate([np.arange(len(unref)), len(unref) + np.argsort(parent[len(unref):], kind="stable")])
    elements, parent, generation = elements[order], parent[order], generation[order]

    # boundary edges
    b = mesh.boundary_edges
    if len(b):
        nv = max(V, 1)
        ekey = mesh.edges[:, 0] * nv + mesh.edges[:, 1]
        bs = np.sort(b, axis=1)
        pos = np.searchsorted(ekey, bs[:, 0] * nv + bs[:, 1])
        mid = new_ids[pos]
        split = mid >= 0
        # each split edge is replaced in place by its two halves
        reps = np.where(split, 2, 1)
        boundary = np.repeat(b, reps, axis=0)
        first = np.cumsum(reps) - reps
        s = first[split]
        boundary[s, 1] = mid[split]
        boundary[s + 1, 0] = mid[split]
    else:
        boundary = b
    return Triangulation(coords, elements, boundary, generation), parent


def _check_marked(mesh, marked):
    marked = np.asarray(marked, dtype=np.int64).ravel() if marked is not None else np.zeros(0, np.int64)
    if len(marked) == 0:
        return marked
    bad = marked[(marked < 0) | (marked >= mesh.n_elements)]
    if len(bad):
        raise MeshError(f"invalid marked element index {int(bad[0])} (mesh has {mesh.n_elements} elements)")
    if len(np.unique(marked)) != len(marked):
        raise MeshError("marked set contains duplicate indices")
    return marked


def refine(mesh: Triangulation, marked) -> Triangulation:
    """Coarsest conforming NVB refinement in which every marked element is bisected."""
    return refine_with_parents(mesh, marked)[0]


def uniform_refine(mesh: Triangulation, n: int = 1) -> Triangulation:
    if n < 0:
        raise MeshError("number of refinements must be nonnegative")
    for _ in range(n):
        mesh = refine(mesh, np.arange(mesh.n_elements))
    return mesh


# ---------------------------------------------------------------- text format

def save_mesh(mesh: Triangulation) -> str:
    lines = [f"{mesh.n_vertices} {mesh.n_elements} {len(mesh.boundary_edges)}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.elements.tolist()]
    lines += [f"{i} {j}" for i, j in mesh.boundary_edges.tolist()]
    return "\n".join(lines) + "\n"


def load_mesh(text: str) -> Triangulation:
    """Parse the line-based mesh format (``V N B`` header, vertices, elements, boundary)."""
    lines = [(n, ln.split()) for n, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise MeshError("line 1: missing header 'V N B'")

    def ints(n, parts, count):
        if len(parts) != count:
            raise MeshError(f"line {n}: expected {count} integers, got {len(parts)} fields")
        try:
            return [int(p) for p in parts]
        except ValueError:
            raise MeshError(f"line {n}: malformed integer in {' '.join(parts)!r}") from None

    n0, head = lines[0]
    V, N, B = ints(n0, head, 3)
    if min(V, N, B) < 0:
        raise MeshError(f"line {n0}: negative count")
    if N == 0:
        raise MeshError(f"line {n0}: mesh has no elements")
    if len(lines) != 1 + V + N + B:
        raise MeshError(f"line {lines[-1][0]}: expected {1 + V + N + B} nonblank lines, found {len(lines)}")
    verts = []
    for n, parts in lines[1:1 + V]:
        if len(parts) != 2:
            raise MeshError(f"line {n}: expected 2 coordinates")
        try:
            verts.append([float(p) for p in parts])
        except ValueError:
            raise MeshError(f"line {n}: malformed coordinate in {' '.join(parts)!r}") from None
    elems = []
    for n, parts in lines[1 + V:1 + V + N]:
        row = ints(n, parts, 3)
        if min(row) < 0 or max(row) >= V:
            raise MeshError(f"line {n}: vertex index out of range 0..{V - 1}")
        elems.append(row)
    bnd = []
    for n, parts in lines[1 + V + N:]:
        row = ints(n, parts, 2)
        if min(row) < 0 or max(row) >= V:
            raise MeshError(f"line {n}: vertex index out of range 0..{V - 1}")
        bnd.append(row)
    return Triangulation(np.array(verts), np.array(elems), np.array(bnd).reshape(-1, 2))


def read_mesh(path) -> Triangulation:
    with open(path) as fh:
        return load_mesh(fh.read())


def write_mesh(mesh: Triangulation, path) -> None:
    with open(path, "w") as fh:
        fh.write(save_mesh(mesh))


# ---------------------------------------------------------------- built-in meshes

def _closed_boundary(cycle):
    return np.array([(cycle[i], cycle[(i + 1) % len(cycle)]) for i in range(len(cycle))])


def unit_square() -> Triangulation:
    """Two triangles on (0,1)^2 with the diagonal as common refinement edge."""
    v = [(0, 0), (1, 0), (1, 1), (0, 1)]
    t = [(2, 0, 1), (0, 2, 3)]
    return Triangulation(np.array(v, float), np.array(t), _closed_boundary([0, 1, 2, 3]))


def reference_triangle() -> Triangulation:
    v = [(0, 0), (1, 0), (0, 1)]
    return Triangulation(np.array(v, float), np.array([(1, 2, 0)]), _closed_boundary([0, 1, 2]))


def lshape() -> Triangulation:
    """(-1,1)^2 minus [0,1]x[-1,0]: three unit squares, six triangles."""
    v = [(-1, -1), (0, -1), (0, 0), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)]
    # hypotenuses first, all diagonals through the reentrant corner (0,0)
    t = [(0, 2, 7), (2, 0, 1), (2, 4, 5), (4, 2, 3), (2, 6, 7), (6, 2, 5)]
    return Triangulation(np.array(v, float), np.array(t), _closed_boundary(list(range(8))))


def zshape() -> Triangulation:
    """(-1,1)^2 minus conv{(0,0), (-1,0), (-1,-1)}."""
    v = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (0, 0)]
    t = [
        (8, 0, 1),   # remaining half of the lower-left square
        (3, 1, 2), (1, 3, 8),
        (8, 4, 5), (4, 8, 3),
        (8, 6, 7), (6, 8, 5),
    ]
    return Triangulation(np.array(v, float), np.array(t), _closed_boundary([0, 1, 2, 3, 4, 5, 6, 7, 8]))
