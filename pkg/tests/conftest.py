import numpy as np
import pytest

from aisfem.driver import AdaptiveConfig, SolverState, dorfler_mark
from aisfem.mesh import refine_with_parents
from aisfem.solvers import solve_direct


def adaptive_levels(problem, degree=1, n_levels=8, coarse_cap=20, theta=0.5):
    """Yield the solver state on each level of a Doerfler-refined hierarchy.

    Marking uses the estimator of the exact discrete solution, so the
    meshes are those of an adaptive run with exact solves.  The state is
    mutated in place between yields.
    """
    cfg = AdaptiveConfig(degree=degree, coarse_cap=coarse_cap)
    state = SolverState(problem.mesh, problem.data, cfg)
    for ell in range(n_levels):
        state.ell = ell
        u = solve_direct(state.B, state.F)
        yield state
        if ell == n_levels - 1:
            return
        marked = dorfler_mark(state.estimator(u), theta)
        mesh, parent = refine_with_parents(state.mesh, marked)
        state.set_mesh(mesh, parent)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
