"""Adaptive finite elements with iterative Zarantonello symmetrization.

Modules
-------
mesh          conforming triangulations, newest vertex bisection
fem           Lagrange spaces, assembly, prolongation
estimator     residual a posteriori estimator
solvers       multilevel pCG / V-cycle and direct solves
zarantonello  symmetrization step and its exact map
driver        the adaptive triple loop and run log
experiments   convergence, parameter, contraction and timing studies
"""

from .driver import AdaptiveConfig, RunLog, dorfler_mark, run
from .estimator import IndicatorField, estimate
from .fem import ProblemData, assemble_a, assemble_b, assemble_load, build_space, energy_norm, prolong
from .mesh import Triangulation, load_mesh, lshape, refine, save_mesh, uniform_refine, validate, zshape
from .problems import get_problem
from .solvers import MultilevelHierarchy, solve_direct, solver_step
from .zarantonello import ZarantonelloStep, estimate_delta, exact_map, step_rhs

__version__ = "0.1.0"
