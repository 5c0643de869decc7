"""Adaptive loop with inexact Zarantonello symmetrization and an iterative solver.

For every mesh level the loop runs symmetrization steps k = 1, 2, ... and
inside each of them algebraic solver steps j = 1, 2, ...  The solver loop
stops once

    |||u^{k,j} - u^{k,j-1}||| <= lambda_alg [lambda_sym eta(u^{k,j}) + |||u^{k,j} - u^{k-1,jbar}|||],

the symmetrization loop once

    |||u^{k,jbar} - u^{k-1,jbar}||| <= lambda_sym eta(u^{k,jbar}).

Then Doerfler marking, newest vertex bisection and nested iteration move to
the next level.  Every iterate (l, k, j) is recorded in a :class:`RunLog`.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .estimator import IndicatorField, ResidualEstimator
from .fem import (
    FiniteElementSpace,
    ProblemData,
    assemble_a,
    assemble_b,
    assemble_load,
    build_space,
    prolongation_matrix,
)
from .mesh import Triangulation, refine_with_parents
from .solvers import SOLVER_KINDS, IterativeSolver, MultilevelHierarchy, changed_dofs, solve_direct
from .zarantonello import ZarantonelloStep, exact_map, step_rhs

__all__ = [
    "AdaptiveConfig",
    "IndexTriple",
    "StepRecord",
    "LevelRecord",
    "RunLog",
    "SolverState",
    "ReferenceSolution",
    "dorfler_mark",
    "inner_j_loop",
    "outer_k_loop",
    "run",
    "quasi_error",
    "reliable_bound",
    "RUNLOG_COLUMNS",
]

RUNLOG_COLUMNS = (
    "ell", "k", "j", "step", "nT", "dim", "eta", "diff_alg", "diff_sym",
    "cost_cum", "time_s", "delta_quasi", "case",
)


@dataclass
class AdaptiveConfig:
    """Inputs of the adaptive loop.

    At least one stop rule (``max_dim``, ``eta_tol``, ``tau``, ``max_steps``
    or ``max_levels``) must be set.  ``zero_floor`` is the relative size
    (w.r.t. the initial estimator) below which a quantity counts as zero;
    it makes ``tau = 0`` and vanishing estimators terminate in floating point.
    """

    theta: float = 0.5
    lambda_sym: float = 0.1
    lambda_alg: float = 0.1
    delta: float = 0.5
    C_mark: float = 1.0
    degree: int = 1
    max_dim: int | None = 10**5
    eta_tol: float | None = None
    tau: float | None = None
    max_steps: int | None = None
    max_levels: int | None = None
    solver_kind: str = "mg-vcycle"
    coarse_cap: int = 500
    q_cap: float = 0.9
    j_cap: int = 10**4
    k_cap: int = 1000
    q_data: int = 2
    diagnostics: bool = False
    zero_floor: float = 1e-10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        for name in ("lambda_sym", "lambda_alg", "delta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.C_mark >= 1:
            raise ValueError(f"C_mark must be >= 1, got {self.C_mark}")
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError(f"degree must be a positive integer, got {self.degree}")
        if self.solver_kind not in SOLVER_KINDS:
            raise ValueError(f"unknown solver kind {self.solver_kind!r}")
        if not 0 < self.q_cap < 1:
            raise ValueError("q_cap must lie in (0, 1)")
        if self.j_cap < 1 or self.k_cap < 1:
            raise ValueError("safety caps must be positive")
        if self.tau is not None and self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.eta_tol is not None and self.eta_tol <= 0:
            raise ValueError("eta_tol must be positive")
        rules = (self.max_dim, self.eta_tol, self.tau, self.max_steps, self.max_levels)
        if all(r is None for r in rules):
            raise ValueError("no stop rule configured")

    def replace(self, **kw) -> "AdaptiveConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return AdaptiveConfig(**vals)


@dataclass(frozen=True, order=True)
class IndexTriple:
    ell: int
    k: int
    j: int


@dataclass
class StepRecord:
    ell: int
    k: int
    j: int
    step: int
    nT: int
    dim: int
    eta: float
    diff_alg: float
    diff_sym: float
    cost_cum: int
    time_s: float
    delta_quasi: float = math.nan
    case: str = ""
    dim_cum: int = 0
    bound: float = math.nan
    err_ref: float = math.nan
    q_alg: float = math.nan

    @property
    def index(self) -> IndexTriple:
        return IndexTriple(self.ell, self.k, self.j)


@dataclass
class LevelRecord:
    ell: int
    nT: int
    dim: int
    k_bar: int
    first_step: int
    last_step: int
    eta: float
    n_marked: int = 0
    q_alg: float = math.nan
    q_sym: float = math.nan
    qbar_sym: float = math.nan
    time_s: float = math.nan

    @property
    def solver_steps(self) -> int:
        """|l, kbar, jbar| - |l, 0, 0|."""
        return self.last_step - self.first_step


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    levels: list[LevelRecord] = field(default_factory=list)
    status: str = "running"
    message: str = ""
    C_mesh: float = math.nan
    q_cap_exceeded: bool = False

    @property
    def stopped_by_rule(self) -> bool:
        return self.status in ("dim", "eta", "tolerance", "steps", "levels", "exact")

    def append(self, rec: StepRecord):
        if self.steps:
            last = self.steps[-1]
            if rec.index <= last.index or rec.cost_cum <= last.cost_cum:
                raise RuntimeError(f"log records out of order at {rec.index}")
        self.steps.append(rec)

    def final_records(self) -> list[StepRecord]:
        """The record (l, kbar, jbar) of every completed level."""
        return [self.steps[lv.last_step - 1] for lv in self.levels]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_COLUMNS)
            for r in self.steps:
                w.writerow([
                    r.ell, r.k, r.j, r.step, r.nT, r.dim, _num(r.eta), _num(r.diff_alg), _num(r.diff_sym),
                    r.cost_cum, f"{r.time_s:.6f}", "" if math.isnan(r.delta_quasi) else _num(r.delta_quasi), r.case,
                ])

    def write_levels_csv(self, path) -> None:
        cols = ("ell", "nT", "dim", "k_bar", "solver_steps", "eta", "n_marked", "q_alg", "q_sym", "qbar_sym", "time_s")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for lv in self.levels:
                w.writerow([_num(v) if isinstance(v, float) else v for v in (getattr(lv, c) for c in cols)])


def _num(v) -> str:
    """Shortest round-trip text of a float (plain Python repr, also for numpy scalars)."""
    return repr(float(v))


def dorfler_mark(indicators, theta: float) -> np.ndarray:
    """Minimal set M with theta * sum(eta^2) <= sum_{M} eta^2.

    Elements are taken by decreasing indicator, ties by ascending index.  An
    all-zero field gives the empty set.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    eta2 = np.asarray(getattr(indicators, "values", indicators), dtype=float)
    if len(eta2) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-eta2, kind="stable")
    cum = np.cumsum(eta2[order])
    total = cum[-1]
    if total <= 0:
        return np.zeros(0, dtype=np.int64)
    n = int(np.searchsorted(cum, theta * total, side="left")) + 1
    return np.sort(order[:min(n, len(order))])


class ReferenceSolution:
    """Fine direct solve used to measure |||u_ref - v||| for coarse iterates."""

    def __init__(self, space: FiniteElementSpace, u, stiffness):
        self.space = space
        self.u = np.asarray(u, dtype=float)
        self.K = stiffness
        self._P = {}

    def error(self, space: FiniteElementSpace, v) -> float:
        key = id(space)
        if key not in self._P:
            self._P = {key: (space, prolongation_matrix(space, self.space))}
        P = self._P[key][1]
        e = self.u - P @ v
        return float(np.sqrt(max(e @ (self.K @ e), 0.0)))


class SolverState:
    """Everything the loop keeps on the current level."""

    def __init__(self, mesh: Triangulation, data: ProblemData, cfg: AdaptiveConfig):
        self.data = data
        self.cfg = cfg
        self.ell = 0
        self.hierarchy = None
        self.set_mesh(mesh)
        self.u = np.zeros(self.space.dim)
        self.u_prev = self.u  # u^{k-1, jbar}
        self.k = 0
        self.j = 0
        self.eta_field: IndicatorField | None = None
        self.u_star = None  # oracle u_l^*
        self.u_kstar = None  # oracle u_l^{k,*}

    def set_mesh(self, mesh, parent=None):
        cfg = self.cfg
        old = getattr(self, "space", None)
        self.mesh = mesh
        self.space = build_space(mesh, cfg.degree)
        self.K = assemble_a(self.space, self.data, cfg.q_data)
        self.B = assemble_b(self.space, self.data, cfg.q_data, stiffness=self.K)
        self.F = assemble_load(self.space, self.data, cfg.q_data)
        self.estimator = ResidualEstimator(self.space, self.data, cfg.q_data)
        if self.hierarchy is None:
            self.hierarchy = MultilevelHierarchy(self.K, cfg.coarse_cap)
            self.P = None
        else:
            self.P = prolongation_matrix(old, self.space, parent)
            self.hierarchy.push(self.K, self.P, changed_dofs(self.P))

    def enorm(self, v) -> float:
        return float(np.sqrt(max(v @ (self.K @ v), 0.0)))

    def zarantonello(self) -> ZarantonelloStep:
        return ZarantonelloStep(self.cfg.delta, self.K, self.B, self.F)


class _StepLimit(Exception):
    """Raised by the runner once the configured number of steps is logged."""


class _Runner:
    """Bookkeeping shared by the loops: log, counters, timers, diagnostics."""

    def __init__(self, state: SolverState, reference: ReferenceSolution | None = None):
        self.state = state
        self.cfg = state.cfg
        self.log = RunLog()
        self.reference = reference
        self.t0 = time.perf_counter()
        self.t_diag = 0.0
        self.step = 0
        self.cost = 0
        self.dim_cost = 0
        self.prev_bound = math.nan
        self.floor = 0.0
        self.level_start = 1
        self.level_q = {"q_alg": [], "q_sym": [], "qbar_sym": []}
        self.sym_bound = math.nan

    def elapsed(self):
        return time.perf_counter() - self.t0 - self.t_diag

    def record(self, eta, diff_alg, diff_sym, case, bound, q_alg=math.nan):
        s = self.state
        self.step += 1
        self.cost += s.mesh.n_elements
        self.dim_cost += s.space.dim
        rec = StepRecord(
            s.ell, s.k, s.j, self.step, s.mesh.n_elements, s.space.dim, eta, diff_alg, diff_sym,
            self.cost, self.elapsed(), case=case, dim_cum=self.dim_cost, bound=bound, q_alg=q_alg,
        )
        if self.reference is not None:
            t = time.perf_counter()
            rec.err_ref = self.reference.error(s.space, s.u)
            alg = s.enorm(s.u_kstar - s.u) if s.u_kstar is not None else 0.0
            rec.delta_quasi = rec.err_ref + alg + eta
            self.t_diag += time.perf_counter() - t
        self.log.append(rec)
        if self.cfg.max_steps is not None and self.step >= self.cfg.max_steps:
            raise _StepLimit
        return rec

    def diag(self, fn):
        if not self.cfg.diagnostics:
            return None
        t = time.perf_counter()
        out = fn()
        self.t_diag += time.perf_counter() - t
        return out


def _ratio(num, den, scale):
    if den <= 1e-13 * max(scale, np.finfo(float).tiny):
        return math.nan
    return num / den


def inner_j_loop(state: SolverState, z: ZarantonelloStep, cfg: AdaptiveConfig, runner: _Runner | None = None):
    """Algebraic solver steps for one symmetrization step; returns ``(u^{k,jbar}, jbar)``.

    Returns ``jbar = None`` if the safety cap is hit.
    """
    runner = runner or _Runner(state)
    rhs = step_rhs(z, state.u_prev)
    solver = IterativeSolver(state.hierarchy, rhs, state.u_prev, cfg.solver_kind)
    if cfg.diagnostics and state.u_kstar is None:
        state.u_kstar = runner.diag(lambda: exact_map(z, state.u_prev))
    u_old = state.u_prev
    for j in range(1, cfg.j_cap + 1):
        state.j = j
        u = solver.step()
        state.u = u
        state.eta_field = state.estimator(u)
        eta = state.eta_field.eta
        diff_alg = state.enorm(u - u_old)
        diff_sym = state.enorm(u - state.u_prev)
        q = math.nan
        if state.u_kstar is not None:
            scale = state.enorm(state.u_kstar)
            q = _ratio(state.enorm(state.u_kstar - u), state.enorm(state.u_kstar - u_old), scale)
            if not math.isnan(q):
                runner.level_q["q_alg"].append(q)
        done = diff_alg <= cfg.lambda_alg * (cfg.lambda_sym * eta + diff_sym)
        bound = eta + diff_sym + (0.0 if done else diff_alg)
        runner.record(eta, diff_alg, diff_sym, "sym" if done else "alg", bound, q)
        if done:
            return u, j
        u_old = u
    return state.u, None


def outer_k_loop(state: SolverState, cfg: AdaptiveConfig, runner: _Runner | None = None):
    """Symmetrization steps on the current mesh; returns ``(u^{kbar,jbar}, kbar)``.

    ``kbar`` is None when a safety cap or the composite tolerance ended the
    loop early; ``runner.log.status`` tells which.
    """
    runner = runner or _Runner(state)
    z = state.zarantonello()
    if cfg.diagnostics and state.u_star is None:
        state.u_star = runner.diag(lambda: solve_direct(state.B, state.F))
    for k in range(1, cfg.k_cap + 1):
        state.k = k
        # (l, k, 0): the previous iterate re-enters as starting value
        state.j = 0
        state.u = state.u_prev
        state.u_kstar = runner.diag(lambda: exact_map(z, state.u_prev))
        eta_prev = runner.log.steps[-1].eta
        runner.record(eta_prev, 0.0, 0.0, "restart", runner.prev_bound)
        u, jbar = inner_j_loop(state, z, cfg, runner)
        if jbar is None:
            runner.log.status = "j-cap"
            runner.log.message = f"solver loop exceeded {cfg.j_cap} steps at level {state.ell}, k = {k}"
            return u, None
        rec = runner.log.steps[-1]
        if state.u_star is not None:
            scale = state.enorm(state.u_star)
            den = state.enorm(state.u_star - state.u_prev)
            qs = _ratio(state.enorm(state.u_star - state.u_kstar), den, scale)
            qb = _ratio(state.enorm(state.u_star - u), den, scale)
            if not math.isnan(qs):
                runner.level_q["q_sym"].append(qs)
            runner.sym_bound = qb
        tau = cfg.tau if cfg.tau is not None else -1.0
        composite = rec.eta + rec.diff_sym + rec.diff_alg
        stop_sym = rec.diff_sym <= cfg.lambda_sym * rec.eta
        if composite <= max(tau, runner.floor):
            rec.case = "final"
            rec.bound = rec.eta
            runner.log.status = "exact" if composite <= runner.floor else "tolerance"
            state.u_prev = u
            return u, None
        if stop_sym:
            rec.case = "final"
            rec.bound = rec.eta
            state.u_prev = u
            return u, k
        if state.u_star is not None and not math.isnan(runner.sym_bound):
            runner.level_q["qbar_sym"].append(runner.sym_bound)
        runner.prev_bound = rec.bound
        state.u_prev = u
    runner.log.status = "k-cap"
    runner.log.message = f"symmetrization loop exceeded {cfg.k_cap} steps at level {state.ell}"
    return state.u, None


def run(mesh: Triangulation, data: ProblemData, cfg: AdaptiveConfig, reference: ReferenceSolution | None = None,
        callback=None) -> RunLog:
    """Run the adaptive loop until a stop rule or a safety cap ends it.

    ``reference`` enables the quasi-error column.  ``callback(state, log)``
    is called after each completed level; its time is not counted.
    """
    cfg.validate()
    state = SolverState(mesh, data, cfg)
    runner = _Runner(state, reference)
    log = runner.log
    n_T0 = mesh.n_elements
    marked_total = 0
    c_mesh = 0.0
    try:
        while True:
            # (l, 0, 0)
            state.k = state.j = 0
            state.u_kstar = state.u if cfg.diagnostics else None
            state.eta_field = state.estimator(state.u)
            eta0 = state.eta_field.eta
            if state.ell == 0:
                runner.floor = cfg.zero_floor * eta0
                bound = math.nan
                case = "init"
            else:
                bound = log.levels[-1].eta
                case = "refine"
            runner.level_start = runner.step + 1
            runner.prev_bound = bound
            runner.level_q = {"q_alg": [], "q_sym": [], "qbar_sym": []}
            state.u_star = None
            try:
                runner.record(eta0, 0.0, 0.0, case, bound)
                u, kbar = outer_k_loop(state, cfg, runner)
            except _StepLimit:
                log.status = "steps"
                _close_level(state, runner, None)
                _notify(callback, state, runner)
                break
            lv = _close_level(state, runner, kbar)
            _notify(callback, state, runner)
            if kbar is None:
                break
            if cfg.max_dim is not None and state.space.dim >= cfg.max_dim:
                log.status = "dim"
                break
            if cfg.eta_tol is not None and lv.eta < cfg.eta_tol:
                log.status = "eta"
                break
            if cfg.max_levels is not None and state.ell + 1 >= cfg.max_levels:
                log.status = "levels"
                break
            if lv.eta <= runner.floor:
                log.status = "exact"
                break
            marked = dorfler_mark(state.eta_field, cfg.theta)
            if len(marked) == 0:
                log.status = "exact"
                break
            lv.n_marked = len(marked)
            marked_total += len(marked)
            new_mesh, parent = refine_with_parents(state.mesh, marked)
            c_mesh = max(c_mesh, (new_mesh.n_elements - n_T0) / marked_total)
            state.ell += 1
            state.set_mesh(new_mesh, parent)
            state.u = state.u_prev = state.P @ u
    except Exception as exc:
        log.status = "error"
        log.message = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        log.C_mesh = c_mesh if marked_total else math.nan
    return log


def _notify(callback, state, runner):
    if callback is not None:
        t = time.perf_counter()
        callback(state, runner.log)
        runner.t_diag += time.perf_counter() - t


def _close_level(state, runner, kbar):
    log = runner.log
    rec = log.steps[-1]
    q = runner.level_q
    lv = LevelRecord(
        state.ell, state.mesh.n_elements, state.space.dim, kbar if kbar is not None else state.k,
        runner.level_start, runner.step, rec.eta, time_s=rec.time_s,
        q_alg=max(q["q_alg"], default=math.nan), q_sym=max(q["q_sym"], default=math.nan),
        qbar_sym=max(q["qbar_sym"], default=math.nan),
    )
    if lv.q_alg > runner.cfg.q_cap and state.ell > 1:
        log.q_cap_exceeded = True
    log.levels.append(lv)
    return lv


def quasi_error(record: StepRecord) -> float:
    """|||u_ref - u||| + |||u^{k,*} - u||| + eta for a logged step (nan without reference)."""
    return record.delta_quasi


def reliable_bound(record: StepRecord) -> float:
    """Computable error bound of the logged step, without the unknown constant.

    ``alg`` steps: eta + |||u^{k,j} - u^{k-1,jbar}||| + |||u^{k,j} - u^{k,j-1}|||;
    ``sym`` steps: eta + |||u^{k,jbar} - u^{k-1,jbar}|||; ``final``: eta;
    ``refine``: the final estimator of the previous level; ``restart``
    reuses the bound of the iterate it repeats.  ``init`` has no bound (nan).
    """
    return record.bound
