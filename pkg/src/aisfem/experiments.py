"""Experiment harness: convergence runs, parameter study, contraction and timing studies.

Each ``cmd_*`` function writes CSV files (the data behind every figure),
SVG figures and a plain-text summary into an output directory and returns
the in-memory results.
"""

from __future__ import annotations

import csv
import math
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import plotting
from .config import ExperimentConfig
from .driver import AdaptiveConfig, ReferenceSolution, RunLog, run
from .fem import assemble_a, assemble_b, assemble_load, build_space
from .mesh import uniform_refine
from .problems import Problem, get_problem
from .solvers import solve_direct
from .zarantonello import ZarantonelloStep, contraction_bound, estimate_delta

__all__ = [
    "RateFit",
    "RunResult",
    "fit_rate",
    "fit_geometric",
    "final_decade",
    "run_problem",
    "reference_solution",
    "level_rates",
    "lambda_alg_bound",
    "cmd_run",
    "cmd_param_study",
    "cmd_contraction",
    "cmd_timing",
    "mesh_info",
]


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n: int

    def __str__(self):
        return f"{self.slope:+.4f} (R^2 = {self.r2:.4f}, {self.n} points)"


def fit_rate(x, y) -> RateFit:
    """Least-squares fit of log y = a + s log x."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    x, y = np.log(x[ok]), np.log(y[ok])
    if len(x) < 2 or np.ptp(x) == 0:
        return RateFit(math.nan, math.nan, math.nan, int(len(x)))
    s, a = np.polyfit(x, y, 1)
    res = y - (a + s * x)
    ss = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (res**2).sum() / ss if ss > 0 else 1.0
    return RateFit(float(s), float(a), float(r2), int(len(x)))


def final_decade(x) -> np.ndarray:
    """Mask of the entries within one decade of the largest value."""
    x = np.asarray(x, float)
    if len(x) == 0:
        return np.zeros(0, bool)
    return x >= x.max() / 10.0


def fit_geometric(values, discard: float = 0.4) -> RateFit:
    """Fit values[n] ~ C q^n over the tail after dropping a leading fraction.

    The returned ``slope`` is log q; ``math.exp(fit.slope)`` is the ratio.
    """
    v = np.asarray(values, float)
    start = int(math.floor(discard * len(v)))
    n = np.arange(len(v))[start:]
    y = v[start:]
    ok = (y > 0) & np.isfinite(y)
    n, y = n[ok], np.log(y[ok])
    if len(n) < 2:
        return RateFit(math.nan, math.nan, math.nan, int(len(n)))
    s, a = np.polyfit(n, y, 1)
    res = y - (a + s * n)
    ss = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (res**2).sum() / ss if ss > 0 else 1.0
    return RateFit(float(s), float(a), float(r2), int(len(n)))


def level_rates(log: RunLog) -> dict:
    """Estimator rates over the final decade of dofs.

    The cost fit uses the same levels as the dof fit so that the two slopes
    are directly comparable.
    """
    fin = log.final_records()
    dim = np.array([r.dim for r in fin], float)
    nT = np.array([r.nT for r in fin], float)
    eta = np.array([r.eta for r in fin], float)
    cost = np.array([r.cost_cum for r in fin], float)
    sel = final_decade(dim) & (dim > 0)
    return {
        "dim": fit_rate(dim[sel], eta[sel]),
        "nT": fit_rate(nT[sel], eta[sel]),
        "cost": fit_rate(cost[sel], eta[sel]),
    }


def lambda_alg_bound(q_alg: float, q_sym: float) -> float:
    """(1 - q_sym)(1 - q_alg) / (4 q_alg)."""
    if not q_alg > 0:
        return math.nan
    return (1 - q_sym) * (1 - q_alg) / (4 * q_alg)


@dataclass
class RunResult:
    problem: Problem
    config: ExperimentConfig
    log: RunLog
    rates: dict = field(default_factory=dict)
    delta_estimate: tuple = (math.nan, math.nan, math.nan)
    last_state: object = None
    extra: dict = field(default_factory=dict)


class _Capture:
    """Run callback keeping the latest level state; its own time is excluded."""

    def __init__(self, on_level=None):
        self.state = None
        self.on_level = on_level

    def __call__(self, state, log):
        self.state = state
        if self.on_level is not None:
            self.on_level(state, log)


def reference_solution(problem: Problem, mesh, degree: int, refinements: int = 2, q_data: int = 2) -> ReferenceSolution:
    """Direct solve of the Galerkin system on a uniform refinement of ``mesh``."""
    fine = uniform_refine(mesh, refinements)
    space = build_space(fine, degree)
    K = assemble_a(space, problem.data, q_data)
    B = assemble_b(space, problem.data, q_data, stiffness=K)
    F = assemble_load(space, problem.data, q_data)
    return ReferenceSolution(space, solve_direct(B, F), K)


def run_problem(problem: Problem, cfg: AdaptiveConfig, quasi_error: bool = False, ref_refinements: int = 2,
                on_level=None, samples: int = 200, seed: int = 0) -> RunResult:
    """Run the adaptive loop; with ``quasi_error`` a second pass logs Delta.

    The first pass determines the final mesh; the reference solution lives
    on its ``ref_refinements``-fold uniform refinement.
    """
    cap = _Capture(on_level)
    log = run(problem.mesh, problem.data, cfg, callback=cap)
    if quasi_error:
        ref = reference_solution(problem, cap.state.mesh, cfg.degree, ref_refinements, cfg.q_data)
        cap = _Capture(on_level)
        log = run(problem.mesh, problem.data, cfg.replace(diagnostics=True), reference=ref, callback=cap)
    st = cap.state
    est = (math.nan, math.nan, math.nan)
    if st is not None and st.space.dim > 0:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            est = tuple(estimate_delta(st.zarantonello(), samples=samples, seed=seed, warn=False))
    return RunResult(problem, None, log, level_rates(log), est, st)


# ------------------------------------------------------------------ outputs

def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in r])


def _summary_lines(res: RunResult, cfg: ExperimentConfig) -> list[str]:
    log = res.log
    ad = cfg.adaptive
    fin = log.final_records()
    last = fin[-1] if fin else (log.steps[-1] if log.steps else None)
    lines = [
        f"problem            {res.problem.name}",
        f"description        {res.problem.description}",
        f"degree             {ad.degree}",
        f"theta              {ad.theta}",
        f"lambda_sym         {ad.lambda_sym}",
        f"lambda_alg         {ad.lambda_alg}",
        f"delta              {ad.delta}",
        f"solver             {ad.solver_kind} (coarse cap {ad.coarse_cap})",
        f"status             {log.status}" + (f" ({log.message})" if log.message else ""),
        f"levels             {len(log.levels)}",
        f"steps              {len(log.steps)}",
    ]
    if last is not None:
        lines += [
            f"final dim          {last.dim}",
            f"final elements     {last.nT}",
            f"final eta          {_fmt(last.eta)}",
            f"cumulative cost    {last.cost_cum}",
            f"wall time [s]      {last.time_s:.3f}",
        ]
    r = res.rates
    if r:
        lines += [
            f"rate eta vs dim    {r['dim']}",
            f"rate eta vs #T     {r['nT']}",
            f"rate eta vs cost   {r['cost']}",
            f"rate difference    {_fmt(abs(r['cost'].slope - r['nT'].slope))}",
            f"expected rate      {-ad.degree / 2:+.4f}",
        ]
    if log.levels:
        kb = [lv.k_bar for lv in log.levels]
        st = [lv.solver_steps for lv in log.levels]
        lines += [
            f"max kbar           {max(kb)}",
            f"solver steps/level min {min(st)} max {max(st)}",
        ]
    lines.append(f"C_mesh (measured)  {_fmt(log.C_mesh)}")
    a, L, ds = res.delta_estimate
    lines.append(f"sampled alpha      {_fmt(a)}")
    lines.append(f"sampled L          {_fmt(L)}")
    lines.append(f"sampled delta*     {_fmt(ds)}")
    if not math.isnan(a):
        lines.append(f"bound q[delta]     {_fmt(contraction_bound(ad.delta, a, L))}")
        if ad.delta >= 2 * ds:
            lines.append("warning            delta >= 2 delta*: symmetrization may not contract")
    if ad.diagnostics or cfg.diagnostics:
        qa = [lv.q_alg for lv in log.levels if not math.isnan(lv.q_alg)]
        qs = [lv.q_sym for lv in log.levels if not math.isnan(lv.q_sym)]
        qb = [lv.qbar_sym for lv in log.levels if not math.isnan(lv.qbar_sym)]
        lines.append(f"max q_alg          {_fmt(max(qa, default=math.nan))}")
        lines.append(f"max q_sym          {_fmt(max(qs, default=math.nan))}")
        lines.append(f"max qbar_sym       {_fmt(max(qb, default=math.nan))}")
        if log.q_cap_exceeded:
            lines.append(f"warning            q_alg exceeded q_cap = {ad.q_cap}")
    return lines


def _plot_run(res: RunResult, out: str, m: int):
    fin = res.log.final_records()
    if not fin:
        return
    dim = [r.dim for r in fin]
    eta = [r.eta for r in fin]
    cost = [r.cost_cum for r in fin]
    t = [r.time_s for r in fin]
    plotting.loglog({"eta": (dim, eta)}, os.path.join(out, "eta_vs_dim.svg"), "dim", "estimator", slopes=(-m / 2,))
    plotting.loglog({"eta": (cost, eta)}, os.path.join(out, "eta_vs_cost.svg"), "cumulative #T", "estimator", slopes=(-m / 2,))
    plotting.loglog({"eta": (t, eta)}, os.path.join(out, "eta_vs_time.svg"), "time [s]", "estimator", slopes=(-m / 2,))
    lv = res.log.levels
    plotting.lines({"steps": ([v.ell for v in lv], [v.solver_steps for v in lv])}, os.path.join(out, "steps_per_level.svg"),
                   "level", "solver steps")


def _export_run(res: RunResult, cfg: ExperimentConfig, out: str):
    res.log.write_csv(os.path.join(out, "runlog.csv"))
    res.log.write_levels_csv(os.path.join(out, "levels.csv"))
    _plot_run(res, out, cfg.adaptive.degree)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(_summary_lines(res, cfg)) + "\n")


def cmd_run(cfg: ExperimentConfig) -> RunResult:
    """Single adaptive run with runlog.csv, levels.csv, summary.txt and figures."""
    _ensure_dir(cfg.out)
    problem = get_problem(cfg.problem)
    ad = cfg.adaptive.replace(diagnostics=cfg.diagnostics or cfg.adaptive.diagnostics)
    res = run_problem(problem, ad, quasi_error=ad.diagnostics, samples=cfg.samples, seed=cfg.seed)
    res.config = cfg
    _export_run(res, cfg, cfg.out)
    if ad.diagnostics:
        rows = [(r.step, r.delta_quasi, r.eta, r.bound, r.err_ref) for r in res.log.steps]
        _write_csv(os.path.join(cfg.out, "quasi_error.csv"), ("step", "delta_quasi", "eta", "bound", "err_ref"), rows)
        plotting.lines({"quasi-error": ([r[0] for r in rows], [r[1] for r in rows]),
                        "estimator": ([r[0] for r in rows], [r[2] for r in rows])},
                       os.path.join(cfg.out, "quasi_error.svg"), "step", "value", logy=True)
    return res


PARAM_THETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
PARAM_LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4)


def weighted_cost(log: RunLog) -> float:
    """eta(u^{kbar,jbar}) of the last level times the cumulative sum of dim over all steps."""
    fin = log.final_records()
    if not fin:
        return math.nan
    return fin[-1].eta * fin[-1].dim_cum


def cmd_param_study(cfg: ExperimentConfig, thetas=PARAM_THETAS, lambdas=PARAM_LAMBDAS, eta_tol: float = 1e-3,
                    max_dim: int | None = 4 * 10**5) -> dict:
    """Weighted cost for every (lambda_sym, theta) cell, stopping at eta < eta_tol.

    Cells that reach ``max_dim`` first are reported as nan with a note; the
    cap keeps memory bounded when the tolerance is out of reach.
    """
    if not len(thetas) or not len(lambdas):
        raise ValueError("parameter grid is empty")
    _ensure_dir(cfg.out)
    problem = get_problem(cfg.problem)
    table = {}
    notes = []
    for lam in lambdas:
        for th in thetas:
            ad = cfg.adaptive.replace(theta=th, lambda_sym=lam, eta_tol=eta_tol, max_dim=max_dim, tau=None,
                                      max_steps=None, max_levels=None, diagnostics=False)
            try:
                log = run(problem.mesh, problem.data, ad)
                if log.status != "eta":
                    notes.append(f"theta={th:g} lambda_sym={lam:g}: stopped with status {log.status}")
                table[(lam, th)] = weighted_cost(log) if log.status == "eta" else math.nan
            except Exception as exc:  # a failing cell must not stop the study
                notes.append(f"theta={th:g} lambda_sym={lam:g}: {type(exc).__name__}: {exc}")
                table[(lam, th)] = math.nan
    rows = [[lam] + [table[(lam, th)] for th in thetas] for lam in lambdas]
    _write_csv(os.path.join(cfg.out, "table.csv"), ["lambda_sym\\theta"] + [f"{t:g}" for t in thetas], rows)
    vals = np.array([[table[(lam, th)] for th in thetas] for lam in lambdas])
    lines = [f"problem {problem.name}, degree {cfg.adaptive.degree}, stop eta < {eta_tol:g}",
             "weighted cost = eta * sum over steps of dim", ""]
    header = "lambda_sym\\theta " + " ".join(f"{t:>10g}" for t in thetas)
    lines.append(header)
    best = None
    if np.isfinite(vals).any():
        i, k = np.unravel_index(np.nanargmin(vals), vals.shape)
        best = (lambdas[i], thetas[k])
    for i, lam in enumerate(lambdas):
        cells = []
        for k, th in enumerate(thetas):
            s = _fmt(vals[i, k])
            cells.append(f"{('*' + s) if best == (lam, th) else s:>10}")
        lines.append(f"{lam:<16g} " + " ".join(cells))
    lines.append("")
    if best is not None:
        lines.append(f"minimum at theta = {best[1]:g}, lambda_sym = {best[0]:g} (marked *)")
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        theta_range = np.nanmean(np.nanmax(vals, axis=1) / np.nanmin(vals, axis=1)) if vals.shape[1] > 1 else math.nan
        lambda_range = np.nanmean(np.nanmax(vals, axis=0) / np.nanmin(vals, axis=0)) if vals.shape[0] > 1 else math.nan
    lines.append(f"mean max/min ratio along theta (per lambda_sym row): {_fmt(float(theta_range))}")
    lines.append(f"mean max/min ratio along lambda_sym (per theta column): {_fmt(float(lambda_range))}")
    lines += notes
    with open(os.path.join(cfg.out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return {"table": table, "best": best, "theta_range": float(theta_range), "lambda_range": float(lambda_range),
            "notes": notes}


def cmd_contraction(cfg: ExperimentConfig) -> dict:
    """Per-level measured q_alg, q_sym, qbar_sym and the derived lambda_alg bound."""
    if not (cfg.diagnostics or cfg.adaptive.diagnostics):
        raise ValueError("the contraction study needs diagnostics enabled (--diagnostics)")
    _ensure_dir(cfg.out)
    problem = get_problem(cfg.problem)
    ad = cfg.adaptive.replace(diagnostics=True)
    res = run_problem(problem, ad, samples=cfg.samples, seed=cfg.seed)
    res.config = cfg
    rows = []
    flagged = []
    for lv in res.log.levels:
        lam = lambda_alg_bound(lv.q_alg, lv.q_sym) if not (math.isnan(lv.q_alg) or math.isnan(lv.q_sym)) else math.nan
        rows.append((lv.ell, lv.dim, lv.q_alg, lv.q_sym, lv.qbar_sym, lam))
        for name, v in (("q_alg", lv.q_alg), ("q_sym", lv.q_sym), ("qbar_sym", lv.qbar_sym)):
            if not math.isnan(v) and not 0 <= v < 1:
                flagged.append(f"level {lv.ell}: {name} = {v:.4g} outside [0, 1)")
    _write_csv(os.path.join(cfg.out, "contraction.csv"), ("ell", "dim", "q_alg", "q_sym", "qbar_sym", "lambda_alg_bound"), rows)
    ell = [r[0] for r in rows]
    plotting.lines({"q_alg": (ell, [r[2] for r in rows]), "q_sym": (ell, [r[3] for r in rows]),
                    "qbar_sym": (ell, [r[4] for r in rows])},
                   os.path.join(cfg.out, "contraction.svg"), "level", "contraction factor", hline=1.0)
    plotting.lines({"lambda_alg bound": (ell, [r[5] for r in rows])}, os.path.join(cfg.out, "lambda_alg_bound.svg"),
                   "level", "bound", logy=True)
    _export_run(res, cfg, cfg.out)
    with open(os.path.join(cfg.out, "summary.txt"), "a") as fh:
        fh.write("\n".join(flagged or ["all measured factors lie in [0, 1)"]) + "\n")
    return {"rows": rows, "flagged": flagged, "result": res}


def cmd_timing(cfg: ExperimentConfig) -> dict:
    """Cumulative AISFEM time against cumulative per-level direct solves of B u = F."""
    _ensure_dir(cfg.out)
    problem = get_problem(cfg.problem)
    direct = []

    def on_level(state, log):
        t = time.perf_counter()
        if state.space.dim:
            solve_direct(state.B, state.F)
        direct.append(time.perf_counter() - t)

    ad = cfg.adaptive.replace(diagnostics=False)
    res = run_problem(problem, ad, on_level=on_level, samples=cfg.samples, seed=cfg.seed)
    res.config = cfg
    fin = res.log.final_records()
    cum_direct = np.cumsum(direct)
    rows = [(r.ell, r.dim, r.cost_cum, r.time_s, float(td)) for r, td in zip(fin, cum_direct)]
    _write_csv(os.path.join(cfg.out, "timing.csv"), ("ell", "dim", "cost_cum", "time_aisfem", "time_direct"), rows)
    cost = np.array([r[2] for r in rows], float)
    dims = np.array([r[1] for r in rows], float)
    cum_dim = np.cumsum(dims)
    sel = final_decade(cost)
    fit_it = fit_rate(cost[sel], np.array([r[3] for r in rows])[sel])
    sel_d = final_decade(cum_dim)
    fit_dir = fit_rate(cum_dim[sel_d], cum_direct[sel_d])
    plotting.loglog({"AISFEM": (cost, [r[3] for r in rows]), "direct": (cost, cum_direct)},
                    os.path.join(cfg.out, "timing.svg"), "cumulative #T", "cumulative time [s]", slopes=(1.0,))
    _export_run(res, cfg, cfg.out)
    with open(os.path.join(cfg.out, "summary.txt"), "a") as fh:
        fh.write(f"time vs cost slope (AISFEM)      {fit_it}\n")
        fh.write(f"time vs cum. dim slope (direct)  {fit_dir}\n")
    return {"rows": rows, "fit_iterative": fit_it, "fit_direct": fit_dir, "result": res}


def mesh_info(mesh) -> list[str]:
    from .mesh import validate

    viol = validate(mesh)
    return [
        f"vertices        {mesh.n_vertices}",
        f"elements        {mesh.n_elements}",
        f"boundary edges  {len(mesh.boundary_edges)}",
        f"edges           {len(mesh.edges)}",
        f"area            {mesh.areas.sum():.12g}",
        f"max diameter    {mesh.diameters.max():.6g}",
        f"max generation  {int(np.max(mesh.generation))}",
        "valid           " + ("yes" if not viol else "no"),
    ] + [f"  {v}" for v in viol]
