"""Command-line entry point: ``aisfem {run,param-study,contraction,timing,mesh-info}``."""

from __future__ import annotations

import argparse
import os
import sys

from .config import ExperimentConfig, load_config

__all__ = ["main", "build_parser"]


def _opt_int(s):
    if s.lower() in ("none", "off"):
        return 0
    return int(float(s))


def _floats(s):
    return tuple(float(t) for t in s.split(",") if t.strip())


def _common(p):
    p.add_argument("--config", help="INI file with run settings (command-line flags take precedence)")
    p.add_argument("--problem", help="lshape-dcr, zshape-convection, or a custom problem INI file")
    p.add_argument("--degree", type=int, help="polynomial degree m")
    p.add_argument("--theta", type=float, help="Doerfler marking parameter in (0, 1]")
    p.add_argument("--lambda-sym", type=float, dest="lambda_sym")
    p.add_argument("--lambda-alg", type=float, dest="lambda_alg")
    p.add_argument("--delta", type=float, help="Zarantonello damping parameter")
    p.add_argument("--stop-dim", type=_opt_int, dest="stop_dim", help="stop once dim >= this (0 or 'none' disables)")
    p.add_argument("--stop-eta", type=float, dest="stop_eta", help="stop once the final level estimator is below this")
    p.add_argument("--tau", type=float, help="stop once eta + both iterate differences <= tau")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--solver", choices=("pcg-bpx", "mg-vcycle"))
    p.add_argument("--diagnostics", action="store_true", default=None, help="oracle solves and contraction factors")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aisfem", description="Adaptive FEM with iterative symmetrization")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, hlp in (
        ("run", "single adaptive run with rates and figures"),
        ("contraction", "measured contraction factors per level"),
        ("timing", "AISFEM vs direct solver cumulative time"),
    ):
        _common(sub.add_parser(name, help=hlp))
    ps = sub.add_parser("param-study", help="weighted cost over a lambda_sym x theta grid")
    _common(ps)
    ps.add_argument("--thetas", type=_floats, default=None, help="comma-separated theta values")
    ps.add_argument("--lambdas", type=_floats, default=None, help="comma-separated lambda_sym values")
    mi = sub.add_parser("mesh-info", help="statistics and validation of a mesh")
    mi.add_argument("--problem", default="lshape-dcr")
    mi.add_argument("--mesh", help="mesh file (overrides --problem)")
    mi.add_argument("--refine", type=int, default=0, help="uniform refinements before reporting")
    mi.add_argument("--out", help="write the (refined) mesh to this file")
    return ap


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = dict(
        problem=args.problem, degree=args.degree, theta=args.theta, lambda_sym=args.lambda_sym,
        lambda_alg=args.lambda_alg, delta=args.delta, tau=args.tau, max_steps=args.max_steps,
        solver_kind=args.solver, diagnostics=args.diagnostics, seed=args.seed, out=args.out,
        eta_tol=args.stop_eta,
    )
    cfg = cfg.with_overrides(**over)
    if args.stop_dim is not None:
        cfg.adaptive = cfg.adaptive.replace(max_dim=args.stop_dim or None)
    if args.stop_eta is not None and args.stop_dim is None and args.command != "param-study":
        # an explicit estimator tolerance replaces the default dof cap
        cfg.adaptive = cfg.adaptive.replace(max_dim=None)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import experiments
    from .mesh import MeshError, read_mesh, uniform_refine, write_mesh
    from .problems import get_problem

    try:
        if args.command == "mesh-info":
            mesh = read_mesh(args.mesh) if args.mesh else get_problem(args.problem).mesh
            mesh = uniform_refine(mesh, args.refine)
            lines = experiments.mesh_info(mesh)
            print("\n".join(lines))
            if args.out:
                write_mesh(mesh, args.out)
            return 0 if lines[-1].endswith("yes") else 1
        cfg = _experiment_config(args)
        get_problem(cfg.problem)
    except (ValueError, OSError, MeshError) as exc:
        print(f"aisfem: error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            res = experiments.cmd_run(cfg)
            log = res.log
        elif args.command == "contraction":
            out = experiments.cmd_contraction(cfg)
            log = out["result"].log
        elif args.command == "timing":
            out = experiments.cmd_timing(cfg)
            log = out["result"].log
        else:
            kw = {}
            if args.thetas:
                kw["thetas"] = args.thetas
            if args.lambdas:
                kw["lambdas"] = args.lambdas
            tol = args.stop_eta if args.stop_eta is not None else 1e-3
            out = experiments.cmd_param_study(cfg, eta_tol=tol, **kw)
            print(open(os.path.join(cfg.out, "summary.txt")).read(), end="")
            return 0 if not out["notes"] else 1
    except (ValueError, OSError) as exc:
        print(f"aisfem: error: {exc}", file=sys.stderr)
        return 2
    print(open(os.path.join(cfg.out, "summary.txt")).read(), end="")
    return 0 if log.stopped_by_rule else 1


if __name__ == "__main__":
    sys.exit(main())
