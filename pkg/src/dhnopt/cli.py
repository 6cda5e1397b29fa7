"""Command-line entry points.

Three subcommands:

  solve       end-to-end adaptive optimization of an instance file,
              writing solution/log/error artifacts to a directory,
  pipe-study  single-pipe profiles and error measures across levels and
              grids (CSV, handy for convergence plots),
  generate    deterministic synthetic instance files.

Verbosity via the DHN_LOG environment variable (error, info, debug).
Exit codes: 0 success (epsilon-feasible), 1 usage or data error,
2 iteration cap reached, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adaptive, assembly, errors, generate, network, solver
from .pipes import PipeArc, PipeGrid, exact_energy_profile, propagate_energy_discrete

log = logging.getLogger("dhnopt")


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("DHN_LOG", "error"))
    logging.basicConfig(level=level or logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str | None) -> adaptive.AdaptiveConfig:
    if path is None:
        return adaptive.AdaptiveConfig()
    with open(path) as fh:
        doc = json.load(fh)
    solver_opts = solver.SolverOptions(**doc.pop("solver", {}))
    return adaptive.AdaptiveConfig(solver_options=solver_opts, **doc)


def cmd_solve(args) -> int:
    try:
        text = Path(args.network).read_text()
    except OSError as exc:
        print(f"error: cannot read network file: {exc}", file=sys.stderr)
        return 1
    try:
        net = network.parse_network(text)
        config = _load_config(args.config)
        if args.error_mode:
            from dataclasses import replace
            config = replace(config, error_mode=args.error_mode)
    except (network.NetworkFormatError, network.NetworkValidationError,
            OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    diag = adaptive.check_termination_conditions(config, len(net.pipes))
    log.info("termination margins: %s", diag)
    try:
        result = adaptive.run_adaptive(net, config)
    except adaptive.SolveFailed as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3

    (out / "solution.json").write_text(
        json.dumps(result.solution.as_dict(), indent=1, sort_keys=True) + "\n")
    (out / "iteration_log.csv").write_text(
        adaptive.iteration_log_csv(result.records))
    for rec in result.records:
        j = "x" if rec.inner is None else rec.inner
        name = f"errors_k{rec.outer:03d}_j{j}.csv"
        (out / name).write_text(rec.report.to_csv())

    final = result.records[-1]
    inst = assembly.assemble(net, result.assignment)
    norms = inst.residual_norms(result.solution.x)
    summary = {
        "status": result.status,
        "iterations": len(result.records),
        "epsilon": config.epsilon,
        "error_mode": config.error_mode,
        "final_avg_error_estimate": result.report.average_eta,
        "objective": final.objective,
        "level_counts": dict(zip(("level1", "level2", "level3"),
                                 final.level_counts)),
        "max_residual_norm": max(norms.values()),
        "termination_margins": diag,
        "seed": args.seed,
    }
    if config.error_mode == "exact":
        summary["final_avg_error_exact"] = result.report.average_nu
    (out / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n")
    log.info("run %s after %d solves, average error %.3e",
             result.status, len(result.records), result.report.average_eta)
    return 0 if result.feasible else 2


def cmd_pipe_study(args) -> int:
    pipe = PipeArc(
        "study", "u", "v", args.length, args.diameter, args.friction,
        0.0, args.heat_transfer, args.wall_temperature, -1e3, 1e3)
    velocities = args.velocity or [1.0]
    levels = sorted(set(args.level or [1, 2, 3]))
    grid_sizes = sorted(set(args.grid or [2, 4, 8, 16]))
    e_in = args.e_in * 1e9

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    xs = np.linspace(0.0, pipe.length, args.samples)
    prof_lines = ["level,v,n,x,e"]
    for level in levels:
        for v in velocities:
            if level < 3:
                profile = exact_energy_profile(level, pipe, v, e_in, xs)
                prof_lines += [f"{level},{v},exact,{x:.3f},{e / 1e9:.12e}"
                               for x, e in zip(xs, profile)]
            for n in grid_sizes:
                grid = PipeGrid(pipe.length, n)
                values = propagate_energy_discrete(level, pipe, v, e_in, grid)
                prof_lines += [
                    f"{level},{v},{n},{x:.3f},{e / 1e9:.12e}"
                    for x, e in zip(grid.points(), values)
                ]
    (out / "profiles.csv").write_text("\n".join(prof_lines) + "\n")

    err_lines = ["level,v,n,dx,eta_m,eta_d,eta,nu_m,nu_d,nu,observed_order"]
    from .pipes import PipeAssignment
    for level in levels:
        for v in velocities:
            previous = None
            for n in grid_sizes:
                assign = PipeAssignment(level, PipeGrid(pipe.length, n))
                eta_m = errors.estimate_model_error(pipe, assign, v, e_in)
                eta_d = errors.estimate_discretization_error(
                    pipe, assign, v, e_in)
                nu, nu_m, nu_d = errors.exact_errors(pipe, assign, v, e_in)
                order = ""
                if previous and previous > 0 and nu_d > 0:
                    order = f"{np.log2(previous / nu_d):.3f}"
                previous = nu_d
                err_lines.append(
                    f"{level},{v},{n},{pipe.length / n:.3f},{eta_m:.12e},"
                    f"{eta_d:.12e},{eta_m + eta_d:.12e},{nu_m:.12e},"
                    f"{nu_d:.12e},{nu:.12e},{order}")
    (out / "errors.csv").write_text("\n".join(err_lines) + "\n")
    print(f"wrote {out / 'profiles.csv'} and {out / 'errors.csv'}")
    return 0


def cmd_generate(args) -> int:
    try:
        text = generate.generate_instance(args.template, seed=args.seed,
                                          chain_pipes=args.chain_pipes)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dhnopt",
        description="Adaptive optimization of district heating networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run the adaptive optimization")
    p_solve.add_argument("--network", required=True)
    p_solve.add_argument("--config", default=None,
                         help="JSON run configuration (defaults otherwise)")
    p_solve.add_argument("--output-dir", required=True)
    p_solve.add_argument("--error-mode", choices=("estimate", "exact"),
                         default=None)
    p_solve.add_argument("--seed", type=int, default=0,
                         help="recorded in the summary for provenance")
    p_solve.set_defaults(func=cmd_solve)

    p_study = sub.add_parser("pipe-study",
                             help="single-pipe profiles and error measures")
    p_study.add_argument("--length", type=float, default=1000.0)
    p_study.add_argument("--diameter", type=float, default=0.107)
    p_study.add_argument("--friction", type=float, default=0.017)
    p_study.add_argument("--heat-transfer", type=float, default=0.5)
    p_study.add_argument("--wall-temperature", type=float, default=278.0)
    p_study.add_argument("--velocity", type=float, action="append",
                         help="repeatable; m/s")
    p_study.add_argument("--e-in", type=float, default=0.35,
                         help="inflow energy density [GJ/m3]")
    p_study.add_argument("--level", type=int, action="append",
                         choices=(1, 2, 3))
    p_study.add_argument("--grid", type=int, action="append",
                         help="repeatable; interval counts (powers of two)")
    p_study.add_argument("--samples", type=int, default=101)
    p_study.add_argument("--output-dir", default=".")
    p_study.set_defaults(func=cmd_pipe_study)

    p_gen = sub.add_parser("generate", help="emit a synthetic instance")
    p_gen.add_argument("--template", required=True,
                       choices=generate.TEMPLATES)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", default=None)
    p_gen.add_argument("--chain-pipes", type=int, default=3)
    p_gen.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
