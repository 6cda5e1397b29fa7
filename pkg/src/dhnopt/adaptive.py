"""Adaptive model- and discretization-level control.

The controller repeatedly solves the network problem while switching each
pipe between the three flow models and refining or coarsening its grid:

  * an inner loop (up to mu passes) marks pipes for model up-switching and
    grid refinement to push the error measures down,
  * the outer loop then marks pipes for down-switching and coarsening to
    keep the problems cheap where accuracy is not needed,
  * the run stops at the first solution whose pipe-averaged total error
    measure is within the tolerance.

Marking uses greedy threshold rules: refinement and up-switching pick the
minimum-cardinality pipe sets covering a Theta-fraction of the total error
(largest contributions first), coarsening and down-switching the
maximum-cardinality sets staying under a Theta-fraction (smallest first).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from . import assembly, errors, solver
from .pipes import PipeAssignment, PipeGrid


class CoarsenBelowReference(ValueError):
    """Attempt to coarsen the two-point reference grid."""


class SolveFailed(RuntimeError):
    """An inner solve came back unusable; carries the loop coordinates."""


@dataclass(frozen=True)
class AdaptiveConfig:
    """Tolerance, marking thresholds, and loop caps.

    The defaults reproduce the published parameterization: epsilon is the
    average-error tolerance in GJ/m3, the four thresholds steer the
    marking sets, tau widens the candidate set for down-switching, and mu
    is the number of inner (up-switch/refine) passes per outer iteration.
    """

    epsilon: float = 1e-6  # GJ/m3
    theta_refine: float = 0.9
    theta_up: float = 0.4
    theta_coarsen: float = 0.45
    theta_down: float = 0.2
    tau: float = 5.0
    mu: int = 4
    max_outer: int = 50
    error_mode: str = "estimate"  # or "exact"
    initial_level: int = 3
    initial_intervals: int = 2
    solver_options: solver.SolverOptions = field(
        default_factory=solver.SolverOptions)

    def __post_init__(self):
        for name in ("theta_refine", "theta_up", "theta_coarsen", "theta_down"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.mu < 0 or self.max_outer < 1:
            raise ValueError("loop caps must be sensible")
        if self.error_mode not in ("estimate", "exact"):
            raise ValueError("error_mode must be 'estimate' or 'exact'")


@dataclass
class IterationRecord:
    outer: int
    inner: int | None  # None for the outer (coarsening) phase
    phase: str  # "initial", "inner", "outer"
    report: errors.ErrorReport
    eta_bar: float
    nu_bar: float | None
    marked_up: int
    marked_refine: int
    marked_coarsen: int
    marked_down: int
    level_counts: tuple
    objective: float
    solve_status: str
    wall_ms: float
    dual_norm: float
    assignment: dict


@dataclass
class AdaptiveResult:
    status: str  # "feasible" or "iteration-cap"
    solution: assembly.SolutionVector
    report: errors.ErrorReport
    records: list
    assignment: dict

    @property
    def feasible(self) -> bool:
        return self.status == "feasible"


# -- marking strategies -------------------------------------------------

def _greedy_min_cover(values: dict, bound: float) -> set:
    """Minimum-cardinality subset with sum >= bound (largest first)."""
    chosen = set()
    total = 0.0
    if total >= bound:
        return chosen
    for pid in sorted(values, key=lambda p: (-values[p], p)):
        if total >= bound:
            break
        if values[pid] <= 0.0:
            break
        chosen.add(pid)
        total += values[pid]
    return chosen if total >= bound else chosen


def _greedy_max_under(values: dict, bound: float) -> set:
    """Maximum-cardinality subset with sum <= bound (smallest first)."""
    chosen = set()
    total = 0.0
    for pid in sorted(values, key=lambda p: (values[p], p)):
        if total + values[pid] <= bound:
            chosen.add(pid)
            total += values[pid]
        else:
            break
    return chosen


def mark_refine(eta_d: dict, theta: float) -> set:
    """Minimum pipe set whose discretization errors cover a theta share."""
    return _greedy_min_cover(eta_d, theta * sum(eta_d.values()))


def mark_upswitch(decreases: dict, theta: float) -> set:
    """Minimum subset of the improving pipes covering a theta share.

    ``decreases`` holds the model-error decrease of the up-switch
    candidate level, restricted to pipes where it exceeds the tolerance.
    """
    return _greedy_min_cover(decreases, theta * sum(decreases.values()))


def mark_coarsen(eta_d: dict, theta: float) -> set:
    """Maximum pipe set whose discretization errors stay under theta."""
    return _greedy_max_under(eta_d, theta * sum(eta_d.values()))


def mark_downswitch(increases: dict, theta: float) -> set:
    """Maximum subset of the candidate pipes staying under theta.

    ``increases`` holds the model-error increase of the down-switch
    candidate level, restricted to pipes where it stays below tau*epsilon.
    """
    return _greedy_max_under(increases, theta * sum(increases.values()))


# -- switching rules -----------------------------------------------------

def up_switch_candidate(level: int, decrease_one: float, epsilon: float) -> int:
    """Next-higher-accuracy level: one step when that already pays off
    (decrease beyond the tolerance), otherwise straight to level 1."""
    if level > 1 and decrease_one > epsilon:
        return level - 1
    return 1


def apply_down_switch(level: int) -> int:
    return min(level + 1, 3)


def apply_grid_change(assign: PipeAssignment, direction: str) -> PipeAssignment:
    if direction == "refine":
        return replace(assign, grid=assign.grid.refined())
    if direction == "coarsen":
        if assign.grid.n < 2:
            raise CoarsenBelowReference(
                "cannot coarsen the two-point reference grid")
        return replace(assign, grid=assign.grid.coarsened())
    raise ValueError(f"direction must be 'refine' or 'coarsen', got '{direction}'")


def check_feasible(report: errors.ErrorReport, epsilon: float) -> bool:
    return report.feasibility_value <= epsilon


def check_termination_conditions(config: AdaptiveConfig, n_pipes: int) -> dict:
    """Margins of the two finite-termination inequalities.

    Diagnostic only: the published parameterization violates the second
    inequality yet converges in practice, so the run never blocks on it.
    """
    first = 0.25 * config.theta_refine * config.mu - config.theta_coarsen
    second = config.theta_up * config.mu \
        - config.tau * config.theta_down * n_pipes
    return {
        "discretization_margin": first,
        "discretization_ok": first > 0,
        "model_margin": second,
        "model_ok": second > 0,
    }


# -- the adaptive loop ---------------------------------------------------

def initial_assignment(net, config: AdaptiveConfig) -> dict:
    return {
        pid: PipeAssignment(
            config.initial_level,
            PipeGrid(pipe.length, config.initial_intervals))
        for pid, pipe in net.pipes.items()
    }


def _pipe_states(sol: assembly.SolutionVector) -> dict:
    return {pid: sol.pipe_state(pid) for pid in sol.layout.net.pipes}


def _model_errors_under(net, assignment, states, levels: dict) -> dict:
    out = {}
    for pid, level in levels.items():
        v, e_in = states[pid]
        out[pid] = errors.model_error_under_level(
            net.pipes[pid], assignment[pid], v, e_in, level, net.constants)
    return out


def _dual_norm(result: solver.SolveResult) -> float:
    peak = 0.0
    for values in result.duals.values():
        if len(values):
            peak = max(peak, float(abs(values).max()))
    return peak


def run_adaptive(net, config: AdaptiveConfig | None = None,
                 assignment: dict | None = None,
                 parameter_update=None) -> AdaptiveResult:
    """Run the nested refine/up-switch, coarsen/down-switch control loop.

    ``parameter_update(config, k) -> config`` optionally reschedules the
    marking parameters per outer iteration (identity by default, matching
    the published setup). Returns on the first epsilon-feasible solution
    or when the outer iteration cap is reached.
    """
    config = config or AdaptiveConfig()
    assignment = dict(assignment or initial_assignment(net, config))
    records = []

    def solve_step(start, outer, inner, phase):
        t0 = time.perf_counter()
        inst = assembly.assemble(net, assignment)
        if start is not None:
            x0 = assembly.warm_start(start, inst.layout)
            start_vec = assembly.SolutionVector(inst.layout, x0)
        else:
            start_vec = None
        result = solver.solve(inst, start_vec, config.solver_options)
        wall_ms = (time.perf_counter() - t0) * 1e3
        feas = result.kkt["feasibility"]
        if result.status in (solver.INFEASIBLE, solver.NUMERIC_FAILURE) \
                or feas > 1e-4:
            raise SolveFailed(
                f"solver returned {result.status} "
                f"(feasibility {feas:.2e}) at outer={outer} inner={inner}")
        return inst, result, wall_ms

    def evaluate(result):
        states = _pipe_states(result.solution)
        report = errors.compute_report(
            net, assignment, states, mode=config.error_mode,
            with_exact=config.error_mode == "exact")
        return states, report

    def record(outer, inner, phase, report, sizes, result, wall_ms):
        nu_bar = report.average_nu if config.error_mode == "exact" else None
        levels = [a.level for a in assignment.values()]
        records.append(IterationRecord(
            outer=outer, inner=inner, phase=phase, report=report,
            eta_bar=report.average_eta, nu_bar=nu_bar,
            marked_up=sizes[0], marked_refine=sizes[1],
            marked_coarsen=sizes[2], marked_down=sizes[3],
            level_counts=(levels.count(1), levels.count(2), levels.count(3)),
            objective=result.objective, solve_status=result.status,
            wall_ms=wall_ms, dual_norm=_dual_norm(result),
            assignment=dict(assignment)))

    inst, result, wall_ms = solve_step(None, 0, None, "initial")
    states, report = evaluate(result)
    record(0, None, "initial", report, (0, 0, 0, 0), result, wall_ms)
    if check_feasible(report, config.epsilon):
        return AdaptiveResult("feasible", result.solution, report, records,
                              dict(assignment))

    for outer in range(1, config.max_outer + 1):
        if parameter_update is not None:
            config = parameter_update(config, outer)
        for inner in range(1, config.mu + 1):
            eta_d = {pid: report.rows[pid].eta_d for pid in net.pipes}
            eta_m = {pid: report.rows[pid].eta_m for pid in net.pipes}
            candidates = {}
            decreases = {}
            for pid in net.pipes:
                level = assignment[pid].level
                one_up = _model_errors_under(
                    net, assignment, states,
                    {pid: max(level - 1, 1)})[pid]
                cand = up_switch_candidate(level, eta_m[pid] - one_up,
                                           config.epsilon)
                cand_err = one_up if cand == level - 1 else 0.0
                candidates[pid] = cand
                decreases[pid] = eta_m[pid] - cand_err
            improving = {pid: d for pid, d in decreases.items()
                         if d > config.epsilon}
            marked_up = mark_upswitch(improving, config.theta_up)
            marked_refine = mark_refine(eta_d, config.theta_refine)
            for pid in marked_up:
                assignment[pid] = replace(assignment[pid],
                                          level=candidates[pid])
            for pid in marked_refine:
                assignment[pid] = apply_grid_change(assignment[pid], "refine")
            inst, result, wall_ms = solve_step(result.solution, outer, inner,
                                               "inner")
            states, report = evaluate(result)
            record(outer, inner, "inner", report,
                   (len(marked_up), len(marked_refine), 0, 0), result,
                   wall_ms)
            if check_feasible(report, config.epsilon):
                return AdaptiveResult("feasible", result.solution, report,
                                      records, dict(assignment))

        eta_d = {pid: report.rows[pid].eta_d for pid in net.pipes}
        eta_m = {pid: report.rows[pid].eta_m for pid in net.pipes}
        # Pipes already at the least accurate level have no down-switch
        # move; they stay out of the candidate set.
        down_levels = {pid: apply_down_switch(assignment[pid].level)
                       for pid in net.pipes
                       if assignment[pid].level < 3}
        down_errors = _model_errors_under(net, assignment, states,
                                          down_levels)
        increases = {pid: down_errors[pid] - eta_m[pid] for pid in down_levels}
        shrinking = {pid: inc for pid, inc in increases.items()
                     if inc < config.tau * config.epsilon}
        marked_down = mark_downswitch(shrinking, config.theta_down)
        coarsenable = {pid: e for pid, e in eta_d.items()
                       if assignment[pid].grid.n >= 2}
        marked_coarsen = mark_coarsen(coarsenable, config.theta_coarsen)
        for pid in marked_down:
            assignment[pid] = replace(assignment[pid], level=down_levels[pid])
        for pid in marked_coarsen:
            assignment[pid] = apply_grid_change(assignment[pid], "coarsen")
        inst, result, wall_ms = solve_step(result.solution, outer, None,
                                           "outer")
        states, report = evaluate(result)
        record(outer, None, "outer", report,
               (0, 0, len(marked_coarsen), len(marked_down)), result, wall_ms)
        if check_feasible(report, config.epsilon):
            return AdaptiveResult("feasible", result.solution, report,
                                  records, dict(assignment))

    return AdaptiveResult("iteration-cap", result.solution, report, records,
                          dict(assignment))


def iteration_log_csv(records) -> str:
    """Flat CSV mirror of the run (one row per solve)."""
    lines = ["k,j,phase,eta_bar,sum_eta_m,sum_eta_d,U,R,C,D,"
             "level1,level2,level3,objective,solve_status,wall_ms"]
    for rec in records:
        j = "" if rec.inner is None else rec.inner
        lines.append(
            f"{rec.outer},{j},{rec.phase},{rec.eta_bar:.12e},"
            f"{rec.report.sum_eta_m():.12e},{rec.report.sum_eta_d():.12e},"
            f"{rec.marked_up},{rec.marked_refine},{rec.marked_coarsen},"
            f"{rec.marked_down},{rec.level_counts[0]},{rec.level_counts[1]},"
            f"{rec.level_counts[2]},{rec.objective:.10f},{rec.solve_status},"
            f"{rec.wall_ms:.1f}")
    return "\n".join(lines) + "\n"
