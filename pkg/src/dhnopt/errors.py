"""Exact and estimated per-pipe error measures.

All measures are max-norm differences of internal-energy profiles on the
two-point reference grid {0, L} that every refined or coarsened grid of a
pipe contains, and are reported in GJ/m3 (the unit of the feasibility
tolerance). Two families:

  estimates (cheap, no closed form needed):
    model error          eta_m = |e_1(G0; dx) - e_l(G0; dx)|
    discretization error eta_d = |e_l(G0; dx) - e_l(G0; 2 dx)|
    total                eta   = eta_m + eta_d

  exact measures (closed-form profiles):
    nu_m = |e_1(G0) - e_l(G0)|,  nu_d = |e_l(G0) - e_l(G0; dx)|,
    nu   = |e_1(G0) - e_l(G0; dx)|

where e_l(G0) is the exact level-l profile and e_l(G0; dx) the
implicit-midpoint profile, both propagated from the same inflow state
(inflow energy and velocity taken from the NLP solution, flow-direction
aware). The estimates are first-order upper bounds of the exact measures
as dx -> 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pipes import (
    V_MIN,
    DEFAULT_CONSTANTS,
    PipeAssignment,
    PipeGrid,
    exact_energy_profile,
    propagate_energy_discrete,
)

#: Error measures are expressed in this unit (J/m3 per GJ/m3).
GJ = 1e9


def _reference_values(profile: np.ndarray) -> np.ndarray:
    """Restrict a full-grid profile to the reference grid {0, L}."""
    return profile[[0, -1]]


def estimate_model_error(pipe, assign: PipeAssignment, v, e_in,
                         constants=DEFAULT_CONSTANTS) -> float:
    """Model error estimate [GJ/m3]: level-1 vs current-level discrete profile."""
    return model_error_under_level(pipe, assign, v, e_in, assign.level, constants)


def model_error_under_level(pipe, assign: PipeAssignment, v, e_in, candidate: int,
                            constants=DEFAULT_CONSTANTS) -> float:
    """Model error estimate with ``candidate`` in place of the current level.

    Used both for the current error (candidate = current level) and to
    evaluate prospective level switches when building the marking sets.
    """
    if candidate == 1 or abs(v) <= V_MIN:
        return 0.0
    ref = _reference_values(
        propagate_energy_discrete(1, pipe, v, e_in, assign.grid, constants)
    )
    cur = _reference_values(
        propagate_energy_discrete(candidate, pipe, v, e_in, assign.grid, constants)
    )
    return float(np.max(np.abs(ref - cur))) / GJ


def estimate_discretization_error(pipe, assign: PipeAssignment, v, e_in,
                                  constants=DEFAULT_CONSTANTS) -> float:
    """Discretization error estimate [GJ/m3]: current grid vs coarser grid.

    The two-point model (level 3) is exact on every grid, and no-flow pipes
    carry a constant profile, so both give 0. On the coarsest grid (n = 1)
    no coarser grid exists; the estimate compares against the refined grid
    instead, scaled by the order-2 factor 4 to stay consistent with the
    coarser-grid convention.
    """
    if assign.level == 3 or abs(v) <= V_MIN:
        return 0.0
    grid = assign.grid
    fine = _reference_values(
        propagate_energy_discrete(assign.level, pipe, v, e_in, grid, constants)
    )
    if grid.n >= 2:
        other = _reference_values(
            propagate_energy_discrete(assign.level, pipe, v, e_in,
                                      grid.coarsened(), constants)
        )
        return float(np.max(np.abs(fine - other))) / GJ
    refined = _reference_values(
        propagate_energy_discrete(assign.level, pipe, v, e_in,
                                  grid.refined(), constants)
    )
    return 4.0 * float(np.max(np.abs(fine - refined))) / GJ


def exact_errors(pipe, assign: PipeAssignment, v, e_in,
                 constants=DEFAULT_CONSTANTS):
    """Exact error measures (nu, nu_m, nu_d) [GJ/m3] via closed forms."""
    if abs(v) <= V_MIN:
        return 0.0, 0.0, 0.0
    xs = np.array([0.0, pipe.length])
    ref_exact = exact_energy_profile(1, pipe, v, e_in, xs, constants)
    cur_exact = exact_energy_profile(assign.level, pipe, v, e_in, xs, constants)
    cur_disc = _reference_values(
        propagate_energy_discrete(assign.level, pipe, v, e_in, assign.grid, constants)
    )
    nu = float(np.max(np.abs(ref_exact - cur_disc))) / GJ
    nu_m = float(np.max(np.abs(ref_exact - cur_exact))) / GJ
    nu_d = float(np.max(np.abs(cur_exact - cur_disc))) / GJ
    return nu, nu_m, nu_d


def predict_error_after_grid_change(eta_d: float, direction: str) -> float:
    """Order-2 update of the discretization error under one grid change."""
    if eta_d < 0:
        raise ValueError("error measures are non-negative")
    if direction == "refine":
        return eta_d / 4.0
    if direction == "coarsen":
        return 4.0 * eta_d
    raise ValueError(f"direction must be 'refine' or 'coarsen', got '{direction}'")


def average_error(values) -> float:
    """Arithmetic mean of per-pipe totals over all pipes."""
    values = list(values)
    if not values:
        raise ValueError("no pipes to average over")
    return float(np.mean(values))


@dataclass(frozen=True)
class PipeErrorRow:
    pipe: str
    level: int
    dx: float
    eta_m: float
    eta_d: float
    nu_m: float | None = None
    nu_d: float | None = None
    nu: float | None = None

    @property
    def eta(self) -> float:
        return self.eta_m + self.eta_d


@dataclass(frozen=True)
class ErrorReport:
    """Per-pipe error rows plus network averages; mode picks the measure
    that drives feasibility ('estimate' -> eta, 'exact' -> nu)."""

    rows: dict
    mode: str = "estimate"

    @property
    def average_eta(self) -> float:
        return average_error(row.eta for row in self.rows.values())

    @property
    def average_nu(self) -> float:
        if any(row.nu is None for row in self.rows.values()):
            raise ValueError("exact measures were not computed")
        return average_error(row.nu for row in self.rows.values())

    @property
    def feasibility_value(self) -> float:
        return self.average_nu if self.mode == "exact" else self.average_eta

    def sum_eta_m(self) -> float:
        return sum(row.eta_m for row in self.rows.values())

    def sum_eta_d(self) -> float:
        return sum(row.eta_d for row in self.rows.values())

    def to_csv(self) -> str:
        lines = ["pipe,level,dx,eta_m,eta_d,eta,nu_m,nu_d,nu,mode"]
        for pid in sorted(self.rows):
            row = self.rows[pid]
            opt = ["" if v is None else f"{v:.12e}"
                   for v in (row.nu_m, row.nu_d, row.nu)]
            lines.append(
                f"{pid},{row.level},{row.dx:.6f},{row.eta_m:.12e},"
                f"{row.eta_d:.12e},{row.eta:.12e},{opt[0]},{opt[1]},{opt[2]},"
                f"{self.mode}"
            )
        return "\n".join(lines) + "\n"


def compute_report(net, assignment, pipe_states, mode="estimate",
                   with_exact=False) -> ErrorReport:
    """Evaluate all per-pipe measures.

    ``pipe_states`` maps pipe id -> (velocity, inflow energy) as read from
    the NLP solution. Exact measures are added when requested or when they
    drive feasibility.
    """
    rows = {}
    need_exact = with_exact or mode == "exact"
    for pid in sorted(net.pipes):
        pipe = net.pipes[pid]
        assign = assignment[pid]
        v, e_in = pipe_states[pid]
        eta_m = estimate_model_error(pipe, assign, v, e_in, net.constants)
        eta_d = estimate_discretization_error(pipe, assign, v, e_in, net.constants)
        nu = nu_m = nu_d = None
        if need_exact:
            nu, nu_m, nu_d = exact_errors(pipe, assign, v, e_in, net.constants)
        rows[pid] = PipeErrorRow(pid, assign.level, assign.grid.dx,
                                 eta_m, eta_d, nu_m, nu_d, nu)
    return ErrorReport(rows, mode)
