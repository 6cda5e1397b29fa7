"""Assembly of the finite-dimensional operation problem.

Given the network, a per-pipe (model level, grid) assignment, and a
complementarity relaxation delta, this module builds the variable layout,
box bounds, the objective, and all constraint residuals with exact sparse
Jacobians. Equality and inequality constraints are kept separate; flow
splits q = q+ - q- with q+ q- <= delta express the nonsmooth perfect-mixing
rules as smooth complementarity constraints.

Residual rows are scaled by fixed per-family characteristic magnitudes
(pressures in bar, per-step energy balances in mm/s * GJ/m3, powers in
1e4 W, ...) so that one tolerance applies uniformly; variables stay in raw
SI here and are scaled inside the solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import network as net_mod
from .pipes import (
    GRAVITY,
    V_MIN,
    PipeAssignment,
    energy_of_temperature,
    propagate_energy_discrete,
)

FAMILIES = (
    "momentum", "energy-discretized", "mass-node", "pressure-continuity",
    "mixing-balance", "mixing-out", "mixing-in", "flow-split",
    "complementarity", "depot", "consumer", "bounds",
)

# Characteristic variable magnitudes used by the solver's internal scaling.
SCALE_PRESSURE = 1e5  # Pa (bar)
SCALE_ENERGY = 1e9  # J/m3 (GJ/m3)
SCALE_FLOW = 10.0  # kg/s
SCALE_POWER = 1e4  # W

# Characteristic residual magnitudes per constraint family. The energy-row
# scale tracks the row's dominant Jacobian entry (velocity times energy
# scale) so that all families pull comparably in least-squares phases.
ROW_SCALE = {
    "momentum": 1e5,
    "energy-discretized": 2e8,
    "energy-conserved": 1e9,
    "mass-node": SCALE_FLOW,
    "pressure-continuity": 1e5,
    "mixing-balance": 1e7,
    "mixing-out": 1e10,
    "mixing-in": 1e10,
    "flow-split": SCALE_FLOW,
    "complementarity": 1.0,
    "depot-pressure": 1e5,
    "depot-power": SCALE_POWER,
    "consumer-demand": SCALE_POWER,
    "consumer-pressure": 1e5,
}

GRID_ENERGY_BOUNDS = (0.05e9, 0.9e9)  # generous box around the validity range


class AssemblyError(ValueError):
    """Assignment does not cover the network or a grid is invalid."""


class VariableLayout:
    """Deterministic name <-> index mapping for all NLP variables.

    Level-3 pipes materialize only their two endpoint energies (their
    energy constraint is the single equality e(L) = e(0)); levels 1-2 carry
    one energy per grid point. Pipe-end energies alias the first/last grid
    value; consumer and depot arcs get dedicated end energies.
    """

    def __init__(self, net, assignment):
        missing = set(net.pipes) - set(assignment)
        if missing:
            raise AssemblyError(f"assignment misses pipe '{sorted(missing)[0]}'")
        self.net = net
        self.assignment = dict(assignment)
        names, lower, upper, scale = [], [], [], []

        def add(name, lo, hi, sc):
            names.append(name)
            lower.append(lo)
            upper.append(hi)
            scale.append(sc)
            return len(names) - 1

        self.node_pressure = {}
        self.node_energy = {}
        for nid in sorted(net.nodes):
            node = net.nodes[nid]
            self.node_pressure[nid] = add(f"p[{nid}]", 0.0, node.pressure_max,
                                          SCALE_PRESSURE)
        for nid in sorted(net.nodes):
            node = net.nodes[nid]
            e_lo = energy_of_temperature(node.temperature_min, net.constants)
            e_hi = energy_of_temperature(node.temperature_max, net.constants)
            self.node_energy[nid] = add(f"e[{nid}]", e_lo, e_hi, SCALE_ENERGY)

        arcs = net.arcs()
        self.flow = {}
        self.split_pos = {}
        self.split_neg = {}
        for aid in sorted(arcs):
            arc = arcs[aid]
            self.flow[aid] = add(f"q[{aid}]", arc.flow_min, arc.flow_max,
                                 SCALE_FLOW)
        for aid in sorted(arcs):
            arc = arcs[aid]
            self.split_pos[aid] = add(f"qpos[{aid}]", 0.0,
                                      max(arc.flow_max, 0.0), SCALE_FLOW)
            self.split_neg[aid] = add(f"qneg[{aid}]", 0.0,
                                      max(-arc.flow_min, 0.0), SCALE_FLOW)

        self.pipe_pressure_in = {}
        self.pipe_pressure_out = {}
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            self.pipe_pressure_in[pid] = add(
                f"pin[{pid}]", 0.0, net.nodes[pipe.tail].pressure_max,
                SCALE_PRESSURE)
            self.pipe_pressure_out[pid] = add(
                f"pout[{pid}]", 0.0, net.nodes[pipe.head].pressure_max,
                SCALE_PRESSURE)

        self.grid_energy = {}
        self.grid_position = {}
        for pid in sorted(net.pipes):
            state = self.assignment[pid]
            grid = state.grid
            if abs(grid.length - net.pipes[pid].length) > 1e-9 * net.pipes[pid].length:
                raise AssemblyError(f"grid of pipe '{pid}' does not match its length")
            if state.level == 3:
                ks = [0, grid.n]
            else:
                ks = range(grid.n + 1)
            idx = [add(f"e[{pid}][{k}]", *GRID_ENERGY_BOUNDS, SCALE_ENERGY)
                   for k in ks]
            self.grid_energy[pid] = np.array(idx)
            self.grid_position[pid] = np.array([k * grid.dx for k in ks])

        self.end_energy = {}
        for cid in sorted(net.consumers):
            cons = net.consumers[cid]
            # The inflow threshold e >= e_ff is a consumer inequality row,
            # not a variable bound: restoration must be able to traverse
            # slightly-undersupplied states when model switches add losses.
            self.end_energy[(cid, "tail")] = add(
                f"eend[{cid}][tail]", *GRID_ENERGY_BOUNDS, SCALE_ENERGY)
            self.end_energy[(cid, "head")] = add(
                f"eend[{cid}][head]", cons.e_bf, cons.e_bf, SCALE_ENERGY)
        dep = net.depot
        self.end_energy[(dep.id, "tail")] = add(
            f"eend[{dep.id}][tail]", *GRID_ENERGY_BOUNDS, SCALE_ENERGY)
        self.end_energy[(dep.id, "head")] = add(
            f"eend[{dep.id}][head]", *GRID_ENERGY_BOUNDS, SCALE_ENERGY)

        self.power = {
            "P_p": add("P_p", 0.0, dep.pump_power_max, SCALE_POWER),
            "P_w": add("P_w", 0.0, dep.waste_power_max, SCALE_POWER),
            "P_g": add("P_g", 0.0, dep.gas_power_max, SCALE_POWER),
        }

        self.names = names
        self.index = {name: i for i, name in enumerate(names)}
        self.lower = np.array(lower)
        self.upper = np.array(upper)
        self.scale = np.array(scale)
        self.n = len(names)

    def arc_end_energy(self, aid: str, end: str) -> int:
        """Variable index of e_{a:u}; pipe ends alias grid endpoints."""
        if aid in self.net.pipes:
            grid_idx = self.grid_energy[aid]
            return int(grid_idx[0] if end == "tail" else grid_idx[-1])
        return self.end_energy[(aid, end)]


@dataclass
class SolutionVector:
    """All NLP variables of one assembled instance, in SI units."""

    layout: VariableLayout
    x: np.ndarray

    def value(self, name: str) -> float:
        return float(self.x[self.layout.index[name]])

    def as_dict(self) -> dict:
        return {name: float(self.x[i]) for i, name in enumerate(self.layout.names)}

    @classmethod
    def from_dict(cls, layout: VariableLayout, mapping: dict) -> "SolutionVector":
        x = np.array([mapping[name] for name in layout.names])
        return cls(layout, x)

    def pipe_state(self, pid: str):
        """(velocity, inflow energy) of a pipe, flow-direction aware."""
        lay = self.layout
        pipe = lay.net.pipes[pid]
        q = self.x[lay.flow[pid]]
        v = net_mod.mass_flow_to_velocity(pipe, q, lay.net.rho)
        grid_idx = lay.grid_energy[pid]
        e_in = self.x[grid_idx[0] if v >= 0 else grid_idx[-1]]
        return float(v), float(e_in)


class _LinearBlock:
    def __init__(self, n_vars):
        self.rows, self.cols, self.vals = [], [], []
        self.const = {}
        self.n_vars = n_vars

    def add(self, row, col, coef):
        self.rows.append(row)
        self.cols.append(col)
        self.vals.append(coef)

    def add_const(self, row, value):
        self.const[row] = self.const.get(row, 0.0) + value

    def freeze(self, n_rows):
        self.matrix = sp.csr_matrix(
            (self.vals, (self.rows, self.cols)), shape=(n_rows, self.n_vars))
        b = np.zeros(n_rows)
        for row, value in self.const.items():
            b[row] = value
        self.offset = b


class _BilinearBlock:
    """Terms coef * x_i * x_j added to rows (i != j)."""

    def __init__(self):
        self.row, self.i, self.j, self.coef = [], [], [], []

    def add(self, row, i, j, coef):
        self.row.append(row)
        self.i.append(i)
        self.j.append(j)
        self.coef.append(coef)

    def freeze(self):
        self.row = np.array(self.row, dtype=np.int64)
        self.i = np.array(self.i, dtype=np.int64)
        self.j = np.array(self.j, dtype=np.int64)
        self.coef = np.array(self.coef)

    def residual(self, x, out):
        np.add.at(out, self.row, self.coef * x[self.i] * x[self.j])

    def jacobian_parts(self, x):
        rows = np.concatenate([self.row, self.row])
        cols = np.concatenate([self.i, self.j])
        vals = np.concatenate([self.coef * x[self.j], self.coef * x[self.i]])
        return rows, cols, vals

    def hessian_parts(self, x, w):
        v = w[self.row] * self.coef
        return (np.concatenate([self.i, self.j]),
                np.concatenate([self.j, self.i]),
                np.concatenate([v, v]))


class _AbsFlowBlock:
    """Terms coef * |x_q| * x_q (pipe friction in the momentum rows)."""

    def __init__(self):
        self.row, self.q, self.coef = [], [], []

    def add(self, row, q, coef):
        self.row.append(row)
        self.q.append(q)
        self.coef.append(coef)

    def freeze(self):
        self.row = np.array(self.row, dtype=np.int64)
        self.q = np.array(self.q, dtype=np.int64)
        self.coef = np.array(self.coef)

    def residual(self, x, out):
        q = x[self.q]
        np.add.at(out, self.row, self.coef * np.abs(q) * q)

    def jacobian_parts(self, x):
        return self.row, self.q, self.coef * 2.0 * np.abs(x[self.q])

    def hessian_parts(self, x, w):
        return self.q, self.q, w[self.row] * self.coef * 2.0 * np.sign(x[self.q])


class _EnergyBlock:
    """Implicit-midpoint energy rows of levels 1-2 pipes.

    Row k of a pipe (scaled by 1/s):

        [ zeta (e_k - e_km) - dx (alpha m^2 + beta m + gamma0
          + fric |q| q^2) ] / s,   m = (e_k + e_km)/2,  zeta = q inv_arho.
    """

    def __init__(self):
        self.row, self.ek, self.ekm, self.q = [], [], [], []
        self.dx, self.alpha, self.beta, self.gamma0 = [], [], [], []
        self.fric, self.inv_arho, self.inv_scale = [], [], []

    def add(self, row, ek, ekm, q, dx, alpha, beta, gamma0, fric, inv_arho,
            inv_scale):
        self.row.append(row)
        self.ek.append(ek)
        self.ekm.append(ekm)
        self.q.append(q)
        self.dx.append(dx)
        self.alpha.append(alpha)
        self.beta.append(beta)
        self.gamma0.append(gamma0)
        self.fric.append(fric)
        self.inv_arho.append(inv_arho)
        self.inv_scale.append(inv_scale)

    def freeze(self):
        for name in ("row", "ek", "ekm", "q"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.int64))
        for name in ("dx", "alpha", "beta", "gamma0", "fric", "inv_arho",
                     "inv_scale"):
            setattr(self, name, np.array(getattr(self, name)))

    def residual(self, x, out):
        if self.row.size == 0:
            return
        ek, ekm, q = x[self.ek], x[self.ekm], x[self.q]
        m = 0.5 * (ek + ekm)
        zeta = q * self.inv_arho
        gamma = self.gamma0 + self.fric * np.abs(q) * q * q
        r = zeta * (ek - ekm) - self.dx * ((self.alpha * m + self.beta) * m + gamma)
        out[self.row] += r * self.inv_scale

    def jacobian_parts(self, x):
        if self.row.size == 0:
            return (np.empty(0, dtype=np.int64),) * 2 + (np.empty(0),)
        ek, ekm, q = x[self.ek], x[self.ekm], x[self.q]
        m = 0.5 * (ek + ekm)
        zeta = q * self.inv_arho
        dmid = self.dx * (self.alpha * m + 0.5 * self.beta)
        d_ek = (zeta - dmid) * self.inv_scale
        d_ekm = (-zeta - dmid) * self.inv_scale
        d_q = ((ek - ekm) * self.inv_arho
               - self.dx * self.fric * 3.0 * np.abs(q) * q) * self.inv_scale
        rows = np.concatenate([self.row] * 3)
        cols = np.concatenate([self.ek, self.ekm, self.q])
        vals = np.concatenate([d_ek, d_ekm, d_q])
        return rows, cols, vals

    def hessian_parts(self, x, w):
        if self.row.size == 0:
            return (np.empty(0, dtype=np.int64),) * 2 + (np.empty(0),)
        q = x[self.q]
        wr = w[self.row] * self.inv_scale
        c_ee = -0.5 * self.dx * self.alpha * wr
        c_eq = self.inv_arho * wr
        c_qq = -6.0 * self.dx * self.fric * np.abs(q) * wr
        rows = np.concatenate([self.ek, self.ekm, self.ek, self.ekm,
                               self.ek, self.q, self.ekm, self.q, self.q])
        cols = np.concatenate([self.ek, self.ekm, self.ekm, self.ek,
                               self.q, self.ek, self.q, self.ekm, self.q])
        vals = np.concatenate([c_ee, c_ee, c_ee, c_ee,
                               c_eq, c_eq, -c_eq, -c_eq, c_qq])
        return rows, cols, vals


class _ConstraintSet:
    """One residual vector (equalities or inequalities) built from blocks."""

    def __init__(self, n_vars):
        self.n_rows = 0
        self.labels = []
        self.linear = _LinearBlock(n_vars)
        self.bilinear = _BilinearBlock()
        self.absflow = _AbsFlowBlock()
        self.energy = _EnergyBlock()

    def new_row(self, label) -> int:
        self.labels.append(label)
        self.n_rows += 1
        return self.n_rows - 1

    def freeze(self):
        self.linear.freeze(self.n_rows)
        self.bilinear.freeze()
        self.absflow.freeze()
        self.energy.freeze()
        self.labels = np.array(self.labels)

    def residual(self, x):
        out = self.linear.matrix @ x + self.linear.offset
        self.bilinear.residual(x, out)
        self.absflow.residual(x, out)
        self.energy.residual(x, out)
        return out

    def jacobian(self, x):
        lin = self.linear.matrix.tocoo()
        parts = [(lin.row, lin.col, lin.data)]
        parts.append(self.bilinear.jacobian_parts(x))
        parts.append(self.absflow.jacobian_parts(x))
        parts.append(self.energy.jacobian_parts(x))
        rows = np.concatenate([p[0] for p in parts])
        cols = np.concatenate([p[1] for p in parts])
        vals = np.concatenate([p[2] for p in parts])
        return sp.csr_matrix((vals, (rows, cols)),
                             shape=(self.n_rows, self.linear.n_vars))

    def hessian_parts(self, x, w):
        """COO parts of sum_r w_r * hess(F_r); the linear block drops out."""
        parts = [
            self.bilinear.hessian_parts(x, w),
            self.absflow.hessian_parts(x, w),
            self.energy.hessian_parts(x, w),
        ]
        rows = np.concatenate([np.asarray(p[0], dtype=np.int64) for p in parts])
        cols = np.concatenate([np.asarray(p[1], dtype=np.int64) for p in parts])
        vals = np.concatenate([np.asarray(p[2]) for p in parts])
        return rows, cols, vals

    def family_rows(self, label) -> np.ndarray:
        return np.nonzero(self.labels == label)[0]


class NlpInstance:
    """Immutable assembled problem: residuals, Jacobians, objective, bounds."""

    def __init__(self, net, assignment, delta=0.0):
        if delta < 0:
            raise AssemblyError("relaxation delta must be >= 0")
        self.net = net
        self.delta = float(delta)
        self.layout = VariableLayout(net, assignment)
        self.assignment = self.layout.assignment
        lay = self.layout
        rho = net.rho

        eq = _ConstraintSet(lay.n)
        ineq = _ConstraintSet(lay.n)

        # --- momentum: pout - pin + L lam/(2 D A^2 rho) |q| q + L g rho h' = 0
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            area = net_mod.cross_section_area(pipe)
            s = 1.0 / ROW_SCALE["momentum"]
            row = eq.new_row("momentum")
            eq.linear.add(row, lay.pipe_pressure_out[pid], s)
            eq.linear.add(row, lay.pipe_pressure_in[pid], -s)
            eq.absflow.add(row, lay.flow[pid],
                           s * pipe.length * pipe.friction
                           / (2.0 * pipe.diameter * area * area * rho))
            eq.linear.add_const(row, s * pipe.length * GRAVITY * rho * pipe.slope)

        # --- energy rows per pipe
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            state = self.assignment[pid]
            grid_idx = lay.grid_energy[pid]
            s = ROW_SCALE["energy-discretized"]
            if state.level == 3:
                row = eq.new_row("energy-discretized")
                s3 = ROW_SCALE["energy-conserved"]
                eq.linear.add(row, int(grid_idx[-1]), 1.0 / s3)
                eq.linear.add(row, int(grid_idx[0]), -1.0 / s3)
                continue
            area = net_mod.cross_section_area(pipe)
            c = net.constants
            alpha = -4.0 * pipe.heat_transfer * c.theta2 / (pipe.diameter * c.e0**2)
            beta = -4.0 * pipe.heat_transfer * c.theta1 / (pipe.diameter * c.e0)
            gamma0 = -4.0 * pipe.heat_transfer / pipe.diameter \
                * (c.theta0 - pipe.wall_temperature)
            fric = 0.0
            if state.level == 1:
                fric = pipe.friction / (2.0 * pipe.diameter * area**3 * rho**2)
            for k in range(1, state.grid.n + 1):
                row = eq.new_row("energy-discretized")
                eq.energy.add(row, int(grid_idx[k]), int(grid_idx[k - 1]),
                              lay.flow[pid], state.grid.dx, alpha, beta,
                              gamma0, fric, 1.0 / (area * rho), 1.0 / s)

        # --- nodal mass balance: sum_out q - sum_in q = 0
        s = 1.0 / ROW_SCALE["mass-node"]
        for nid in sorted(net.nodes):
            row = eq.new_row("mass-node")
            for aid in net_mod.incident_arcs(net, nid, "out"):
                eq.linear.add(row, lay.flow[aid], s)
            for aid in net_mod.incident_arcs(net, nid, "in"):
                eq.linear.add(row, lay.flow[aid], -s)

        # --- pressure continuity at pipe ends
        s = 1.0 / ROW_SCALE["pressure-continuity"]
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            row = eq.new_row("pressure-continuity")
            eq.linear.add(row, lay.pipe_pressure_in[pid], s)
            eq.linear.add(row, lay.node_pressure[pipe.tail], -s)
            row = eq.new_row("pressure-continuity")
            eq.linear.add(row, lay.pipe_pressure_out[pid], s)
            eq.linear.add(row, lay.node_pressure[pipe.head], -s)

        # --- perfect mixing
        arcs = net.arcs()
        for nid in sorted(net.nodes):
            row = eq.new_row("mixing-balance")
            s = 1.0 / (rho * ROW_SCALE["mixing-balance"])
            for aid in sorted(net_mod.incident_arcs(net, nid, "in")):
                eq.bilinear.add(row, lay.flow[aid],
                                lay.arc_end_energy(aid, "head"), s)
            for aid in sorted(net_mod.incident_arcs(net, nid, "out")):
                eq.bilinear.add(row, lay.flow[aid],
                                lay.arc_end_energy(aid, "tail"), -s)
        for nid in sorted(net.nodes):
            s = 1.0 / ROW_SCALE["mixing-out"]
            for aid in sorted(net_mod.incident_arcs(net, nid, "out")):
                row = eq.new_row("mixing-out")
                eq.bilinear.add(row, lay.split_pos[aid],
                                lay.arc_end_energy(aid, "tail"), s)
                eq.bilinear.add(row, lay.split_pos[aid],
                                lay.node_energy[nid], -s)
            for aid in sorted(net_mod.incident_arcs(net, nid, "in")):
                row = eq.new_row("mixing-in")
                eq.bilinear.add(row, lay.split_neg[aid],
                                lay.arc_end_energy(aid, "head"), s)
                eq.bilinear.add(row, lay.split_neg[aid],
                                lay.node_energy[nid], -s)

        # --- flow split q - q+ + q- = 0
        s = 1.0 / ROW_SCALE["flow-split"]
        for aid in sorted(arcs):
            row = eq.new_row("flow-split")
            eq.linear.add(row, lay.flow[aid], s)
            eq.linear.add(row, lay.split_pos[aid], -s)
            eq.linear.add(row, lay.split_neg[aid], s)

        # --- depot
        dep = net.depot
        s = 1.0 / ROW_SCALE["depot-pressure"]
        row = eq.new_row("depot")
        eq.linear.add(row, lay.node_pressure[dep.tail], s)
        eq.linear.add_const(row, -s * dep.stagnation_pressure)
        s = 1.0 / (rho * ROW_SCALE["depot-power"])
        row = eq.new_row("depot")
        eq.bilinear.add(row, lay.flow[dep.id], lay.node_pressure[dep.head], s)
        eq.bilinear.add(row, lay.flow[dep.id], lay.node_pressure[dep.tail], -s)
        eq.linear.add(row, lay.power["P_p"], -1.0 / ROW_SCALE["depot-power"])
        row = eq.new_row("depot")
        eq.bilinear.add(row, lay.flow[dep.id],
                        lay.arc_end_energy(dep.id, "head"), s)
        eq.bilinear.add(row, lay.flow[dep.id],
                        lay.arc_end_energy(dep.id, "tail"), -s)
        eq.linear.add(row, lay.power["P_w"], -1.0 / ROW_SCALE["depot-power"])
        eq.linear.add(row, lay.power["P_g"], -1.0 / ROW_SCALE["depot-power"])

        # --- consumers: demand equality; pressure non-increase inequality
        for cid in sorted(net.consumers):
            cons = net.consumers[cid]
            s = 1.0 / (rho * ROW_SCALE["consumer-demand"])
            row = eq.new_row("consumer")
            eq.bilinear.add(row, lay.flow[cid],
                            lay.arc_end_energy(cid, "head"), s)
            eq.bilinear.add(row, lay.flow[cid],
                            lay.arc_end_energy(cid, "tail"), -s)
            eq.linear.add_const(row, cons.demand / ROW_SCALE["consumer-demand"])
            s = 1.0 / ROW_SCALE["consumer-pressure"]
            row = ineq.new_row("consumer")
            ineq.linear.add(row, lay.node_pressure[cons.head], s)
            ineq.linear.add(row, lay.node_pressure[cons.tail], -s)
            row = ineq.new_row("consumer")
            ineq.linear.add(row, lay.arc_end_energy(cid, "tail"),
                            -1.0 / SCALE_ENERGY)
            ineq.linear.add_const(row, cons.e_ff_min / SCALE_ENERGY)

        # --- complementarity: q+ q- - delta <= 0
        s = 1.0 / ROW_SCALE["complementarity"]
        for aid in sorted(arcs):
            row = ineq.new_row("complementarity")
            ineq.bilinear.add(row, lay.split_pos[aid], lay.split_neg[aid], s)
            ineq.linear.add_const(row, -s * self.delta)

        eq.freeze()
        ineq.freeze()
        self._eq = eq
        self._ineq = ineq

        grad = np.zeros(lay.n)
        grad[lay.power["P_p"]] = net.costs.pressure
        grad[lay.power["P_w"]] = net.costs.waste
        grad[lay.power["P_g"]] = net.costs.gas
        self._grad = grad

    # -- evaluation ----------------------------------------------------

    @property
    def n_vars(self) -> int:
        return self.layout.n

    @property
    def n_eq(self) -> int:
        return self._eq.n_rows

    @property
    def n_ineq(self) -> int:
        return self._ineq.n_rows

    def eq_residual(self, x) -> np.ndarray:
        return self._eq.residual(x)

    def eq_jacobian(self, x) -> sp.csr_matrix:
        return self._eq.jacobian(x)

    def ineq_residual(self, x) -> np.ndarray:
        return self._ineq.residual(x)

    def ineq_jacobian(self, x) -> sp.csr_matrix:
        return self._ineq.jacobian(x)

    def constraint_hessian(self, x, w_eq, w_in) -> sp.csr_matrix:
        """Weighted constraint curvature sum_r w_r hess(F_r), symmetric n x n."""
        pe = self._eq.hessian_parts(x, w_eq)
        pi = self._ineq.hessian_parts(x, w_in)
        rows = np.concatenate([pe[0], pi[0]])
        cols = np.concatenate([pe[1], pi[1]])
        vals = np.concatenate([pe[2], pi[2]])
        return sp.csr_matrix((vals, (rows, cols)),
                             shape=(self.layout.n, self.layout.n))

    def objective(self, x) -> float:
        """Operating cost in EUR/h (costs are EUR/Wh, powers W)."""
        return float(self._grad @ x)

    def objective_gradient(self) -> np.ndarray:
        return self._grad.copy()

    def bound_violation(self, x) -> float:
        lay = self.layout
        over = np.maximum(x - lay.upper, 0.0)
        under = np.maximum(lay.lower - x, 0.0)
        with np.errstate(invalid="ignore"):
            rel = np.maximum(over, under) / lay.scale
        return float(np.max(rel)) if lay.n else 0.0

    def residual_norms(self, x) -> dict:
        """Per-family max-norm of scaled constraint violations."""
        out = {}
        r = self.eq_residual(x)
        for fam in ("momentum", "energy-discretized", "mass-node",
                    "pressure-continuity", "mixing-balance", "mixing-out",
                    "mixing-in", "flow-split", "depot", "consumer"):
            rows = self._eq.family_rows(fam)
            out[fam] = float(np.max(np.abs(r[rows]))) if rows.size else 0.0
        g = self.ineq_residual(x)
        for fam in ("complementarity", "consumer"):
            rows = self._ineq.family_rows(fam)
            if rows.size:
                viol = float(np.max(np.maximum(g[rows], 0.0)))
                out[fam] = max(out.get(fam, 0.0), viol)
            else:
                out.setdefault(fam, 0.0)
        out["bounds"] = self.bound_violation(x)
        return out

    def max_complementarity(self, x) -> float:
        """Largest raw product q+ q- over all arcs."""
        lay = self.layout
        pos = np.array([lay.split_pos[a] for a in sorted(lay.net.arcs())])
        neg = np.array([lay.split_neg[a] for a in sorted(lay.net.arcs())])
        return float(np.max(x[pos] * x[neg]))

    def solution(self, x) -> SolutionVector:
        return SolutionVector(self.layout, np.asarray(x, dtype=float).copy())


def assemble(net, assignment, delta=0.0) -> NlpInstance:
    """Build the NLP for the given per-pipe levels and grids."""
    for pid, state in assignment.items():
        if not isinstance(state, PipeAssignment):
            raise AssemblyError(f"assignment for '{pid}' must be a PipeAssignment")
        if state.grid.n < 1:
            raise AssemblyError(f"pipe '{pid}' grid has no intervals")
    return NlpInstance(net, assignment, delta)


def objective_value(inst: NlpInstance, sol: SolutionVector) -> float:
    return inst.objective(sol.x)


def residual_norms(inst: NlpInstance, sol: SolutionVector) -> dict:
    return inst.residual_norms(sol.x)


def initial_point(inst: NlpInstance) -> np.ndarray:
    """Deterministic cold start.

    Consumer flows follow from their demand at the default energy spread;
    pipe flows solve the mass balance in the least-squares sense; energies
    start at the forward/backward thresholds; pressures at the stagnation
    pressure; powers at the implied heat duty.
    """
    net = inst.net
    lay = inst.layout
    x = np.zeros(lay.n)

    q_fixed = {}
    for cid, cons in net.consumers.items():
        q_fixed[cid] = net.rho * cons.demand / (cons.e_ff_min - cons.e_bf)
    q_fixed[net.depot.id] = sum(q_fixed.values())

    pipe_ids = sorted(net.pipes)
    col = {pid: k for k, pid in enumerate(pipe_ids)}
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(net.nodes))
    for r, nid in enumerate(sorted(net.nodes)):
        for aid in net_mod.incident_arcs(net, nid, "out"):
            if aid in col:
                rows.append(r), cols.append(col[aid]), vals.append(1.0)
            else:
                rhs[r] -= q_fixed[aid]
        for aid in net_mod.incident_arcs(net, nid, "in"):
            if aid in col:
                rows.append(r), cols.append(col[aid]), vals.append(-1.0)
            else:
                rhs[r] += q_fixed[aid]
    if pipe_ids:
        a = sp.csr_matrix((vals, (rows, cols)),
                          shape=(len(net.nodes), len(pipe_ids))).toarray()
        q_pipes, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    else:
        q_pipes = np.zeros(0)

    for aid, q in q_fixed.items():
        x[lay.flow[aid]] = q
    for pid in pipe_ids:
        x[lay.flow[pid]] = q_pipes[col[pid]]
    for aid in net.arcs():
        q = x[lay.flow[aid]]
        x[lay.split_pos[aid]] = max(q, 0.0)
        x[lay.split_neg[aid]] = max(-q, 0.0)

    e_ff = float(np.mean([c.e_ff_min for c in net.consumers.values()])) \
        if net.consumers else 0.35e9
    e_bf = float(np.mean([c.e_bf for c in net.consumers.values()])) \
        if net.consumers else 0.30e9
    for nid, node in net.nodes.items():
        x[lay.node_energy[nid]] = e_ff if node.kind == net_mod.FORWARD else e_bf
    for pid in pipe_ids:
        kind = net.nodes[net.pipes[pid].tail].kind
        x[lay.grid_energy[pid]] = e_ff if kind == net_mod.FORWARD else e_bf
    for cid, cons in net.consumers.items():
        x[lay.end_energy[(cid, "tail")]] = cons.e_ff_min
        x[lay.end_energy[(cid, "head")]] = cons.e_bf
    x[lay.end_energy[(net.depot.id, "tail")]] = e_bf
    x[lay.end_energy[(net.depot.id, "head")]] = e_ff

    p_s = net.depot.stagnation_pressure
    for nid in net.nodes:
        x[lay.node_pressure[nid]] = p_s
    for pid in pipe_ids:
        x[lay.pipe_pressure_in[pid]] = p_s
        x[lay.pipe_pressure_out[pid]] = p_s

    heat = (x[lay.flow[net.depot.id]] / net.rho) * (e_ff - e_bf)
    x[lay.power["P_w"]] = min(heat, net.depot.waste_power_max)
    x[lay.power["P_g"]] = max(heat - x[lay.power["P_w"]], 1.0)
    x[lay.power["P_p"]] = 100.0
    x = np.clip(x, lay.lower, lay.upper)
    return lift_supply_to_thresholds(inst, propagate_energies(inst, x))


def propagate_energies(inst: NlpInstance, x: np.ndarray) -> np.ndarray:
    """Recompute all energies by marching with the current flows.

    Keeps mass flows, pressures, and the depot supply energy of ``x``;
    re-derives node, pipe-grid, and arc-end energies by perfect mixing and
    per-pipe discrete propagation in flow order, and re-balances the heat
    powers. The result satisfies every energy-related row up to the
    mass-balance error of the flows, which makes it an excellent start for
    restoration after a model level or grid change (interpolated energies
    from a coarser model sit in a spurious least-squares basin otherwise).

    Nodes on flow-directed cycles (rare) are relaxed by a few extra mixing
    sweeps instead of a strict topological order.
    """
    lay = inst.layout
    net = lay.net
    x = x.copy()
    rho = net.rho
    arcs = net.arcs()

    flow_in = {nid: [] for nid in net.nodes}  # (arc, entering end at node)
    flow_out = {nid: [] for nid in net.nodes}
    for aid in sorted(arcs):
        arc = arcs[aid]
        q = x[lay.flow[aid]]
        if q >= 0:
            flow_out[arc.tail].append(aid)
            flow_in[arc.head].append(aid)
        else:
            flow_out[arc.head].append(aid)
            flow_in[arc.tail].append(aid)

    def inflow_end(aid, nid):
        """Variable index of the arc-end energy entering node nid."""
        arc = arcs[aid]
        return lay.arc_end_energy(aid, "head" if arc.head == nid else "tail")

    def push(nid):
        """Mix inflows at nid and propagate into all leaving arcs."""
        weights, values = [], []
        for aid in flow_in[nid]:
            weights.append(abs(x[lay.flow[aid]]))
            values.append(x[inflow_end(aid, nid)])
        total = sum(weights)
        if total > 1e-12:
            e_node = float(np.dot(weights, values) / total)
            i = lay.node_energy[nid]
            x[i] = np.clip(e_node, lay.lower[i], lay.upper[i])
        e_node = x[lay.node_energy[nid]]
        for aid in flow_out[nid]:
            arc = arcs[aid]
            if aid in net.pipes:
                q = x[lay.flow[aid]]
                v = net_mod.mass_flow_to_velocity(arc, q, rho)
                state = lay.assignment[aid]
                if abs(v) <= V_MIN:
                    x[lay.grid_energy[aid]] = e_node
                    continue
                profile = propagate_energy_discrete(
                    state.level, arc, v, e_node, state.grid, net.constants)
                if state.level == 3:
                    profile = profile[[0, -1]]
                x[lay.grid_energy[aid]] = profile
            elif aid in net.consumers:
                # Extraction is prescribed: inflow mixes, outflow is fixed.
                end = "tail" if arc.tail == nid else "head"
                x[lay.end_energy[(aid, end)]] = e_node
            else:
                end = "tail" if arc.tail == nid else "head"
                if end == "tail":
                    x[lay.end_energy[(aid, "tail")]] = e_node
                # The supply energy (head end) is a boundary value: keep it.

    # Seed: consumer outflow energies are fixed; the depot supply is kept,
    # so those arcs deliver known energies and do not gate the flow order.
    for cid, cons in net.consumers.items():
        x[lay.end_energy[(cid, "head")]] = cons.e_bf
    counts = {
        nid: sum(1 for aid in flow_in[nid] if aid in net.pipes)
        for nid in net.nodes
    }
    queue = sorted(nid for nid, d in counts.items() if d == 0)
    order = []
    seen = set()
    while queue:
        nid = queue.pop(0)
        if nid in seen:
            continue
        seen.add(nid)
        order.append(nid)
        for aid in flow_out[nid]:
            if aid not in net.pipes:
                continue
            arc = arcs[aid]
            other = arc.head if arc.head != nid else arc.tail
            counts[other] -= 1
            if counts[other] <= 0 and other not in seen:
                queue.append(other)
    leftovers = sorted(set(net.nodes) - seen)
    for nid in order + leftovers:
        push(nid)
    if leftovers:  # relaxation sweeps when flow-directed pipe cycles exist
        for _ in range(3):
            for nid in order + leftovers:
                push(nid)

    dep = net.depot
    q_d = x[lay.flow[dep.id]]
    heat = (q_d / rho) * (x[lay.end_energy[(dep.id, "head")]]
                          - x[lay.end_energy[(dep.id, "tail")]])
    heat = max(heat, 0.0)
    i_w, i_g = lay.power["P_w"], lay.power["P_g"]
    # Keep the waste/gas split choice, only rebalance the gas share.
    x[i_w] = np.clip(min(x[i_w], heat), lay.lower[i_w], lay.upper[i_w])
    x[i_g] = np.clip(heat - x[i_w], lay.lower[i_g], lay.upper[i_g])
    p_lift = (x[lay.node_pressure[dep.head]] - x[lay.node_pressure[dep.tail]])
    i_p = lay.power["P_p"]
    x[i_p] = np.clip((q_d / rho) * p_lift, lay.lower[i_p], lay.upper[i_p])
    return np.clip(x, lay.lower, lay.upper)


def lift_supply_to_thresholds(inst: NlpInstance, x: np.ndarray,
                              margin: float = 2e5) -> np.ndarray:
    """Raise the depot supply energy until consumer inflows clear their
    thresholds (plus a small margin), re-propagating after each lift.

    The supply energy is the free boundary value of the energy subsystem;
    restoration holds it fixed, so it must start high enough that the
    inflow-threshold inequalities are satisfiable.
    """
    lay = inst.layout
    net = lay.net
    supply_idx = lay.end_energy[(net.depot.id, "head")]
    # The supply cannot exceed the depot outlet node's temperature bound.
    cap = min(lay.upper[supply_idx], lay.upper[lay.node_energy[net.depot.head]])
    for _ in range(8):
        shortfall = 0.0
        for cid, cons in net.consumers.items():
            e_in = x[lay.end_energy[(cid, "tail")]]
            shortfall = max(shortfall, cons.e_ff_min - e_in)
        if shortfall <= 0.0:
            return x
        lifted = min(x[supply_idx] + shortfall + margin, cap)
        if lifted <= x[supply_idx]:
            return x
        x[supply_idx] = lifted
        x = propagate_energies(inst, x)
    return x


def warm_start(old: SolutionVector, new_layout: VariableLayout) -> np.ndarray:
    """Transfer a solution onto a new assignment over the same network.

    Shared variables copy by name; pipe grid energies transfer by piecewise
    linear interpolation in position; split parts are re-derived from the
    mass flows (exactly complementary).
    """
    old_lay = old.layout
    x = np.empty(new_layout.n)
    for i, name in enumerate(new_layout.names):
        j = old_lay.index.get(name)
        x[i] = old.x[j] if j is not None else np.nan

    for pid in new_layout.net.pipes:
        old_pos = old_lay.grid_position[pid]
        old_vals = old.x[old_lay.grid_energy[pid]]
        new_pos = new_layout.grid_position[pid]
        x[new_layout.grid_energy[pid]] = np.interp(new_pos, old_pos, old_vals)

    for aid in new_layout.net.arcs():
        q = x[new_layout.flow[aid]]
        x[new_layout.split_pos[aid]] = max(q, 0.0)
        x[new_layout.split_neg[aid]] = max(-q, 0.0)

    assert not np.any(np.isnan(x)), "warm start left unset variables"
    return np.clip(x, new_layout.lower, new_layout.upper)
