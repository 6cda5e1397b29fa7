"""Local NLP solver tailored to the almost-square network problems.

The assembled problems have very few degrees of freedom: the physics rows
determine nearly every variable, the linear cost only resolves a small
trade-off manifold (supply energy level, heat source split), and many
variables sit at bounds. The solver therefore works in reduced space:

  * homotopy: the complementarity products are relaxed geometrically
    (delta from 1e-2 down to 1e-8) so mass flows can change sign early,
  * restoration: a damped Gauss-Newton method on the constraint residuals
    (bounds by projection) produces a feasible point from any start,
  * reduced optimization: least-squares multiplier estimates give the
    projected reduced gradient of the cost on the constraint manifold;
    projected line-search steps along it are re-feasibilized by
    restoration after each trial,
  * polish: damped Newton on the primal-dual KKT system with an active-set
    estimate and exact constraint curvature drives feasibility and
    stationarity to their tight tolerances.

Variables are scaled by their characteristic magnitudes (bar, GJ/m3, kg/s,
1e4 W); residual rows are already scaled by the assembly. A solve is
deterministic: identical inputs produce identical iteration logs.

The backend contract is small -- residuals, Jacobians, objective gradient in;
primal point, multipliers, status out -- so an external NLP code can replace
``solve`` behind the same interface.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import NlpInstance, SolutionVector, initial_point

LOCAL_OPTIMUM = "LocalOptimum"
INFEASIBLE = "Infeasible"
ITERATION_LIMIT = "IterationLimit"
NUMERIC_FAILURE = "NumericFailure"

_ACTIVE_TOL = 1e-10


@dataclass(frozen=True)
class SolverOptions:
    feasibility_tol: float = 1e-8
    stationarity_tol: float = 1e-6
    delta_init: float = 1e-2
    delta_final: float = 1e-8
    delta_factor: float = 0.1
    max_homotopy_steps: int = 7
    max_inner_iterations: int = 400
    max_polish_iterations: int = 40
    regularization_floor: float = 1e-10

    def __post_init__(self):
        if min(self.feasibility_tol, self.stationarity_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.delta_factor < 1 and self.delta_final <= self.delta_init):
            raise ValueError("delta schedule must be strictly decreasing")

    def delta_schedule(self, floor: float = 0.0):
        """Geometric relaxation schedule, never below the instance delta."""
        out = []
        d = self.delta_init
        for _ in range(self.max_homotopy_steps):
            out.append(max(d, self.delta_final, floor))
            if out[-1] <= max(self.delta_final, floor):
                break
            d *= self.delta_factor
        return out


@dataclass
class SolveResult:
    status: str
    solution: SolutionVector
    objective: float
    kkt: dict
    duals: dict
    iterations: dict
    complementarity: float
    wall_time: float
    log: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.status == LOCAL_OPTIMUM


class _Workspace:
    """Scaled view of one instance.

    Inequalities are tracked without slack variables: the violation vector
    is max(g, 0) and active rows (g close to zero or positive multiplier)
    join the equalities where a square system is needed.
    """

    def __init__(self, inst: NlpInstance, opts: SolverOptions):
        self.inst = inst
        self.opts = opts
        lay = inst.layout
        self.n = lay.n
        self.m_eq = inst.n_eq
        self.m_in = inst.n_ineq
        self.var_scale = lay.scale
        self._scale_diag = sp.diags(lay.scale)
        self.lo = lay.lower / lay.scale
        self.hi = lay.upper / lay.scale
        self.fixed = (lay.upper - lay.lower) <= _ACTIVE_TOL * lay.scale
        self.grad_obj = inst.objective_gradient() * lay.scale
        self.comp_rows = inst._ineq.family_rows("complementarity")
        # Natural degrees of freedom held fixed during restoration: the
        # supply energy boundary value and the heat-source split. Without
        # this the least-squares phase chases a weak circulating mode
        # around the network loop.
        self.restore_freeze = np.zeros(lay.n, dtype=bool)
        self.restore_freeze[lay.end_energy[(inst.net.depot.id, "head")]] = True
        self.restore_freeze[lay.power["P_w"]] = True

    def x_of(self, u):
        return u * self.var_scale

    def u_of(self, x):
        return np.clip(x / self.var_scale, self.lo, self.hi)

    def eq(self, u):
        return self.inst.eq_residual(self.x_of(u))

    def ineq(self, u, delta):
        g = self.inst.ineq_residual(self.x_of(u))
        if self.comp_rows.size:
            g[self.comp_rows] += self.inst.delta - delta
        return g

    def eq_jac(self, u):
        return self.inst.eq_jacobian(self.x_of(u)) @ self._scale_diag

    def ineq_jac(self, u):
        return self.inst.ineq_jacobian(self.x_of(u)) @ self._scale_diag

    def curvature(self, u, w_eq, w_in):
        h = self.inst.constraint_hessian(self.x_of(u), w_eq, w_in)
        return self._scale_diag @ h @ self._scale_diag

    def violation(self, u, delta):
        """[eq residuals; positive part of inequality residuals]."""
        g = self.ineq(u, delta)
        return np.concatenate([self.eq(u), np.maximum(g, 0.0)])

    def feasibility(self, u, delta):
        v = self.violation(u, delta)
        return float(np.max(np.abs(v))) if v.size else 0.0

    def grad_lagrangian(self, u, y_eq, y_in):
        grad = self.grad_obj + self.eq_jac(u).T @ y_eq
        if self.m_in:
            grad = grad + self.ineq_jac(u).T @ y_in
        return grad

    def stationarity(self, u, y_eq, y_in):
        grad = self.grad_lagrangian(u, y_eq, y_in)
        return float(np.max(np.abs(np.clip(u - grad, self.lo, self.hi) - u)))

    def free_mask(self, u, grad):
        at_lo = (u <= self.lo + _ACTIVE_TOL) & (grad > 0)
        at_hi = (u >= self.hi - _ACTIVE_TOL) & (grad < 0)
        return ~(at_lo | at_hi | self.fixed)

    def interior_mask(self, u):
        return ~((u <= self.lo + _ACTIVE_TOL) | (u >= self.hi - _ACTIVE_TOL))

    def snap_splits(self, u):
        """Project the flow splits onto exact complementarity (q+ q- = 0)."""
        lay = self.inst.layout
        x = self.x_of(u)
        for aid in lay.net.arcs():
            q = x[lay.flow[aid]]
            x[lay.split_pos[aid]] = max(q, 0.0)
            x[lay.split_neg[aid]] = max(-q, 0.0)
        return self.u_of(x)


def _solve_saddle(hess_free, jac_free, grad_free, resid, tau, dual_reg):
    """Solve [[H + tau I, J^T], [J, -dual_reg I]] [d; w] = [-grad; -resid].

    The dual regularization absorbs linearly dependent rows (the nodal
    balance rows sum to zero over the network).
    """
    m, nf = jac_free.shape
    k = sp.bmat(
        [[hess_free + sp.identity(nf) * tau, jac_free.T],
         [jac_free, -sp.identity(m) * dual_reg]],
        format="csc",
    )
    rhs = np.concatenate([-grad_free, -resid])
    try:
        sol = spla.splu(k).solve(rhs)
    except RuntimeError:
        return None, None
    if not np.all(np.isfinite(sol)):
        return None, None
    return sol[:nf], sol[nf:]


def _restore(ws: _Workspace, u, delta, target, max_iter, freeze=True):
    """Damped Gauss-Newton on the constraint violation, bounds projected.

    The violated inequalities enter the least-squares merit through their
    positive part (C1 smooth). A Levenberg-Marquardt parameter steered by
    the gain ratio controls the step length: the constraint rows are
    strongly curved (bilinear mixing), so undamped Gauss-Newton steps
    overshoot badly even though the linearized residual vanishes.

    Returns (u, converged, iterations).
    """

    def violations(v):
        r = ws.eq(v)
        g = ws.ineq(v, delta)
        return r, np.maximum(g, 0.0)

    from .assembly import propagate_energies

    tau = None
    for it in range(max_iter):
        if freeze:
            # Block elimination: march the energies to match the current
            # flows so each step only has to repair the flow/pressure/
            # demand equations; the energy subsystem never drifts.
            u = ws.u_of(propagate_energies(ws.inst, ws.x_of(u)))
        r, gpos = violations(u)
        viol = max(float(np.max(np.abs(r))) if r.size else 0.0,
                   float(np.max(gpos)) if gpos.size else 0.0)
        if viol <= target:
            return u, True, it
        merit = float(r @ r + gpos @ gpos)
        act = np.nonzero(gpos > 0.0)[0]

        def act_resid(v):
            # Smooth extension on the frozen active set (no positive-part
            # clipping): used only for the curvature probes.
            return np.concatenate([ws.eq(v), ws.ineq(v, delta)[act]])

        resid = np.concatenate([r, gpos[act]])
        jac = sp.vstack([ws.eq_jac(u), ws.ineq_jac(u)[act]], format="csr")
        grad = jac.T @ resid
        free = ws.free_mask(u, grad)
        if freeze:
            free &= ~ws.restore_freeze
        if not free.any():
            return u, False, it
        jf = jac[:, free]
        nf = int(free.sum())
        m = jf.shape[0]
        if tau is None:
            tau = 1e-3 * float((jf.multiply(jf)).sum(axis=0).max())
        moved = False
        for _ in range(30):
            k = sp.bmat(
                [[sp.identity(nf) * tau, jf.T], [jf, -sp.identity(m)]],
                format="csc",
            )
            try:
                lu = spla.splu(k)
                d_free = lu.solve(np.concatenate([np.zeros(nf), -resid]))[:nf]
            except RuntimeError:
                d_free = None
            if d_free is None or not np.all(np.isfinite(d_free)):
                tau = max(tau, 1e-10) * 100.0
                if tau > 1e14:
                    return u, False, it
                continue
            d = np.zeros_like(u)
            d[free] = d_free
            # Geodesic acceleration: second-order correction along d, the
            # standard cure for the curved narrow valleys these circuit
            # equations produce.
            h = 0.1
            fvv = (act_resid(np.clip(u + h * d, ws.lo, ws.hi))
                   - 2.0 * resid
                   + act_resid(np.clip(u - h * d, ws.lo, ws.hi))) / h**2
            d2 = np.zeros_like(u)
            d2_free = lu.solve(np.concatenate([np.zeros(nf), -0.5 * fvv]))[:nf]
            if np.all(np.isfinite(d2_free)) \
                    and np.linalg.norm(d2_free) < 0.75 * np.linalg.norm(d_free):
                d2[free] = d2_free
            cand = np.clip(u + d + d2, ws.lo, ws.hi)
            if np.array_equal(cand, u):
                tau = max(tau, 1e-10) * 10.0
                if tau > 1e14:
                    return u, False, it
                continue
            r_c, g_c = violations(cand)
            merit_c = float(r_c @ r_c + g_c @ g_c)
            if merit_c >= merit and np.any(d2):
                cand = np.clip(u + d, ws.lo, ws.hi)
                r_c, g_c = violations(cand)
                merit_c = float(r_c @ r_c + g_c @ g_c)
            if merit_c < merit:
                lin = resid + jf @ d_free
                predicted = merit - float(lin @ lin)
                gain = (merit - merit_c) / max(predicted, 1e-300)
                u = cand
                moved = True
                if gain > 0.75:
                    tau = max(tau / 3.0, 1e-12)
                elif gain < 0.25:
                    tau *= 2.0
                break
            tau = max(tau, 1e-12) * 4.0
            if tau > 1e14:
                return u, False, it
        if not moved:
            return u, False, it
    r, gpos = violations(u)
    viol = max(float(np.max(np.abs(r))) if r.size else 0.0,
               float(np.max(gpos)) if gpos.size else 0.0)
    return u, viol <= target, max_iter


def _lsq_multipliers(ws: _Workspace, u, delta):
    """Least-squares multiplier estimate on the free variables.

    Inactive inequalities get zero multipliers; active ones are clipped to
    be non-negative after the unconstrained fit.
    """
    jac_eq = ws.eq_jac(u)
    active = np.nonzero(_near_active(ws, u, delta))[0]
    jac_in = ws.ineq_jac(u)[active]
    jac = sp.vstack([jac_eq, jac_in], format="csr")
    lam_eq = np.zeros(ws.m_eq)
    lam_in = np.zeros(ws.m_in)
    free = ws.interior_mask(u)
    if not free.any():
        return lam_eq, lam_in
    at_lo = u <= ws.lo + _ACTIVE_TOL
    at_hi = u >= ws.hi - _ACTIVE_TOL
    # The multiplier manifold is not unique (balance rows are dependent);
    # the plain minimum-norm fit over the free variables can leave
    # wrong-signed leftovers at active bounds. Re-fit with those
    # components added as targets until the signs are consistent. Each fit
    # solves the damped normal equations through one sparse factorization
    # (an iterative solver is far too slow on refined grids).
    def damped_fit(cols):
        a = jac[:, cols].T  # (n_target x m)
        nt, m = a.shape
        k = sp.bmat(
            [[sp.identity(nt), a], [a.T, -sp.identity(m) * 1e-12]],
            format="csc",
        )
        rhs = np.concatenate([-ws.grad_obj[cols], np.zeros(m)])
        try:
            return spla.splu(k).solve(rhs)[nt:]
        except RuntimeError:
            return spla.lsqr(a, -ws.grad_obj[cols], atol=1e-14, btol=1e-14,
                             iter_lim=4 * (nt + m))[0]

    target = free.copy()
    sol = np.zeros(jac.shape[0])
    for _ in range(10):
        sol = damped_fit(target)
        grad = ws.grad_obj + jac.T @ sol
        wrong = (at_hi & ~ws.fixed & (grad > 1e-9)) \
            | (at_lo & ~ws.fixed & (grad < -1e-9))
        wrong &= ~target
        if not wrong.any():
            break
        target |= wrong
    lam_eq = sol[:ws.m_eq]
    lam_in[active] = np.maximum(0.0, sol[ws.m_eq:])
    return lam_eq, lam_in


def _near_active(ws: _Workspace, u, delta):
    """Inequalities to treat as potentially binding.

    Complementarity rows are binding only when the product actually sits
    at its relaxation bound; with snapped splits (product zero) they stay
    inactive for every delta > 0.
    """
    g = ws.ineq(u, delta)
    thr = np.full(ws.m_in, -1e-7)
    if ws.comp_rows.size:
        thr[ws.comp_rows] = -0.5 * max(delta, 1e-300)
    return g >= thr


class _ReducedModel:
    """Shooting parametrization of the network problem.

    Unknowns: all arc mass flows, the forward-part pressure anchor (at the
    depot outlet node), the supply energy, and the waste power. Everything
    else follows: energies by flow-ordered propagation, pressures by a
    spanning-tree walk per flow part, the remaining powers from the depot
    rows. What is left of the constraints is small and dense: nodal mass
    balances (one redundant row dropped), pressure loop closures for the
    non-tree pipes, consumer demands, and simple inequalities. The local
    solve then runs in this well-conditioned reduced space.
    """

    def __init__(self, inst: NlpInstance):
        from . import network as net_mod
        from .assembly import SCALE_ENERGY, SCALE_POWER, SCALE_PRESSURE

        self.inst = inst
        self.net = inst.net
        self.lay = inst.layout
        net = self.net
        self.arc_ids = sorted(net.arcs())
        self.n_arcs = len(self.arc_ids)
        self.arc_pos = {aid: k for k, aid in enumerate(self.arc_ids)}
        self.e_scale = SCALE_ENERGY
        self.p_scale = SCALE_PRESSURE
        self.w_scale = SCALE_POWER
        self.n = self.n_arcs + 3  # flows, anchor pressure, supply, waste

        # Spanning trees of the pipe subgraphs per flow part; BFS from the
        # depot endpoints. Non-tree pipes give loop-closure rows.
        anchors = {net_mod.BACKWARD: net.depot.tail,
                   net_mod.FORWARD: net.depot.head}
        parent = {}
        self.tree_order = []
        seen = set(anchors.values())
        queue = sorted(anchors.values())
        adj = {nid: [] for nid in net.nodes}
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            adj[pipe.tail].append((pid, pipe.head))
            adj[pipe.head].append((pid, pipe.tail))
        tree_pipes = set()
        while queue:
            nid = queue.pop(0)
            for pid, other in sorted(adj[nid]):
                if other not in seen and pid not in tree_pipes:
                    seen.add(other)
                    tree_pipes.add(pid)
                    parent[other] = (pid, nid)
                    self.tree_order.append((other, pid, nid))
                    queue.append(other)
        self.chords = [pid for pid in sorted(net.pipes) if pid not in tree_pipes]
        # Mass rows: drop the depot head node's (one redundancy network-wide).
        self.mass_nodes = [nid for nid in sorted(net.nodes)
                           if nid != net.depot.head]

        lo = []
        hi = []
        arcs = net.arcs()
        for aid in self.arc_ids:
            lo.append(arcs[aid].flow_min)
            hi.append(arcs[aid].flow_max)
        lay = self.lay
        i_anchor = lay.node_pressure[net.depot.head]
        lo.append(lay.lower[i_anchor] / self.p_scale)
        hi.append(lay.upper[i_anchor] / self.p_scale)
        i_sup = lay.end_energy[(net.depot.id, "head")]
        i_nd = lay.node_energy[net.depot.head]
        lo.append(max(lay.lower[i_sup], lay.lower[i_nd]) / self.e_scale)
        hi.append(min(lay.upper[i_sup], lay.upper[i_nd]) / self.e_scale)
        i_w = lay.power["P_w"]
        lo.append(lay.lower[i_w] / self.w_scale)
        hi.append(min(lay.upper[i_w], 1e9) / self.w_scale)
        self.lo = np.array(lo)
        self.hi = np.array(hi)

    def pack(self, x) -> np.ndarray:
        lay = self.lay
        z = np.empty(self.n)
        for k, aid in enumerate(self.arc_ids):
            z[k] = x[lay.flow[aid]]
        z[self.n_arcs] = x[lay.node_pressure[self.net.depot.head]] / self.p_scale
        z[self.n_arcs + 1] = \
            x[lay.end_energy[(self.net.depot.id, "head")]] / self.e_scale
        z[self.n_arcs + 2] = x[lay.power["P_w"]] / self.w_scale
        return np.clip(z, self.lo, self.hi)

    def unpack(self, z, x_base) -> np.ndarray:
        """Expand reduced variables to a full, physics-consistent vector."""
        from . import network as net_mod
        from .assembly import propagate_energies
        from .pipes import pressure_drop

        lay = self.lay
        net = self.net
        x = x_base.copy()
        for k, aid in enumerate(self.arc_ids):
            q = z[k]
            x[lay.flow[aid]] = q
            x[lay.split_pos[aid]] = max(q, 0.0)
            x[lay.split_neg[aid]] = max(-q, 0.0)
        x[lay.end_energy[(net.depot.id, "head")]] = \
            z[self.n_arcs + 1] * self.e_scale
        x = propagate_energies(self.inst, x)

        # Pressures: anchor each part, then walk the spanning tree.
        p = {net.depot.tail: net.depot.stagnation_pressure,
             net.depot.head: z[self.n_arcs] * self.p_scale}
        for nid, pid, from_nid in self.tree_order:
            pipe = net.pipes[pid]
            q = x[lay.flow[pid]]
            v = net_mod.mass_flow_to_velocity(pipe, q, net.rho)
            drop = pressure_drop(pipe, v, net.rho)  # p(L) - p(0)
            if pipe.tail == from_nid:
                p[nid] = p[from_nid] + drop
            else:
                p[nid] = p[from_nid] - drop
        for nid, value in p.items():
            x[lay.node_pressure[nid]] = value
        for pid in sorted(net.pipes):
            pipe = net.pipes[pid]
            x[lay.pipe_pressure_in[pid]] = p[pipe.tail]
            x[lay.pipe_pressure_out[pid]] = p[pipe.head]

        q_d = x[lay.flow[net.depot.id]]
        heat = (q_d / net.rho) * (
            x[lay.end_energy[(net.depot.id, "head")]]
            - x[lay.end_energy[(net.depot.id, "tail")]])
        p_w = z[self.n_arcs + 2] * self.w_scale
        x[lay.power["P_w"]] = p_w
        x[lay.power["P_g"]] = heat - p_w
        x[lay.power["P_p"]] = (q_d / net.rho) * (p[net.depot.head]
                                                 - p[net.depot.tail])
        return x

    def residuals(self, x) -> np.ndarray:
        """Reduced equality system at an unpacked point."""
        from . import network as net_mod

        lay = self.lay
        net = self.net
        out = []
        for nid in self.mass_nodes:
            total = 0.0
            for aid in net_mod.incident_arcs(net, nid, "out"):
                total += x[lay.flow[aid]]
            for aid in net_mod.incident_arcs(net, nid, "in"):
                total -= x[lay.flow[aid]]
            out.append(total / 10.0)
        for pid in self.chords:
            pipe = net.pipes[pid]
            from .pipes import pressure_drop
            q = x[lay.flow[pid]]
            v = net_mod.mass_flow_to_velocity(pipe, q, net.rho)
            drop = pressure_drop(pipe, v, net.rho)
            lhs = x[lay.node_pressure[pipe.tail]] + drop
            out.append((lhs - x[lay.node_pressure[pipe.head]]) / self.p_scale)
        for cid in sorted(net.consumers):
            cons = net.consumers[cid]
            q = x[lay.flow[cid]]
            e_in = x[lay.end_energy[(cid, "tail")]]
            e_out = x[lay.end_energy[(cid, "head")]]
            out.append(((q / net.rho) * (e_out - e_in) + cons.demand)
                       / self.w_scale)
        return np.array(out)

    def inequalities(self, x) -> np.ndarray:
        """Reduced inequality system g(x) <= 0 at an unpacked point."""
        lay = self.lay
        net = self.net
        out = []
        for cid in sorted(net.consumers):
            cons = net.consumers[cid]
            out.append((cons.e_ff_min
                        - x[lay.end_energy[(cid, "tail")]]) / self.e_scale)
            out.append((x[lay.node_pressure[cons.head]]
                        - x[lay.node_pressure[cons.tail]]) / self.p_scale)
        for nid in sorted(net.nodes):
            i_p = lay.node_pressure[nid]
            out.append((x[i_p] - lay.upper[i_p]) / self.p_scale)
            out.append((lay.lower[i_p] - x[i_p]) / self.p_scale)
            i_e = lay.node_energy[nid]
            out.append((x[i_e] - lay.upper[i_e]) / self.e_scale)
            out.append((lay.lower[i_e] - x[i_e]) / self.e_scale)
        for name in ("P_p", "P_g"):
            i = lay.power[name]
            out.append((x[i] - min(lay.upper[i], 1e12)) / self.w_scale)
            out.append((lay.lower[i] - x[i]) / self.w_scale)
        return np.array(out)


def _reduced_solve(ws: _Workspace, x_start, log):
    """Local solve in the shooting space via SLSQP.

    Returns a full-space vector (physics-consistent by construction) or
    None when scipy does not converge to a useful point.
    """
    from scipy.optimize import minimize

    from scipy.optimize import least_squares

    inst = ws.inst
    model = _ReducedModel(inst)
    x_base = x_start.copy()
    z0 = model.pack(x_start)
    grad = inst.objective_gradient()

    def unpack(z):
        return model.unpack(z, x_base)

    def objective(z):
        return float(grad @ unpack(z))

    def violation(x):
        r = model.residuals(x)
        g = model.inequalities(x)
        return max(float(np.max(np.abs(r))) if r.size else 0.0,
                   float(np.max(g)) if g.size else 0.0)

    # Feasibility first: SLSQP stalls from strongly infeasible starts.
    def feas_vector(z):
        x = unpack(z)
        return np.concatenate([model.residuals(x),
                               np.maximum(model.inequalities(x), 0.0)])

    if violation(unpack(z0)) > 1e-7:
        try:
            lsq = least_squares(
                feas_vector, z0, method="trf", x_scale="jac",
                bounds=(model.lo, model.hi), xtol=1e-12, ftol=1e-12,
                gtol=1e-12, max_nfev=600,
            )
            z0 = lsq.x
            log.append(f"  reduced restore: nfev={lsq.nfev} "
                       f"viol={violation(unpack(z0)):.2e}")
        except (ValueError, FloatingPointError) as exc:
            log.append(f"  reduced restore failed: {exc}")

    cons = [
        {"type": "eq", "fun": lambda z: model.residuals(unpack(z))},
        {"type": "ineq", "fun": lambda z: -model.inequalities(unpack(z))},
    ]
    try:
        res = minimize(
            objective, z0, method="SLSQP", constraints=cons,
            bounds=list(zip(model.lo, model.hi)),
            options={"maxiter": 250, "ftol": 1e-12},
        )
    except (ValueError, FloatingPointError) as exc:
        log.append(f"  reduced solve failed: {exc}")
        return None
    x = unpack(res.x)
    viol = violation(x)
    log.append(f"  reduced solve: iters={res.nit} obj={res.fun:.6f} "
               f"viol={viol:.2e} ok={res.success}")
    if np.all(np.isfinite(x)) and viol <= 1e-4:
        return x
    # Fall back to the feasible least-squares point when the optimizer
    # wandered; the caller still improves it with the full-space phases.
    x = unpack(z0)
    if np.all(np.isfinite(x)) and violation(x) <= 1e-4:
        log.append("  reduced solve rejected; keeping restored point")
        return x
    return None


def _kkt_polish(ws: _Workspace, u, y_eq, y_in, delta, max_iter, log):
    """Damped Newton on the primal-dual system with an active-set estimate.

    Treats active inequalities as equalities, drops inactive ones, fixes
    bound-active variables, and iterates Newton on the remaining square
    KKT system with exact curvature. Bounds or inequalities whose implied
    multiplier has the wrong sign are released between rounds.
    """
    released_bounds = np.zeros(ws.n, dtype=bool)
    released_ineq = np.zeros(ws.m_in, dtype=bool)
    best = (np.inf, u.copy(), y_eq.copy(), y_in.copy())
    for round_ in range(6):
        active_in = np.nonzero((_near_active(ws, u, delta) | (y_in > 1e-9))
                               & ~released_ineq)[0]
        grad = ws.grad_lagrangian(u, y_eq, y_in)
        at_lo = (u <= ws.lo + _ACTIVE_TOL) & (grad >= -1e-9)
        at_hi = (u >= ws.hi - _ACTIVE_TOL) & (grad <= 1e-9)
        free = (~(at_lo | at_hi) | released_bounds) & ~ws.fixed
        y_act = y_in[active_in]

        inactive = np.ones(ws.m_in, dtype=bool)
        inactive[active_in] = False

        def kkt(u_, y_eq_, y_act_):
            y_full = np.zeros(ws.m_in)
            y_full[active_in] = y_act_
            g_ = ws.ineq(u_, delta)
            resid = np.concatenate([ws.eq(u_), g_[active_in]])
            grad_ = ws.grad_lagrangian(u_, y_eq_, y_full)
            # Dropped inequalities still guard the merit so Newton cannot
            # trample them while solving the active system.
            spill = float(np.max(np.maximum(g_[inactive], 0.0))) \
                if inactive.any() else 0.0
            return resid, grad_, spill

        tau = ws.opts.regularization_floor
        for _ in range(max_iter):
            resid, grad, spill = kkt(u, y_eq, y_act)
            theta = max(
                float(np.max(np.abs(resid))) if resid.size else 0.0,
                float(np.max(np.abs(grad[free]))) if free.any() else 0.0,
                spill,
            )
            if theta <= 1e-11:
                break
            jac = sp.vstack([ws.eq_jac(u), ws.ineq_jac(u)[active_in]],
                            format="csr")
            y_full = np.zeros(ws.m_in)
            y_full[active_in] = y_act
            hess = ws.curvature(u, y_eq, y_full)
            du_f, dy = _solve_saddle(hess[free][:, free], jac[:, free],
                                     grad[free], resid, tau, 1e-12)
            if du_f is None:
                tau = max(tau, 1e-10) * 100.0
                if tau > 1e8:
                    break
                continue
            du = np.zeros_like(u)
            du[free] = du_f
            step = 1.0
            accepted = False
            for _ in range(30):
                u_c = np.clip(u + step * du, ws.lo, ws.hi)
                y_eq_c = y_eq + step * dy[:ws.m_eq]
                y_act_c = y_act + step * dy[ws.m_eq:]
                resid_c, grad_c, spill_c = kkt(u_c, y_eq_c, y_act_c)
                th_c = max(
                    float(np.max(np.abs(resid_c))) if resid_c.size else 0.0,
                    float(np.max(np.abs(grad_c[free]))) if free.any() else 0.0,
                    spill_c,
                )
                if th_c < (1.0 - 1e-4 * step) * theta:
                    u, y_eq, y_act = u_c, y_eq_c, y_act_c
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                tau = max(tau, 1e-10) * 100.0
                if tau > 1e8:
                    break
        y_in = np.zeros(ws.m_in)
        y_in[active_in] = y_act
        feas = ws.feasibility(u, delta)
        stat = ws.stationarity(u, y_eq, np.maximum(y_in, 0.0))
        if max(feas, stat) < best[0]:
            best = (max(feas, stat), u.copy(), y_eq.copy(),
                    np.maximum(y_in, 0.0).copy())
        wrong_in = y_in < -1e-9
        grad = ws.grad_lagrangian(u, y_eq, np.maximum(y_in, 0.0))
        wrong_lo = (u <= ws.lo + _ACTIVE_TOL) & (grad < -1e-9) & ~ws.fixed \
            & ~released_bounds
        wrong_hi = (u >= ws.hi - _ACTIVE_TOL) & (grad > 1e-9) & ~ws.fixed \
            & ~released_bounds
        n_wrong = int(np.sum(wrong_in) + np.sum(wrong_lo) + np.sum(wrong_hi))
        log.append(f"  polish round {round_}: feas={feas:.2e} "
                   f"stat={stat:.2e} wrong={n_wrong}")
        if n_wrong == 0:
            return u, y_eq, np.maximum(y_in, 0.0)
        released_ineq |= wrong_in
        released_bounds |= wrong_lo | wrong_hi
        y_in = np.maximum(y_in, 0.0)
    _, u, y_eq, y_in = best
    return u, y_eq, y_in


def _finalize(inst: NlpInstance, x, opts: SolverOptions):
    """Deterministic cleanup that must never worsen scaled feasibility.

    Re-derives the flow splits exactly from the mass flows (complementarity
    products become exactly zero) and pins the energy of zero-throughflow
    nodes to the mean of their incident arc-end energies.
    """
    lay = inst.layout
    before = max(inst.residual_norms(x).values())
    cand = x.copy()
    for aid in lay.net.arcs():
        q = cand[lay.flow[aid]]
        if cand[lay.split_pos[aid]] * cand[lay.split_neg[aid]] <= opts.delta_final * 10:
            cand[lay.split_pos[aid]] = max(q, 0.0)
            cand[lay.split_neg[aid]] = max(-q, 0.0)
    for nid in lay.net.nodes:
        incident = []
        throughput = 0.0
        for aid in lay.net._out[nid]:
            throughput += abs(cand[lay.split_pos[aid]])
            incident.append(cand[lay.arc_end_energy(aid, "tail")])
        for aid in lay.net._in[nid]:
            throughput += abs(cand[lay.split_neg[aid]])
            incident.append(cand[lay.arc_end_energy(aid, "head")])
        if throughput <= 1e-12 and incident:
            i = lay.node_energy[nid]
            cand[i] = np.clip(np.mean(incident), lay.lower[i], lay.upper[i])
    cand = np.clip(cand, lay.lower, lay.upper)
    after = max(inst.residual_norms(cand).values())
    return cand if after <= max(before, opts.feasibility_tol) else x


def _duals_by_family(inst: NlpInstance, lam_eq, lam_in):
    out = {}
    for fam in np.unique(inst._eq.labels):
        out[str(fam)] = lam_eq[inst._eq.family_rows(fam)]
    out["complementarity"] = lam_in[inst._ineq.family_rows("complementarity")]
    out["consumer-pressure"] = lam_in[inst._ineq.family_rows("consumer")]
    return out


def solve(inst: NlpInstance, start: SolutionVector | None = None,
          opts: SolverOptions | None = None) -> SolveResult:
    """Compute a local solution of the assembled problem.

    ``start`` warm-starts the primal point (it must match the instance
    layout); without it a deterministic cold start is derived from the
    network data.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    ws = _Workspace(inst, opts)
    if start is not None:
        if start.layout.names != inst.layout.names:
            raise ValueError("warm start does not match the instance layout")
        x0 = np.clip(start.x, inst.layout.lower, inst.layout.upper)
    else:
        x0 = initial_point(inst)

    schedule = opts.delta_schedule(floor=inst.delta)
    delta_final = schedule[-1]
    log = []
    restore_total = 0
    reduced_total = 0

    # Warm starts that already satisfy the final KKT system return at once.
    u = ws.u_of(x0)
    if ws.feasibility(u, delta_final) <= opts.feasibility_tol:
        lam_eq, lam_in = _lsq_multipliers(ws, u, delta_final)
        stat = ws.stationarity(u, lam_eq, lam_in)
        if stat <= opts.stationarity_tol:
            x = _finalize(inst, ws.x_of(u), opts)
            log.append(f"warm-start KKT hit: stat={stat:.3e}")
            return _result(inst, ws, x, lam_eq, lam_in, LOCAL_OPTIMUM, log,
                           {"inner": 0, "restore": 0, "homotopy_steps": 0},
                           t0)

    lam_eq = np.zeros(ws.m_eq)
    lam_in = np.zeros(ws.m_in)
    status = LOCAL_OPTIMUM
    if start is not None:
        # March the energies to match the transferred flows: interpolated
        # energies from another model level sit in a spurious least-squares
        # basin that restoration cannot leave. Then lift the supply energy
        # enough to clear the consumer inflow thresholds.
        from .assembly import lift_supply_to_thresholds, propagate_energies
        x_prop = propagate_energies(inst, ws.x_of(u))
        u = ws.u_of(lift_supply_to_thresholds(inst, x_prop))
    # Iterates keep the complementarity products at (numerically) zero, a
    # point feasible for every delta of the schedule, so the homotopy
    # collapses to optimizing at the final relaxation: crossing q = 0 is
    # feasible (both split parts vanish there), so flow reversals are
    # never blocked. The cheap path (restore, multiplier fit, Newton
    # polish) handles re-solves after small assignment changes; the
    # reduced shooting solve runs only when that is not optimal yet.

    def restore_both(u_):
        nonlocal restore_total
        u_, ok_, its_ = _restore(ws, u_, delta_final, opts.feasibility_tol,
                                 opts.max_inner_iterations)
        restore_total += its_
        if not ok_:
            u_, ok_, its2 = _restore(ws, u_, delta_final,
                                     opts.feasibility_tol,
                                     opts.max_inner_iterations, freeze=False)
            restore_total += its2
        return u_, ok_

    def polish_guarded(u_, le_, li_):
        feas0 = ws.feasibility(u_, delta_final)
        stat0 = ws.stationarity(u_, le_, li_)
        u1, le1, li1 = _kkt_polish(ws, u_.copy(), le_.copy(), li_.copy(),
                                   delta_final, opts.max_polish_iterations,
                                   log)
        feas1 = ws.feasibility(u1, delta_final)
        stat1 = ws.stationarity(u1, le1, li1)
        if feas1 <= max(feas0, opts.feasibility_tol) \
                and max(feas1, stat1) < max(feas0, stat0):
            return u1, le1, li1
        log.append("  polish rejected (no improvement)")
        return u_, le_, li_

    def converged(u_, le_, li_):
        return (ws.feasibility(u_, delta_final) <= opts.feasibility_tol
                and ws.stationarity(u_, le_, li_) <= opts.stationarity_tol)

    u, ok = restore_both(u)
    log.append(f"restore: feas={ws.feasibility(u, delta_final):.3e} ok={ok}")
    done = False
    if ok:
        lam_eq, lam_in = _lsq_multipliers(ws, u, delta_final)
        if not converged(u, lam_eq, lam_in):
            u, lam_eq, lam_in = polish_guarded(u, lam_eq, lam_in)
        done = converged(u, lam_eq, lam_in)
    # On heavily refined grids the finite-difference shooting solve costs
    # more than it helps; those solves arrive warm-started anyway, so the
    # restore/polish pair carries them.
    if not done and inst.n_vars > 4000 and start is not None and ok:
        log.append("reduced solve skipped (refined grid, warm start)")
        done = True
        lam_eq, lam_in = _lsq_multipliers(ws, u, delta_final)
    if not done:
        # Full path: optimize in the reduced shooting space (including its
        # own feasibility stage), then restore and polish the expansion.
        x_red = _reduced_solve(ws, ws.x_of(u), log)
        reduced_total += 1
        if x_red is not None:
            u2, ok2 = restore_both(ws.u_of(x_red))
            if ok2 or ws.feasibility(u2, delta_final) \
                    < ws.feasibility(u, delta_final):
                u, ok = u2, ok2
        if not ok and ws.feasibility(u, delta_final) > 1e-4:
            status = INFEASIBLE
        else:
            # The polish handles the zero-flow complementarity corners the
            # least-squares restoration grinds on, so it runs even when
            # the restoration fell short of its target.
            lam_eq, lam_in = _lsq_multipliers(ws, u, delta_final)
            if not converged(u, lam_eq, lam_in):
                u, lam_eq, lam_in = polish_guarded(u, lam_eq, lam_in)

    x = _finalize(inst, ws.x_of(u), opts)
    if status == LOCAL_OPTIMUM:
        u_chk = ws.u_of(x)
        feas = ws.feasibility(u_chk, delta_final)
        stat = ws.stationarity(u_chk, lam_eq, lam_in)
        if feas <= opts.feasibility_tol and stat > opts.stationarity_tol:
            # The cleanup may have shifted the point slightly; refresh the
            # multiplier estimate before judging stationarity.
            le, li = _lsq_multipliers(ws, u_chk, delta_final)
            stat_new = ws.stationarity(u_chk, le, li)
            if stat_new < stat:
                lam_eq, lam_in, stat = le, li, stat_new
        log.append(f"final feas={feas:.3e} stat={stat:.3e}")
        if feas > opts.feasibility_tol or stat > opts.stationarity_tol:
            status = ITERATION_LIMIT
    return _result(inst, ws, x, lam_eq, lam_in, status, log,
                   {"inner": reduced_total, "restore": restore_total,
                    "homotopy_steps": len(schedule)}, t0)


def _result(inst, ws, x, lam_eq, lam_in, status, log, iterations, t0):
    delta = max(ws.opts.delta_final, inst.delta)
    u = ws.u_of(x)
    kkt = {
        "feasibility": ws.feasibility(u, delta),
        "stationarity": ws.stationarity(u, lam_eq, np.maximum(lam_in, 0.0)),
    }
    return SolveResult(
        status=status,
        solution=inst.solution(x),
        objective=inst.objective(x),
        kkt=kkt,
        duals=_duals_by_family(inst, lam_eq, np.maximum(lam_in, 0.0)),
        iterations=iterations,
        complementarity=inst.max_complementarity(x),
        wall_time=time.perf_counter() - t0,
        log=log,
    )


def check_kkt(inst: NlpInstance, sol: SolutionVector, duals: dict,
              opts: SolverOptions | None = None) -> dict:
    """Recompute stationarity and feasibility for a given primal-dual pair.

    ``duals`` maps constraint families to multiplier arrays as returned in
    ``SolveResult.duals``.
    """
    opts = opts or SolverOptions()
    ws = _Workspace(inst, opts)
    lam_eq = np.zeros(ws.m_eq)
    for fam in np.unique(inst._eq.labels):
        lam_eq[inst._eq.family_rows(fam)] = duals.get(str(fam), 0.0)
    lam_in = np.zeros(ws.m_in)
    lam_in[inst._ineq.family_rows("complementarity")] = \
        duals.get("complementarity", 0.0)
    lam_in[inst._ineq.family_rows("consumer")] = \
        duals.get("consumer-pressure", 0.0)
    u = ws.u_of(sol.x)
    return {
        "stationarity": ws.stationarity(u, lam_eq, lam_in),
        "feasibility": inst.residual_norms(sol.x),
    }
