"""District heating network model: graph, physical parameters, bounds, costs.

The network is a directed, connected graph with a forward-flow (hot) part
and a backward-flow (cooled) part. Pipes stay within one part, every
consumer arc crosses forward -> backward, and exactly one depot arc crosses
backward -> forward. Instances are read from a JSON document whose numeric
fields carry explicit unit tags; everything is converted to strict SI at the
parse boundary (Pa, W, J/m3, kg/s, K, m, EUR/Wh).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .pipes import DEFAULT_CONSTANTS, StateEquationConstants

FORWARD = "forward-flow"
BACKWARD = "backward-flow"

#: Unit tag -> factor to SI.
UNIT_FACTORS = {
    "Pa": 1.0,
    "bar": 1e5,
    "W": 1.0,
    "kW": 1e3,
    "J_per_m3": 1.0,
    "GJ_per_m3": 1e9,
    "kg_per_s": 1.0,
    "K": 1.0,
    "m": 1.0,
    "dimensionless": 1.0,
    "W_per_m2_K": 1.0,
    "EUR_per_Wh": 1.0,
    "EUR_per_kWh": 1e-3,
}

DEFAULTS = {
    "stagnation_pressure": 5e5,  # Pa
    "pressure_max": 25e5,  # Pa
    "temperature_min": 323.0,  # K
    "temperature_max": 403.0,  # K
    "e_bf": 0.30e9,  # J/m3
    "e_ff_min": 0.35e9,  # J/m3
    "power_max": math.inf,  # W
    "mass_flow_min": -100.0,  # kg/s
    "mass_flow_max": 100.0,  # kg/s
}


class NetworkFormatError(ValueError):
    """Malformed instance document; message names the field and location."""


class NetworkValidationError(ValueError):
    """Structurally valid document violating a graph or physics invariant."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str  # FORWARD or BACKWARD
    pressure_max: float  # Pa
    temperature_min: float  # K
    temperature_max: float  # K


@dataclass(frozen=True)
class PipeArc:
    id: str
    tail: str
    head: str
    length: float  # m
    diameter: float  # m
    friction: float
    slope: float
    heat_transfer: float  # W/(m2 K)
    wall_temperature: float  # K
    flow_min: float  # kg/s
    flow_max: float


@dataclass(frozen=True)
class ConsumerArc:
    id: str
    tail: str  # forward-flow node
    head: str  # backward-flow node
    demand: float  # W, positive
    e_ff_min: float  # J/m3, inflow threshold
    e_bf: float  # J/m3, fixed outflow energy
    flow_min: float
    flow_max: float


@dataclass(frozen=True)
class DepotArc:
    id: str
    tail: str  # backward-flow node
    head: str  # forward-flow node
    stagnation_pressure: float  # Pa
    pump_power_max: float  # W
    waste_power_max: float
    gas_power_max: float
    flow_min: float
    flow_max: float


@dataclass(frozen=True)
class CostParameters:
    """Costs per energy in EUR/Wh for pressure increase, waste burning, gas."""

    pressure: float
    waste: float
    gas: float


@dataclass(frozen=True)
class NetworkModel:
    nodes: dict
    pipes: dict
    consumers: dict
    depot: DepotArc
    costs: CostParameters
    constants: StateEquationConstants = DEFAULT_CONSTANTS
    _in: dict = field(default_factory=dict, repr=False)
    _out: dict = field(default_factory=dict, repr=False)

    @property
    def rho(self) -> float:
        return self.constants.rho

    def arcs(self):
        """All arcs (pipes, consumers, depot) as one id -> arc mapping."""
        out = dict(self.pipes)
        out.update(self.consumers)
        out[self.depot.id] = self.depot
        return out


def _require(mapping, key, where):
    if key not in mapping:
        raise NetworkFormatError(f"missing field '{key}' in {where}")
    return mapping[key]


def _quantity(obj, where, default=None):
    """Read a {'value': x, 'unit': tag} field and convert to SI."""
    if obj is None:
        if default is None:
            raise NetworkFormatError(f"missing quantity at {where}")
        return default
    if not isinstance(obj, dict) or "value" not in obj or "unit" not in obj:
        raise NetworkFormatError(
            f"quantity at {where} must be {{'value': .., 'unit': ..}}"
        )
    unit = obj["unit"]
    if unit not in UNIT_FACTORS:
        raise NetworkFormatError(f"unknown unit tag '{unit}' at {where}")
    try:
        value = float(obj["value"])
    except (TypeError, ValueError) as exc:
        raise NetworkFormatError(f"non-numeric value at {where}") from exc
    return value * UNIT_FACTORS[unit]


def _interval(obj, where, default_min, default_max):
    if obj is None:
        return default_min, default_max
    lo = _quantity(obj.get("min"), f"{where}.min", default_min)
    hi = _quantity(obj.get("max"), f"{where}.max", default_max)
    if lo > hi:
        raise NetworkFormatError(f"empty interval at {where}: [{lo}, {hi}]")
    return lo, hi


def parse_network(text: str) -> NetworkModel:
    """Parse and validate a JSON instance document into a NetworkModel."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"invalid JSON: {exc}") from exc

    raw_defaults = doc.get("defaults", {})
    dflt = dict(DEFAULTS)
    for key in dflt:
        if key in raw_defaults:
            dflt[key] = _quantity(raw_defaults[key], f"defaults.{key}")

    nodes = {}
    for i, nd in enumerate(doc.get("nodes", [])):
        where = f"nodes[{i}]"
        nid = str(_require(nd, "id", where))
        kind = _require(nd, "kind", where)
        if kind not in (FORWARD, BACKWARD):
            raise NetworkFormatError(
                f"{where}: kind must be '{FORWARD}' or '{BACKWARD}', got '{kind}'"
            )
        if nid in nodes:
            raise NetworkFormatError(f"{where}: duplicate node id '{nid}'")
        tmin, tmax = _interval(
            nd.get("temperature_bounds"), f"{where}.temperature_bounds",
            dflt["temperature_min"], dflt["temperature_max"],
        )
        pmax = _quantity(nd.get("pressure_max"), f"{where}.pressure_max",
                         dflt["pressure_max"])
        if pmax <= 0:
            raise NetworkFormatError(f"{where}: pressure_max must be positive")
        nodes[nid] = Node(nid, kind, pmax, tmin, tmax)

    def endpoint(obj, key, where):
        nid = str(_require(obj, key, where))
        if nid not in nodes:
            raise NetworkFormatError(f"{where}: unknown node '{nid}'")
        return nid

    arc_ids = set()

    def register(aid, where):
        if aid in arc_ids:
            raise NetworkFormatError(f"{where}: duplicate arc id '{aid}'")
        arc_ids.add(aid)

    pipes = {}
    for i, pd in enumerate(doc.get("pipes", [])):
        where = f"pipes[{i}]"
        pid = str(_require(pd, "id", where))
        register(pid, where)
        length = _quantity(_require(pd, "length", where), f"{where}.length")
        diameter = _quantity(_require(pd, "diameter", where), f"{where}.diameter")
        friction = _quantity(_require(pd, "friction", where), f"{where}.friction")
        slope = _quantity(pd.get("slope"), f"{where}.slope", 0.0)
        hc = _quantity(_require(pd, "heat_transfer", where), f"{where}.heat_transfer")
        tw = _quantity(_require(pd, "wall_temperature", where),
                       f"{where}.wall_temperature")
        qlo, qhi = _interval(pd.get("mass_flow_bounds"), f"{where}.mass_flow_bounds",
                             dflt["mass_flow_min"], dflt["mass_flow_max"])
        if length <= 0 or diameter <= 0 or friction <= 0:
            raise NetworkValidationError(
                f"pipe '{pid}': length, diameter, friction must be positive"
            )
        if hc < 0:
            raise NetworkValidationError(f"pipe '{pid}': heat_transfer must be >= 0")
        pipes[pid] = PipeArc(
            pid, endpoint(pd, "tail", where), endpoint(pd, "head", where),
            length, diameter, friction, slope, hc, tw, qlo, qhi,
        )

    consumers = {}
    for i, cd in enumerate(doc.get("consumers", [])):
        where = f"consumers[{i}]"
        cid = str(_require(cd, "id", where))
        register(cid, where)
        demand = _quantity(_require(cd, "demand", where), f"{where}.demand")
        e_ff = _quantity(cd.get("e_ff_min"), f"{where}.e_ff_min", dflt["e_ff_min"])
        e_bf = _quantity(cd.get("e_bf"), f"{where}.e_bf", dflt["e_bf"])
        if not e_ff > e_bf:
            raise NetworkValidationError(
                f"consumer '{cid}': inflow threshold must exceed outflow energy"
            )
        qlo, qhi = _interval(cd.get("mass_flow_bounds"), f"{where}.mass_flow_bounds",
                             0.0, dflt["mass_flow_max"])
        consumers[cid] = ConsumerArc(
            cid, endpoint(cd, "tail", where), endpoint(cd, "head", where),
            demand, e_ff, e_bf, qlo, qhi,
        )

    depots = doc.get("depot")
    if depots is None:
        raise NetworkValidationError("instance has no depot arc")
    if isinstance(depots, list):
        if len(depots) != 1:
            raise NetworkValidationError(
                f"exactly one depot arc required, got {len(depots)}"
            )
        depots = depots[0]
    where = "depot"
    did = str(_require(depots, "id", where))
    register(did, where)
    p_s = _quantity(depots.get("stagnation_pressure"),
                    f"{where}.stagnation_pressure", dflt["stagnation_pressure"])
    pb = depots.get("power_bounds", {})
    pump_max = _quantity(pb.get("pump"), f"{where}.power_bounds.pump",
                         dflt["power_max"])
    waste_max = _quantity(pb.get("waste"), f"{where}.power_bounds.waste",
                          dflt["power_max"])
    gas_max = _quantity(pb.get("gas"), f"{where}.power_bounds.gas",
                        dflt["power_max"])
    if min(pump_max, waste_max, gas_max) < 0:
        raise NetworkValidationError(f"depot '{did}': power bounds must be >= 0")
    qlo, qhi = _interval(depots.get("mass_flow_bounds"),
                         f"{where}.mass_flow_bounds", 0.0, dflt["mass_flow_max"])
    depot = DepotArc(did, endpoint(depots, "tail", where),
                     endpoint(depots, "head", where),
                     p_s, pump_max, waste_max, gas_max, qlo, qhi)

    costs_doc = doc.get("costs", {})
    costs = CostParameters(
        pressure=_quantity(costs_doc.get("pressure"), "costs.pressure", 0.165e-3),
        waste=_quantity(costs_doc.get("waste"), "costs.waste", 0.0),
        gas=_quantity(costs_doc.get("gas"), "costs.gas", 0.0415e-3),
    )
    if min(costs.pressure, costs.waste, costs.gas) < 0:
        raise NetworkValidationError("costs must be non-negative")

    net = NetworkModel(nodes, pipes, consumers, depot, costs)
    _validate_graph(net)
    object.__setattr__(net, "_in", _adjacency(net, "head"))
    object.__setattr__(net, "_out", _adjacency(net, "tail"))
    return net


def _adjacency(net: NetworkModel, end: str) -> dict:
    adj = {nid: [] for nid in net.nodes}
    for aid, arc in sorted(net.arcs().items()):
        adj[getattr(arc, end)].append(aid)
    return {nid: tuple(aids) for nid, aids in adj.items()}


def _validate_graph(net: NetworkModel) -> None:
    for aid, arc in net.arcs().items():
        if arc.tail == arc.head:
            raise NetworkValidationError(f"arc '{aid}' is a self-loop")
    for pipe in net.pipes.values():
        if net.nodes[pipe.tail].kind != net.nodes[pipe.head].kind:
            raise NetworkValidationError(
                f"pipe '{pipe.id}' must stay within one flow part"
            )
    for cons in net.consumers.values():
        if (net.nodes[cons.tail].kind, net.nodes[cons.head].kind) != (FORWARD, BACKWARD):
            raise NetworkValidationError(
                f"consumer '{cons.id}' must cross flow parts (forward -> backward)"
            )
    dep = net.depot
    if (net.nodes[dep.tail].kind, net.nodes[dep.head].kind) != (BACKWARD, FORWARD):
        raise NetworkValidationError(
            f"depot '{dep.id}' must cross flow parts (backward -> forward)"
        )
    # Connectivity over the undirected support.
    if net.nodes:
        neighbors = {nid: set() for nid in net.nodes}
        for arc in net.arcs().values():
            neighbors[arc.tail].add(arc.head)
            neighbors[arc.head].add(arc.tail)
        start = next(iter(net.nodes))
        seen = {start}
        stack = [start]
        while stack:
            for other in neighbors[stack.pop()]:
                if other not in seen:
                    seen.add(other)
                    stack.append(other)
        if seen != set(net.nodes):
            missing = sorted(set(net.nodes) - seen)
            raise NetworkValidationError(
                f"graph is not connected; unreachable node '{missing[0]}'"
            )


def serialize_network(net: NetworkModel) -> str:
    """Emit the canonical JSON document (SI units); parse round-trips."""
    def q(value, unit="dimensionless"):
        return {"value": value, "unit": unit}

    doc = {
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "pressure_max": q(n.pressure_max, "Pa"),
                "temperature_bounds": {"min": q(n.temperature_min, "K"),
                                       "max": q(n.temperature_max, "K")},
            }
            for n in sorted(net.nodes.values(), key=lambda n: n.id)
        ],
        "pipes": [
            {
                "id": p.id, "tail": p.tail, "head": p.head,
                "length": q(p.length, "m"),
                "diameter": q(p.diameter, "m"),
                "friction": q(p.friction),
                "slope": q(p.slope),
                "heat_transfer": q(p.heat_transfer, "W_per_m2_K"),
                "wall_temperature": q(p.wall_temperature, "K"),
                "mass_flow_bounds": {"min": q(p.flow_min, "kg_per_s"),
                                     "max": q(p.flow_max, "kg_per_s")},
            }
            for p in sorted(net.pipes.values(), key=lambda p: p.id)
        ],
        "consumers": [
            {
                "id": c.id, "tail": c.tail, "head": c.head,
                "demand": q(c.demand, "W"),
                "e_ff_min": q(c.e_ff_min, "J_per_m3"),
                "e_bf": q(c.e_bf, "J_per_m3"),
                "mass_flow_bounds": {"min": q(c.flow_min, "kg_per_s"),
                                     "max": q(c.flow_max, "kg_per_s")},
            }
            for c in sorted(net.consumers.values(), key=lambda c: c.id)
        ],
        "depot": {
            "id": net.depot.id, "tail": net.depot.tail, "head": net.depot.head,
            "stagnation_pressure": q(net.depot.stagnation_pressure, "Pa"),
            # Infinite (unbounded) powers are encoded by omission.
            "power_bounds": {
                name: q(value, "W")
                for name, value in (("pump", net.depot.pump_power_max),
                                    ("waste", net.depot.waste_power_max),
                                    ("gas", net.depot.gas_power_max))
                if math.isfinite(value)
            },
            "mass_flow_bounds": {"min": q(net.depot.flow_min, "kg_per_s"),
                                 "max": q(net.depot.flow_max, "kg_per_s")},
        },
        "costs": {
            "pressure": q(net.costs.pressure, "EUR_per_Wh"),
            "waste": q(net.costs.waste, "EUR_per_Wh"),
            "gas": q(net.costs.gas, "EUR_per_Wh"),
        },
    }
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def incident_arcs(net: NetworkModel, node: str, direction: str):
    """Arc ids entering ('in') or leaving ('out') a node."""
    if node not in net.nodes:
        raise KeyError(f"unknown node id '{node}'")
    if direction == "in":
        return set(net._in[node])
    if direction == "out":
        return set(net._out[node])
    raise ValueError(f"direction must be 'in' or 'out', got '{direction}'")


def cross_section_area(pipe: PipeArc) -> float:
    """Cross-sectional area pi*D^2/4 [m2]."""
    return math.pi * pipe.diameter**2 / 4.0


def mass_flow_to_velocity(pipe: PipeArc, q: float, rho: float) -> float:
    """Velocity v = q / (A rho) [m/s]; sign follows the mass flow."""
    return q / (cross_section_area(pipe) * rho)
