"""Deterministic synthetic network instances.

The real benchmark datasets behind the published network statistics are not
public, so these generators produce synthetic stand-ins that match the
aggregate characteristics (arc counts, total pipe length, cycle structure)
while drawing per-pipe parameters from realistic ranges. Three templates:

  chain       -- minimal serial fixture (depot, one consumer, p pipes),
  aroma-like  -- 18 pipes / 5 consumers / 1 depot, meshed (two cycles per
                 flow part), total pipe length 7262.4 m,
  street-like -- 162 pipes / 32 consumers / 1 depot, almost tree-shaped
                 (one cycle per flow part), total pipe length 7627.1 m.

Given the same template, seed, and size parameters the emitted document is
byte-identical.
"""

from __future__ import annotations

import json

import numpy as np

TEMPLATES = ("chain", "aroma-like", "street-like")

# Waste incineration is cheap but scarce; gas and pumping close the gap.
COSTS = {
    "pressure": {"value": 0.165, "unit": "EUR_per_kWh"},
    "waste": {"value": 0.0, "unit": "EUR_per_kWh"},
    "gas": {"value": 0.0415, "unit": "EUR_per_kWh"},
}
WASTE_POWER_MAX_W = 10e3


def _q(value, unit):
    return {"value": float(value), "unit": unit}


def _node(nid, kind):
    return {"id": nid, "kind": kind}


def _pipe(pid, tail, head, length, diameter, friction, hc, t_wall, qmax):
    return {
        "id": pid, "tail": tail, "head": head,
        "length": _q(round(length, 3), "m"),
        "diameter": _q(round(diameter, 4), "m"),
        "friction": _q(round(friction, 5), "dimensionless"),
        "slope": _q(0.0, "dimensionless"),
        "heat_transfer": _q(round(hc, 4), "W_per_m2_K"),
        "wall_temperature": _q(round(t_wall, 2), "K"),
        "mass_flow_bounds": {"min": _q(-qmax, "kg_per_s"),
                             "max": _q(qmax, "kg_per_s")},
    }


def _consumer(cid, tail, head, demand_w, qmax):
    return {
        "id": cid, "tail": tail, "head": head,
        "demand": _q(round(demand_w, 1), "W"),
        "mass_flow_bounds": {"min": _q(0.0, "kg_per_s"),
                             "max": _q(qmax, "kg_per_s")},
    }


def _depot(tail, head, qmax=200.0):
    return {
        "id": "depot", "tail": tail, "head": head,
        "stagnation_pressure": _q(5.0, "bar"),
        "power_bounds": {"waste": _q(WASTE_POWER_MAX_W, "W")},
        "mass_flow_bounds": {"min": _q(0.0, "kg_per_s"),
                             "max": _q(qmax, "kg_per_s")},
    }


def _mirrored_document(ff_edges, consumer_nodes, lengths, diameters, rng,
                       demand_range, pipe_qmax, consumer_qmax):
    """Assemble the full document from a forward-flow edge list.

    The backward-flow part mirrors the forward edges with reversed
    orientation; consumers bridge F-node -> B-node; the depot feeds F0 from
    B0. ``lengths``/``diameters`` are per forward edge and reused for the
    mirror twin.
    """
    f_nodes = sorted({u for u, v in ff_edges} | {v for u, v in ff_edges})
    nodes = [_node(f"F{i}", "forward-flow") for i in f_nodes]
    nodes += [_node(f"B{i}", "backward-flow") for i in f_nodes]

    pipes = []
    for k, (u, v) in enumerate(ff_edges):
        lam = rng.uniform(0.015, 0.025)
        hc = rng.uniform(0.3, 0.8)
        tw = rng.uniform(277.0, 283.0)
        pipes.append(_pipe(f"pf{k:03d}", f"F{u}", f"F{v}", lengths[k],
                           diameters[k], lam, hc, tw, pipe_qmax))
        pipes.append(_pipe(f"pb{k:03d}", f"B{v}", f"B{u}", lengths[k],
                           diameters[k], lam, hc, tw, pipe_qmax))

    consumers = [
        _consumer(f"c{j:02d}", f"F{i}", f"B{i}",
                  rng.uniform(*demand_range), consumer_qmax)
        for j, i in enumerate(consumer_nodes)
    ]
    return {
        "nodes": nodes,
        "pipes": pipes,
        "consumers": consumers,
        "depot": _depot("B0", "F0"),
        "costs": COSTS,
    }


def _chain(n_pipes: int, rng) -> dict:
    if n_pipes < 1:
        raise ValueError("chain needs at least one pipe")
    n_ff = (n_pipes + 1) // 2
    n_bf = n_pipes - n_ff
    nodes = [_node(f"F{i}", "forward-flow") for i in range(n_ff + 1)]
    nodes += [_node(f"B{i}", "backward-flow") for i in range(n_bf + 1)]
    pipes = []
    for i in range(n_ff):
        pipes.append(_pipe(f"pf{i:03d}", f"F{i}", f"F{i+1}",
                           rng.uniform(400, 900), rng.uniform(0.07, 0.10),
                           rng.uniform(0.015, 0.02), rng.uniform(0.4, 0.6),
                           278.0, 50.0))
    for i in range(n_bf):
        pipes.append(_pipe(f"pb{i:03d}", f"B{i}", f"B{i+1}",
                           rng.uniform(400, 900), rng.uniform(0.07, 0.10),
                           rng.uniform(0.015, 0.02), rng.uniform(0.4, 0.6),
                           278.0, 50.0))
    return {
        "nodes": nodes,
        "pipes": pipes,
        "consumers": [_consumer("c00", f"F{n_ff}", f"B{n_bf}", 200e3, 30.0)],
        "depot": _depot("B0", "F0"),
        "costs": COSTS,
    }


def _aroma_like(rng) -> dict:
    # 9 forward edges over 8 nodes -> two independent cycles; mirrored to
    # 18 pipes total. Five consumer takeoffs at the periphery.
    ff_edges = [
        (0, 1),
        (1, 2), (2, 3), (3, 4),
        (1, 5), (5, 6),
        (2, 6),
        (3, 7),
        (6, 7),
    ]
    consumer_nodes = [3, 4, 5, 6, 7]
    raw = rng.uniform(150.0, 650.0, size=len(ff_edges))
    lengths = raw * (7262.4 / 2.0 / raw.sum())
    # Sized for water speeds of roughly 0.3-2 m/s at the demands below;
    # grossly oversized pipes leave near-stagnant cycle chords that make
    # the stationary energy physics needlessly stiff.
    diameters = np.concatenate([
        rng.uniform(0.12, 0.15, size=1),       # trunk
        rng.uniform(0.07, 0.10, size=len(ff_edges) - 1),
    ])
    return _mirrored_document(ff_edges, consumer_nodes, lengths, diameters,
                              rng, demand_range=(150e3, 300e3),
                              pipe_qmax=80.0, consumer_qmax=30.0)


def _street_like(rng) -> dict:
    # Random tree over 81 nodes plus one chord: 81 forward edges with a
    # single cycle, mirrored to 162 pipes total.
    n_nodes = 81
    edges = []
    for i in range(1, n_nodes):
        parent = int(rng.integers(0, i))
        edges.append((parent, i))
    chord = (n_nodes - 2, n_nodes - 1)
    while chord in edges:
        chord = (int(rng.integers(0, n_nodes - 1)), n_nodes - 1)
    edges.append(chord)
    degree = {}
    for u, v in edges:
        degree[u] = degree.get(u, 0) + 1
        degree[v] = degree.get(v, 0) + 1
    leafish = sorted(i for i in range(1, n_nodes) if degree.get(i, 0) <= 2)
    consumer_nodes = [int(i) for i in
                      rng.choice(leafish, size=32, replace=False)]
    consumer_nodes.sort()
    raw = rng.uniform(20.0, 120.0, size=len(edges))
    lengths = raw * (7627.1 / 2.0 / raw.sum())
    diameters = rng.uniform(0.04, 0.08, size=len(edges))
    return _mirrored_document(edges, consumer_nodes, lengths, diameters,
                              rng, demand_range=(30e3, 80e3),
                              pipe_qmax=40.0, consumer_qmax=10.0)


def generate_instance(template: str, seed: int = 0, chain_pipes: int = 3) -> str:
    """Render a template to the JSON instance document (a string)."""
    rng = np.random.default_rng(seed)
    if template == "chain":
        doc = _chain(chain_pipes, rng)
    elif template == "aroma-like":
        doc = _aroma_like(rng)
    elif template == "street-like":
        doc = _street_like(rng)
    else:
        raise ValueError(f"unknown template '{template}' (choose from {TEMPLATES})")
    return json.dumps(doc, indent=2) + "\n"
