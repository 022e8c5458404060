"""Built-in scenarios and the JSON scenario file format.

Scenario file schema (all rates/sizes/times accept unit strings such as
``"10Gbps"``, ``"1ms"``, ``"1kb"``; bare numbers use the unit in brackets)::

    {
      "name": "my-net",
      "slot": "1ms",                       # [s]
      "packet_size": "1kb",                # [b]
      "nodes": [{"id": 1, "cpus": 20, "cost_per_cpu_second": 0.5}, ...],
      "links": [{"src": 1, "dst": 2, "capacity": "10Gbps",       # [bps]
                 "cost_per_gb": 1.0, "bidirectional": true}, ...],
      "services": [{"id": 1, "functions": [
                      {"scaling": 1.0, "mbps_per_cpu": 300}, ...]}],
      "dest_sets": [{"id": 1, "members": [7, 10]}, ...],
      "sources": [1, 2, 3, 4],             # one stream per source x service x set
      "streams": [{"source": 1, "service": 1, "dest_set": 1, "rate": "5Mbps"}],
      "arrival_rate": "20Mbps",            # [bps] per stream
      "policy": {"kind": "ldp-multicast", "V": 0, "dest_read": "zero"},
      "slots": 100000,
      "seed": 1
    }

``sources`` and ``streams`` may be combined; explicit streams are appended.
"""
from __future__ import annotations

import itertools
import json
from pathlib import Path
from typing import Callable, Optional

from .model import (DEFAULT_DEST_READ, DestinationSet, FunctionSpec, LinkSpec, NodeSpec, ScenarioConfig,
                    ScenarioError, ServiceSpec, StreamSpec, parse_quantity)

# Standard 11-node / 14-link Abilene backbone, numbered west to east so that
# nodes 1-4 are the sources and 7-11 the candidate destinations.
ABILENE_CITIES = {
    1: "Seattle", 2: "Sunnyvale", 3: "Los Angeles", 4: "Denver", 5: "Kansas City",
    6: "Houston", 7: "Indianapolis", 8: "Chicago", 9: "Atlanta", 10: "Washington",
    11: "New York",
}
ABILENE_EDGES = (
    (1, 2), (1, 4), (2, 3), (2, 4), (3, 6), (4, 5), (5, 6),
    (5, 7), (6, 9), (7, 8), (7, 9), (8, 11), (9, 10), (10, 11),
)
ABILENE_SOURCES = (1, 2, 3, 4)
ABILENE_DESTINATIONS = (7, 8, 9, 10, 11)

# Link capacity that reproduces the reported capacity region; see README.
ABILENE_LINK_BPS = 1e9

MBPS = 1e6


def _bidirectional(edges, capacity, cost_per_bit):
    links = []
    for a, b in edges:
        links.append(LinkSpec(a, b, capacity, cost_per_bit))
        links.append(LinkSpec(b, a, capacity, cost_per_bit))
    return tuple(links)


def _fn(scaling: float, mbps_per_cpu: float) -> FunctionSpec:
    return FunctionSpec(scaling, 1.0 / (mbps_per_cpu * MBPS))


def abilene(link_capacity: float = ABILENE_LINK_BPS, arrival_rate: float = 20 * MBPS,
            V: float = 0.0, policy: str = "ldp-multicast", horizon: int = 200_000,
            seed: int = 1) -> ScenarioConfig:
    nodes = tuple(NodeSpec(i, 20.0, 0.5) for i in ABILENE_CITIES)
    links = _bidirectional(ABILENE_EDGES, link_capacity, 1.0 / 1e9)
    services = (
        ServiceSpec(1, (_fn(1.0, 300), _fn(2.0, 400))),
        ServiceSpec(2, (_fn(1 / 3, 200), _fn(1 / 2, 100))),
    )
    dsets = tuple(DestinationSet(k + 1, pair)
                  for k, pair in enumerate(itertools.combinations(ABILENE_DESTINATIONS, 2)))
    streams = tuple(StreamSpec(src, svc.id, d.id)
                    for src in ABILENE_SOURCES for svc in services for d in dsets)
    return ScenarioConfig(
        name="abilene", nodes=nodes, links=links, services=services, dest_sets=dsets,
        streams=streams, slot_seconds=1e-3, packet_bits=1e3, arrival_rate=arrival_rate,
        V=V, policy=policy, horizon=horizon, seed=seed,
        notes=("node numbering west-to-east (assumed)",
               f"link capacity {link_capacity / 1e9:g} Gbps per direction"),
    )


def abilene_10g(**kw) -> ScenarioConfig:
    """Abilene with the 10 Gbps links quoted in the text."""
    cfg = abilene(link_capacity=10e9, **kw)
    return cfg.replace(name="abilene-10g")


def y_network(kappa: float = 10.0, arrival_rate: float = 5 * MBPS, V: float = 0.0,
              policy: str = "ldp-multicast", horizon: int = 50_000, seed: int = 1) -> ScenarioConfig:
    """s -> p -> {d1, d2}; arcs of ``kappa`` packets/slot, pass-through service, ample CPU.

    Arcs run both ways: a packet delivered whole to d1 leaves its d2 copy at
    d1, which needs a way back out. With 1 ms slots and 1 kb packets,
    packets/slot and Mbps coincide.
    """
    cap = kappa * MBPS
    nodes = tuple(NodeSpec(i, 1e3, 0.0) for i in (0, 1, 2, 3))
    links = _bidirectional(((0, 1), (1, 2), (1, 3)), cap, 1e-9)
    services = (ServiceSpec(1, (_fn(1.0, 1e3),)),)
    dsets = (DestinationSet(1, (2, 3)),)
    return ScenarioConfig(
        name="y-network", nodes=nodes, links=links, services=services, dest_sets=dsets,
        streams=(StreamSpec(0, 1, 1),), slot_seconds=1e-3, packet_bits=1e3,
        arrival_rate=arrival_rate, V=V, policy=policy, horizon=horizon, seed=seed,
    )


def chain2(arrival_rate: float = 2 * MBPS, V: float = 0.0, policy: str = "ldp-multicast",
           horizon: int = 10_000, seed: int = 1) -> ScenarioConfig:
    """Two nodes joined both ways; one 2-stage service consumed by both nodes."""
    nodes = (NodeSpec(0, 4.0, 0.5), NodeSpec(1, 4.0, 0.25))
    links = _bidirectional(((0, 1),), 10 * MBPS, 1e-9)
    services = (ServiceSpec(1, (_fn(2.0, 2.5),)),)
    dsets = (DestinationSet(1, (0, 1)),)
    return ScenarioConfig(
        name="chain2", nodes=nodes, links=links, services=services, dest_sets=dsets,
        streams=(StreamSpec(0, 1, 1),), slot_seconds=1e-3, packet_bits=1e3,
        arrival_rate=arrival_rate, V=V, policy=policy, horizon=horizon, seed=seed,
    )


def single_node(arrival_rate: float = 1 * MBPS, **kw) -> ScenarioConfig:
    nodes = (NodeSpec(0, 2.0, 0.5),)
    services = (ServiceSpec(1, (_fn(1.0, 10.0),)),)
    dsets = (DestinationSet(1, (0,)),)
    return ScenarioConfig(
        name="single", nodes=nodes, links=(), services=services, dest_sets=dsets,
        streams=(StreamSpec(0, 1, 1),), arrival_rate=arrival_rate, **kw,
    )


BUILTIN: dict[str, Callable[..., ScenarioConfig]] = {
    "abilene": abilene,
    "abilene-10g": abilene_10g,
    "y-network": y_network,
    "chain2": chain2,
    "single": single_node,
}


def builtin(name: str, **kw) -> ScenarioConfig:
    try:
        return BUILTIN[name](**kw)
    except KeyError:
        raise ScenarioError(f"unknown built-in scenario {name!r}; have {sorted(BUILTIN)}") from None


# ---------------------------------------------------------------------------
# file format

def config_from_dict(data: dict) -> ScenarioConfig:
    try:
        nodes = tuple(NodeSpec(int(n["id"]), float(n.get("cpus", 0.0)),
                               float(n.get("cost_per_cpu_second", 0.0)))
                      for n in data["nodes"])
        links = []
        for ln in data.get("links", []):
            cap = parse_quantity(ln["capacity"], "bps")
            cost = float(ln.get("cost_per_gb", 0.0)) / 1e9
            links.append(LinkSpec(int(ln["src"]), int(ln["dst"]), cap, cost))
            if ln.get("bidirectional", False):
                links.append(LinkSpec(int(ln["dst"]), int(ln["src"]), cap, cost))
        services = tuple(
            ServiceSpec(int(s["id"]), tuple(_fn(float(f["scaling"]), float(f["mbps_per_cpu"]))
                                            for f in s["functions"]))
            for s in data["services"])
        dsets = tuple(DestinationSet(int(d["id"]), tuple(int(m) for m in d["members"]))
                      for d in data["dest_sets"])
        streams = [StreamSpec(int(src), s.id, d.id)
                   for src in data.get("sources", []) for s in services for d in dsets]
        for st in data.get("streams", []):
            rate = parse_quantity(st["rate"], "bps") if "rate" in st else None
            streams.append(StreamSpec(int(st["source"]), int(st["service"]), int(st["dest_set"]), rate))
        policy = data.get("policy", {})
        return ScenarioConfig(
            name=str(data.get("name", "custom")), nodes=nodes, links=tuple(links),
            services=services, dest_sets=dsets, streams=tuple(streams),
            slot_seconds=parse_quantity(data.get("slot", "1ms"), "s"),
            packet_bits=parse_quantity(data.get("packet_size", "1kb"), "b"),
            arrival_rate=parse_quantity(data.get("arrival_rate", 0.0), "bps"),
            V=float(policy.get("V", 0.0)), policy=str(policy.get("kind", "ldp-multicast")),
            dest_read=str(policy.get("dest_read", DEFAULT_DEST_READ)),
            horizon=int(data.get("slots", 10_000)), seed=int(data.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from exc


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`config_from_dict` (streams written explicitly)."""
    return {
        "name": cfg.name,
        "slot": cfg.slot_seconds,
        "packet_size": cfg.packet_bits,
        "nodes": [{"id": n.id, "cpus": n.proc_capacity, "cost_per_cpu_second": n.proc_cost}
                  for n in cfg.nodes],
        "links": [{"src": ln.src, "dst": ln.dst, "capacity": ln.tx_capacity,
                   "cost_per_gb": ln.tx_cost * 1e9} for ln in cfg.links],
        "services": [{"id": s.id, "functions": [
            {"scaling": f.scaling, "mbps_per_cpu": 1.0 / (f.workload * MBPS)} for f in s.functions]}
            for s in cfg.services],
        "dest_sets": [{"id": d.id, "members": list(d.members)} for d in cfg.dest_sets],
        "streams": [{"source": st.source, "service": st.service, "dest_set": st.dest_set,
                     **({"rate": st.rate} if st.rate is not None else {})} for st in cfg.streams],
        "arrival_rate": cfg.arrival_rate,
        "policy": {"kind": cfg.policy, "V": cfg.V, "dest_read": cfg.dest_read},
        "slots": cfg.horizon,
        "seed": cfg.seed,
    }


def load_scenario(path_or_name: str) -> ScenarioConfig:
    """A built-in name or a path to a JSON scenario file."""
    if path_or_name in BUILTIN:
        return builtin(path_or_name)
    path = Path(path_or_name)
    if not path.is_file():
        raise ScenarioError(f"no built-in scenario or readable file named {path_or_name!r}")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return config_from_dict(data)
