"""Shared builders for hand-sized networks.

``micro`` takes internal units (packets/slot, CPUs per packet/slot) and
converts them to the physical units the scenario types expect, so tests can
state examples directly in queue-level numbers.
"""
from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multicast_sfc.model import (CommodityKey, DestinationSet, FunctionSpec, LinkSpec, NetworkModel,
                                 NodeSpec, ScenarioConfig, ServiceSpec, StreamSpec, build_network)
from multicast_sfc.queueing import QueueTable

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

TAU = 1e-3
F = 1e3


def micro(n_nodes: int, arcs=(), fns=((1.0, 1.0),), members=(1,), cap=10.0, cpus=10.0,
          source=0, rate=0.0, proc_price=0.0, arc_price=0.0, name="micro", **kw) -> ScenarioConfig:
    """Network on nodes ``0..n-1``.

    ``fns``: ``(xi, r)`` per function with ``r`` in CPUs per packet/slot;
    ``cap``: arc capacity in packets/slot; ``rate``: arrivals in packets/slot;
    prices are cost per second of full-rate use (CPU or packet/slot).
    """
    nodes = tuple(NodeSpec(i, cpus, proc_price) for i in range(n_nodes))
    links = tuple(LinkSpec(a, b, cap * F / TAU, arc_price * TAU / F) for a, b in arcs)
    svc = ServiceSpec(1, tuple(FunctionSpec(xi, r * TAU / F) for xi, r in fns))
    return ScenarioConfig(
        name=name, nodes=nodes, links=links, services=(svc,),
        dest_sets=(DestinationSet(1, tuple(members)),), streams=(StreamSpec(source, 1, 1),),
        slot_seconds=TAU, packet_bits=F, arrival_rate=rate * F / TAU, **kw)


def key(stage: int, q: int, service: int = 1, dest_set: int = 1) -> CommodityKey:
    return CommodityKey(service, stage, dest_set, q)


def tuple_index(model: NetworkModel, k: CommodityKey, s: int) -> int:
    for t in range(len(model.arrays.tup_c)):
        if model.tuple_key(t) == (k, s):
            return t
    raise KeyError((k, s))


def put(model: NetworkModel, Q: QueueTable, entries: dict) -> QueueTable:
    """``{(node, stage, q): backlog}`` into ``Q``."""
    for (node, stage, q), v in entries.items():
        Q[node, key(stage, q)] = v
    return Q


def valid_backlog(model: NetworkModel, rng: np.random.Generator, high: int = 60) -> np.ndarray:
    """Random integer backlog that a slot boundary can hold: status 0 and destination states empty."""
    Q = rng.integers(0, high, size=model.shape).astype(float)
    Q[:, :, 0] = 0.0
    Q[model.arrays.dest_state] = 0.0
    return Q


@pytest.fixture
def line3() -> NetworkModel:
    """0 -> 1 -> 2 both ways; 2-stage service for destinations {1, 2}."""
    cfg = micro(3, arcs=((0, 1), (1, 0), (1, 2), (2, 1)), members=(1, 2))
    return build_network(cfg)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# acceptance verdict lines, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":abc"))):
            terminalreporter.write_line(line)
