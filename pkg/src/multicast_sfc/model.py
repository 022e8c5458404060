"""Static description of the cloud network, the service chains and the commodity space.

Physical parameters (bps, CPUs, seconds, bits) live in :class:`ScenarioConfig`.
:func:`build_network` normalizes them into per-slot packet units and compiles
the flat index arrays used by the slot kernels.

Duplication statuses are integer bit masks over an ordered destination set.
The first destination ``d_1`` owns the most significant bit, so integer order
on masks coincides with lexicographic order on the binary vectors
(``[1, 0] -> 2``, ``[0, 1] -> 1``, ``[1, 1] -> 3``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

MAX_DESTINATIONS = 16

POLICY_KINDS = ("ldp-multicast", "ldp-unicast-baseline", "randomized")
# How max-weight reads a destination-state backlog: "zero" (it is always
# drained) or "residual" (the backlog of the status left behind after delivery).
DEST_READS = ("zero", "residual")
DEFAULT_DEST_READ = "zero"


class ScenarioError(ValueError):
    """Raised when a scenario violates the model invariants."""


# ---------------------------------------------------------------------------
# duplication statuses

def status_bit(k: int, size: int) -> int:
    """Mask of the unit status ``b_k`` (``k`` is zero-based) in a set of ``size``."""
    return 1 << (size - 1 - k)


def status_from_bits(bits: Sequence[int]) -> int:
    q = 0
    for b in bits:
        if b not in (0, 1):
            raise ValueError(f"status entries must be 0/1, got {b!r}")
        q = (q << 1) | int(b)
    return q


def status_to_bits(q: int, size: int) -> tuple[int, ...]:
    return tuple((q >> (size - 1 - k)) & 1 for k in range(size))


def status_str(q: int, size: int) -> str:
    return "".join(str(b) for b in status_to_bits(q, size))


def is_substatus(s: int, q: int) -> bool:
    """True iff ``s`` is in ``2^q``: every set bit of ``s`` is set in ``q``."""
    return s & ~q == 0


def duplication_splits(q: int) -> list[tuple[int, int]]:
    """All efficient splits ``q = s + r`` with a nonzero operated copy ``s``.

    The no-duplication case ``(q, 0)`` comes first, then the proper splits
    in decreasing order of ``s``.
    """
    if q <= 0:
        raise ValueError("duplication status must be nonzero")
    out = []
    s = q
    while s:
        out.append((s, q ^ s))
        s = (s - 1) & q
    return out


# ---------------------------------------------------------------------------
# unit conversion

def rate_to_packets(rate_bps: float, slot_seconds: float, packet_bits: float) -> float:
    """bps -> packets per slot."""
    return rate_bps * slot_seconds / packet_bits


def packets_to_rate(packets: float, slot_seconds: float, packet_bits: float) -> float:
    """packets per slot -> bps."""
    return packets * packet_bits / slot_seconds


_UNITS = {
    "bps": 1.0, "kbps": 1e3, "mbps": 1e6, "gbps": 1e9,
    "b": 1.0, "kb": 1e3, "mb": 1e6, "gb": 1e9,
    "s": 1.0, "ms": 1e-3, "us": 1e-6,
}


def parse_quantity(value, default_unit: str) -> float:
    """Parse ``"10Gbps"``, ``"1 ms"``, ``"1kb"`` or a bare number in ``default_unit``."""
    if isinstance(value, (int, float)):
        return float(value) * _UNITS[default_unit.lower()]
    text = str(value).strip().replace(" ", "")
    i = len(text)
    while i > 0 and text[i - 1].isalpha():
        i -= 1
    number, unit = text[:i], (text[i:] or default_unit).lower()
    if unit not in _UNITS:
        raise ValueError(f"unknown unit in {value!r}")
    try:
        return float(number) * _UNITS[unit]
    except ValueError:
        raise ValueError(f"cannot parse quantity {value!r}") from None


# ---------------------------------------------------------------------------
# specs

@dataclass(frozen=True)
class NodeSpec:
    id: int
    proc_capacity: float  # CPUs
    proc_cost: float  # cost per CPU-second


@dataclass(frozen=True)
class LinkSpec:
    src: int
    dst: int
    tx_capacity: float  # bps
    tx_cost: float  # cost per bit


@dataclass(frozen=True)
class FunctionSpec:
    scaling: float  # output size per unit input
    workload: float  # CPUs per bps of input


@dataclass(frozen=True)
class ServiceSpec:
    id: int
    functions: tuple[FunctionSpec, ...]

    @property
    def n_stages(self) -> int:
        return len(self.functions) + 1


@dataclass(frozen=True)
class DestinationSet:
    id: int
    members: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def full_status(self) -> int:
        return (1 << self.size) - 1


@dataclass(frozen=True)
class StreamSpec:
    """An exogenous arrival stream of stage-1, all-destination packets."""
    source: int
    service: int
    dest_set: int
    rate: Optional[float] = None  # bps; None uses ScenarioConfig.arrival_rate


class CommodityKey(NamedTuple):
    service: int
    stage: int
    dest_set: int
    status: int


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    nodes: tuple[NodeSpec, ...]
    links: tuple[LinkSpec, ...]
    services: tuple[ServiceSpec, ...]
    dest_sets: tuple[DestinationSet, ...]
    streams: tuple[StreamSpec, ...] = ()
    slot_seconds: float = 1e-3
    packet_bits: float = 1e3
    arrival_rate: float = 0.0  # bps per stream
    V: float = 0.0
    policy: str = "ldp-multicast"
    dest_read: str = DEFAULT_DEST_READ
    horizon: int = 10_000
    seed: int = 0
    notes: tuple[str, ...] = ()

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def arrival_packets(self) -> float:
        return rate_to_packets(self.arrival_rate, self.slot_seconds, self.packet_bits)


def enumerate_commodities(services: Sequence[ServiceSpec],
                          dest_sets: Sequence[DestinationSet]) -> list[CommodityKey]:
    """One key per (service, stage, destination set, nonzero status), sorted."""
    keys = []
    for svc in sorted(services, key=lambda s: s.id):
        for m in range(1, svc.n_stages + 1):
            for ds in sorted(dest_sets, key=lambda d: d.id):
                for q in range(1, ds.full_status + 1):
                    keys.append(CommodityKey(svc.id, m, ds.id, q))
    return keys


# ---------------------------------------------------------------------------
# compiled model

class ModelArrays(NamedTuple):
    """Flat arrays consumed by the jitted kernels."""
    n_nodes: int
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_cap: np.ndarray  # packets/slot
    arc_cost: np.ndarray  # cost per packet
    proc_cap: np.ndarray  # CPUs
    proc_cost: np.ndarray  # cost per CPU-slot
    arc_price: np.ndarray  # penalty weights: cost rates per second of use
    proc_price: np.ndarray
    content_next: np.ndarray  # -1 for the final stage
    content_scaling: np.ndarray
    content_workload: np.ndarray  # CPUs per (packet/slot) of input; 0 at final stage
    dest_state: np.ndarray  # bool (N, NC, S)
    read_zero: np.ndarray  # (N, NC, S) status whose backlog a weight reads; 0 reads as empty
    read_residual: np.ndarray
    tup_c: np.ndarray
    tup_q: np.ndarray
    tup_s: np.ndarray
    if_ptr: np.ndarray  # CSR: interfaces owned by each node, tie-break order
    if_idx: np.ndarray
    final_c: np.ndarray  # final-stage contents
    final_members: np.ndarray  # (len(final_c), Dmax) node indices, -1 padded
    final_size: np.ndarray


@dataclass
class NetworkModel:
    """Normalized, immutable network model in packets and slots."""
    config: ScenarioConfig
    node_ids: tuple[int, ...]
    node_index: dict
    arcs: tuple[tuple[int, int], ...]  # node indices
    in_neighbors: tuple[tuple[int, ...], ...]
    out_neighbors: tuple[tuple[int, ...], ...]
    out_arcs: tuple[tuple[int, ...], ...]
    contents: tuple[tuple[int, int, int], ...]  # (service id, stage, dest-set id)
    content_index: dict
    dest_set_by_id: dict
    service_by_id: dict
    n_statuses: int
    arrays: ModelArrays
    proc_tuples: np.ndarray
    link_tuples: np.ndarray
    nosplit_proc_tuples: np.ndarray
    nosplit_link_tuples: np.ndarray
    streams: tuple[StreamSpec, ...]
    stream_rates: np.ndarray  # packets/slot
    stream_node: np.ndarray
    stream_content: np.ndarray
    stream_dset: np.ndarray
    commodities: list[CommodityKey] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_arcs(self) -> int:
        return len(self.arcs)

    @property
    def n_contents(self) -> int:
        return len(self.contents)

    @property
    def n_interfaces(self) -> int:
        return self.n_nodes + self.n_arcs

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_nodes, self.n_contents, self.n_statuses)

    def dest_size(self, c: int) -> int:
        return self.dest_set_by_id[self.contents[c][2]].size

    def key_to_index(self, node: int, key: CommodityKey) -> tuple[int, int, int]:
        c = self.content_index[(key.service, key.stage, key.dest_set)]
        ds = self.dest_set_by_id[key.dest_set]
        if not 0 < key.status <= ds.full_status:
            raise KeyError(f"status {key.status} invalid for destination set {key.dest_set}")
        return self.node_index[node], c, key.status

    def index_to_key(self, c: int, q: int) -> CommodityKey:
        phi, m, d = self.contents[c]
        return CommodityKey(phi, m, d, q)

    def tuple_key(self, t: int) -> tuple[CommodityKey, int]:
        a = self.arrays
        return self.index_to_key(int(a.tup_c[t]), int(a.tup_q[t])), int(a.tup_s[t])

    def interface_name(self, f: int) -> str:
        if f < self.n_nodes:
            return f"proc:{self.node_ids[f]}"
        i, j = self.arcs[f - self.n_nodes]
        return f"link:{self.node_ids[i]}->{self.node_ids[j]}"

    def interface_node(self, f: int) -> int:
        return f if f < self.n_nodes else self.arcs[f - self.n_nodes][0]

    def weight_evaluation_count(self, unicast: bool = False) -> int:
        """Closed-form number of weights evaluated in one slot."""
        def per_content(c):
            D = self.dest_size(c)
            return (2 ** D - 1) if unicast else (3 ** D - 2 ** D)
        processable = sum(per_content(c) for c in range(self.n_contents)
                          if self.arrays.content_next[c] >= 0)
        every = sum(per_content(c) for c in range(self.n_contents))
        return self.n_nodes * processable + self.n_arcs * every


def _validate(config: ScenarioConfig) -> None:
    ids = [n.id for n in config.nodes]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate node ids")
    known = set(ids)
    for n in config.nodes:
        if n.proc_capacity < 0 or n.proc_cost < 0:
            raise ScenarioError(f"node {n.id}: negative capacity or cost")
    seen = set()
    for ln in config.links:
        if ln.src not in known or ln.dst not in known:
            raise ScenarioError(f"link {ln.src}->{ln.dst} references an undeclared node")
        if ln.src == ln.dst:
            raise ScenarioError(f"self-loop at node {ln.src}")
        if (ln.src, ln.dst) in seen:
            raise ScenarioError(f"duplicate link {ln.src}->{ln.dst}")
        seen.add((ln.src, ln.dst))
        if ln.tx_capacity < 0 or ln.tx_cost < 0:
            raise ScenarioError(f"link {ln.src}->{ln.dst}: negative capacity or cost")
    if config.packet_bits <= 0:
        raise ScenarioError("packet size must be positive")
    if config.slot_seconds <= 0:
        raise ScenarioError("slot length must be positive")
    svc_ids = [s.id for s in config.services]
    if len(set(svc_ids)) != len(svc_ids):
        raise ScenarioError("duplicate service ids")
    for s in config.services:
        if not s.functions:
            raise ScenarioError(f"service {s.id} needs at least one function")
        for f in s.functions:
            if f.scaling <= 0 or f.workload <= 0:
                raise ScenarioError(f"service {s.id}: scaling and workload must be positive")
    ds_ids = [d.id for d in config.dest_sets]
    if len(set(ds_ids)) != len(ds_ids):
        raise ScenarioError("duplicate destination set ids")
    for d in config.dest_sets:
        if not d.members:
            raise ScenarioError(f"destination set {d.id} is empty")
        if len(set(d.members)) != len(d.members):
            raise ScenarioError(f"destination set {d.id} has repeated members")
        if len(d.members) > MAX_DESTINATIONS:
            raise ScenarioError(f"destination set {d.id} exceeds {MAX_DESTINATIONS} members")
        for m in d.members:
            if m not in known:
                raise ScenarioError(f"destination set {d.id} references undeclared node {m}")
    for st in config.streams:
        if st.source not in known:
            raise ScenarioError(f"stream source {st.source} is not a declared node")
        if st.service not in svc_ids or st.dest_set not in ds_ids:
            raise ScenarioError(f"stream {st} references an unknown service or destination set")
        if st.rate is not None and st.rate < 0:
            raise ScenarioError("negative stream rate")
    if config.arrival_rate < 0:
        raise ScenarioError("negative arrival rate")
    if config.V < 0:
        raise ScenarioError("V must be nonnegative")
    if config.dest_read not in DEST_READS:
        raise ScenarioError(f"unknown dest_read {config.dest_read!r}; use one of {DEST_READS}")
    if config.policy not in POLICY_KINDS:
        raise ScenarioError(f"unknown policy kind {config.policy!r}")


def build_network(config: ScenarioConfig) -> NetworkModel:
    _validate(config)
    tau, F = config.slot_seconds, config.packet_bits
    node_ids = tuple(n.id for n in config.nodes)
    node_index = {nid: k for k, nid in enumerate(node_ids)}
    N = len(node_ids)

    arcs = tuple((node_index[ln.src], node_index[ln.dst]) for ln in config.links)
    arc_cap = np.array([rate_to_packets(ln.tx_capacity, tau, F) for ln in config.links], dtype=float)
    arc_cost = np.array([ln.tx_cost * F for ln in config.links], dtype=float)
    proc_cap = np.array([n.proc_capacity for n in config.nodes], dtype=float)
    proc_cost = np.array([n.proc_cost * tau for n in config.nodes], dtype=float)
    in_nb = [[] for _ in range(N)]
    out_nb = [[] for _ in range(N)]
    out_arcs = [[] for _ in range(N)]
    for e, (i, j) in enumerate(arcs):
        out_nb[i].append(j)
        in_nb[j].append(i)
        out_arcs[i].append(e)

    services = sorted(config.services, key=lambda s: s.id)
    dsets = sorted(config.dest_sets, key=lambda d: d.id)
    dmax = max((d.size for d in dsets), default=1)
    S = 1 << dmax

    contents = []
    for svc in services:
        for m in range(1, svc.n_stages + 1):
            for d in dsets:
                contents.append((svc.id, m, d.id))
    content_index = {key: c for c, key in enumerate(contents)}
    service_by_id = {s.id: s for s in services}
    dset_by_id = {d.id: d for d in dsets}
    NC = len(contents)

    content_next = np.full(NC, -1, dtype=np.int64)
    content_scaling = np.zeros(NC)
    content_workload = np.zeros(NC)
    for c, (phi, m, d) in enumerate(contents):
        svc = service_by_id[phi]
        if m < svc.n_stages:
            fn = svc.functions[m - 1]
            content_next[c] = content_index[(phi, m + 1, d)]
            content_scaling[c] = fn.scaling
            # CPUs per bps -> CPUs per (packet/slot)
            content_workload[c] = fn.workload * F / tau

    dest_state = np.zeros((N, NC, S), dtype=np.bool_)
    read_zero = np.broadcast_to(np.arange(S, dtype=np.int64), (N, NC, S)).copy()
    read_residual = read_zero.copy()
    final_c, final_members, final_size = [], [], []
    for c, (phi, m, d) in enumerate(contents):
        if content_next[c] >= 0:
            continue
        ds = dset_by_id[d]
        row = [-1] * dmax
        for k, member in enumerate(ds.members):
            i = node_index[member]
            row[k] = i
            bit = status_bit(k, ds.size)
            for q in range(1, ds.full_status + 1):
                if q & bit:
                    dest_state[i, c, q] = True
                    read_zero[i, c, q] = 0
                    read_residual[i, c, q] = q ^ bit
        final_c.append(c)
        final_members.append(row)
        final_size.append(ds.size)

    tc, tq, ts = [], [], []
    for c, (_, _, d) in enumerate(contents):
        full = dset_by_id[d].full_status
        for q in range(1, full + 1):
            for s in range(1, q + 1):
                if is_substatus(s, q):
                    tc.append(c)
                    tq.append(q)
                    ts.append(s)
    tup_c = np.array(tc, dtype=np.int64)
    tup_q = np.array(tq, dtype=np.int64)
    tup_s = np.array(ts, dtype=np.int64)
    processable = content_next[tup_c] >= 0 if len(tc) else np.zeros(0, dtype=bool)
    nosplit = tup_s == tup_q
    all_t = np.arange(len(tc), dtype=np.int64)

    if_ptr = np.zeros(N + 1, dtype=np.int64)
    if_idx = []
    for i in range(N):
        if_idx.append(i)
        if_idx.extend(N + e for e in out_arcs[i])
        if_ptr[i + 1] = len(if_idx)

    streams = tuple(config.streams)
    stream_rates = np.array(
        [rate_to_packets(config.arrival_rate if st.rate is None else st.rate, tau, F) for st in streams],
        dtype=float)
    stream_node = np.array([node_index[st.source] for st in streams], dtype=np.int64)
    stream_content = np.array([content_index[(st.service, 1, st.dest_set)] for st in streams], dtype=np.int64)
    stream_dset = np.array([st.dest_set for st in streams], dtype=np.int64)

    arrays = ModelArrays(
        n_nodes=N,
        arc_src=np.array([a[0] for a in arcs], dtype=np.int64),
        arc_dst=np.array([a[1] for a in arcs], dtype=np.int64),
        arc_cap=arc_cap, arc_cost=arc_cost, proc_cap=proc_cap, proc_cost=proc_cost,
        arc_price=arc_cost / tau, proc_price=proc_cost / tau,
        content_next=content_next, content_scaling=content_scaling,
        content_workload=content_workload, dest_state=dest_state,
        read_zero=read_zero, read_residual=read_residual,
        tup_c=tup_c, tup_q=tup_q, tup_s=tup_s,
        if_ptr=if_ptr, if_idx=np.array(if_idx, dtype=np.int64),
        final_c=np.array(final_c, dtype=np.int64),
        final_members=np.array(final_members, dtype=np.int64).reshape(len(final_c), dmax),
        final_size=np.array(final_size, dtype=np.int64),
    )
    return NetworkModel(
        config=config, node_ids=node_ids, node_index=node_index, arcs=arcs,
        in_neighbors=tuple(tuple(x) for x in in_nb),
        out_neighbors=tuple(tuple(x) for x in out_nb),
        out_arcs=tuple(tuple(x) for x in out_arcs),
        contents=tuple(contents), content_index=content_index,
        dest_set_by_id=dset_by_id, service_by_id=service_by_id, n_statuses=S,
        arrays=arrays,
        proc_tuples=all_t[processable], link_tuples=all_t,
        nosplit_proc_tuples=all_t[processable & nosplit], nosplit_link_tuples=all_t[nosplit],
        streams=streams, stream_rates=stream_rates, stream_node=stream_node,
        stream_content=stream_content, stream_dset=stream_dset,
        commodities=enumerate_commodities(services, dsets),
    )
