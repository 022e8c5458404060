"""Independent checks on simulation output.

The checks read a *ledger*: one row per real posting (transmission,
processing, arrival, delivery) plus backlog snapshots at the start and end of
the recorded window. Ledgers are written as CSV by :class:`LedgerRecorder`
and read back with :func:`read_ledger`, so every audit can be replayed
offline from a dump. Long runs that are too big to dump are audited from the
engine's :class:`~multicast_sfc.engine.FlowTally` instead.

Ledger CSV columns (stable)::

    slot, kind, interface, node, peer, service, stage, dest_set, q, s,
    amount, requested, dummy, scaling, workload, capacity, unit_cost

``kind`` is one of ``tx``, ``pr``, ``arrival``, ``deliver``, ``q0``, ``q1``
or ``cost``. Statuses are bit strings (``"10"`` is ``[1, 0]``). ``amount`` is
the real packet count; ``requested`` includes dummies.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Optional, Union

import numpy as np

from .model import NetworkModel, ScenarioConfig, status_str
from .queueing import CAPACITY_RTOL, FlowAssignment, QueueTable
from .scenarios import chain2, single_node, y_network

LEDGER_COLUMNS = ("slot", "kind", "interface", "node", "peer", "service", "stage", "dest_set",
                  "q", "s", "amount", "requested", "dummy", "scaling", "workload", "capacity",
                  "unit_cost")
CONSERVATION_RTOL = 1e-6
COST_RTOL = 1e-9

TINY_TOPOLOGIES = {"y-network": y_network, "chain2": chain2, "single": single_node}


# ---------------------------------------------------------------------------
# reports

@dataclass
class CheckResult:
    name: str
    passed: bool
    max_violation: float = 0.0
    locus: str = ""
    detail: str = ""


@dataclass
class AuditReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def merge(self, other: "AuditReport") -> "AuditReport":
        return AuditReport(self.checks + other.checks)

    def to_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            line = f"{status} {c.name}: max_violation={c.max_violation:.3g}"
            if c.locus:
                line += f" at {c.locus}"
            if c.detail:
                line += f" ({c.detail})"
            lines.append(line)
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({"passed": self.passed, "checks": [asdict(c) for c in self.checks]},
                          indent=2, default=float)


# ---------------------------------------------------------------------------
# ledger rows

@dataclass
class LedgerRow:
    slot: int
    kind: str
    interface: str = ""
    node: int = 0
    peer: int = 0
    service: int = 0
    stage: int = 0
    dest_set: int = 0
    q: str = ""
    s: str = ""
    amount: float = 0.0
    requested: float = 0.0
    dummy: float = 0.0
    scaling: float = 1.0
    workload: float = 0.0
    capacity: float = 0.0
    unit_cost: float = 0.0

    def as_list(self) -> list:
        return [getattr(self, k) for k in LEDGER_COLUMNS]

    @classmethod
    def parse(cls, rec: dict) -> "LedgerRow":
        ints = ("slot", "node", "peer", "service", "stage", "dest_set")
        floats = ("amount", "requested", "dummy", "scaling", "workload", "capacity", "unit_cost")
        kw = {}
        for k in LEDGER_COLUMNS:
            v = rec[k]
            if k in ints:
                kw[k] = int(v)
            elif k in floats:
                kw[k] = float(v)
            else:
                kw[k] = v
        return cls(**kw)


def _mask(bits: str) -> int:
    return int(bits, 2) if bits else 0


class LedgerRecorder:
    """Collects ledger rows during a stepwise run; streams them to CSV if given a path.

    Pass an instance as ``recorder=`` to :func:`multicast_sfc.engine.run`.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, keep: Optional[bool] = None):
        self.path = Path(path) if path is not None else None
        self.keep = (path is None) if keep is None else keep
        self.rows: list[LedgerRow] = []
        self._fh: Optional[IO] = None
        self._writer = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(LEDGER_COLUMNS)

    def _emit(self, row: LedgerRow) -> None:
        if self.keep:
            self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(row.as_list())

    def _snapshot(self, kind: str, model: NetworkModel, Q: np.ndarray, slot: int) -> None:
        for i, c, q in zip(*np.nonzero(Q)):
            phi, m, d = model.contents[c]
            D = model.dest_size(int(c))
            self._emit(LedgerRow(slot, kind, node=model.node_ids[i], service=phi, stage=m, dest_set=d,
                                 q=status_str(int(q), D), amount=float(Q[i, c, q])))

    def begin(self, model: NetworkModel, Q: np.ndarray, slot: int) -> None:
        self._snapshot("q0", model, Q, slot)

    def end(self, model: NetworkModel, Q: np.ndarray, slot: int) -> None:
        self._snapshot("q1", model, Q, slot)
        self.close()

    def record(self, slot: int, model: NetworkModel, ledger, arrivals, arrival_map, Qn: np.ndarray,
               cost: float = 0.0) -> None:
        """One slot: served postings, arrivals, then deliveries from the pre-consumption table."""
        a = model.arrays
        N = model.n_nodes
        fa = ledger.fa
        for f in fa.active():
            t = int(fa.choice[f])
            c, q, s = int(a.tup_c[t]), int(a.tup_q[t]), int(a.tup_s[t])
            phi, m, d = model.contents[c]
            D = model.dest_size(c)
            if f < N:
                i = j = f
                kind, cap = "pr", float(a.proc_cap[f])
                scaling, workload = float(a.content_scaling[c]), float(a.content_workload[c])
                unit = float(a.proc_cost[f] * a.content_workload[c])
            else:
                e = f - N
                i, j = int(a.arc_src[e]), int(a.arc_dst[e])
                kind, cap = "tx", float(a.arc_cap[e])
                scaling, workload, unit = 1.0, 1.0, float(a.arc_cost[e])
            self._emit(LedgerRow(slot, kind, model.interface_name(f), model.node_ids[i], model.node_ids[j],
                                 phi, m, d, status_str(q, D), status_str(s, D), float(ledger.real[f]),
                                 float(fa.amount[f]), float(ledger.dummy[f]), scaling, workload, cap, unit))
        for p in range(len(arrival_map.node)):
            x = float(arrivals[arrival_map.stream[p]])
            if x <= 0:
                continue
            c, q = int(arrival_map.content[p]), int(arrival_map.status[p])
            phi, m, d = model.contents[c]
            D = model.dest_size(c)
            node = model.node_ids[arrival_map.node[p]]
            self._emit(LedgerRow(slot, "arrival", "", node, node, phi, m, d,
                                 status_str(q, D), status_str(q, D), x, x))
        for row in range(len(a.final_c)):
            c = int(a.final_c[row])
            D = int(a.final_size[row])
            phi, m, d = model.contents[c]
            for k in range(D):
                i = int(a.final_members[row, k])
                bit = 1 << (D - 1 - k)
                for q in range(1, 1 << D):
                    if q & bit and Qn[i, c, q] > 0:
                        node = model.node_ids[i]
                        self._emit(LedgerRow(slot, "deliver", "", node, node, phi, m, d,
                                             status_str(q, D), status_str(bit, D), float(Qn[i, c, q])))
        self._emit(LedgerRow(slot, "cost", amount=float(cost)))

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None


def read_ledger(source: Union[str, Path, Iterable[LedgerRow]]) -> list[LedgerRow]:
    """Rows from a CSV dump (path) or pass an iterable of rows through."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(LEDGER_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"ledger {source} lacks columns {sorted(missing)}")
            return [LedgerRow.parse(r) for r in reader]
    return list(source)


# ---------------------------------------------------------------------------
# ledger audits

def _key(row: LedgerRow, node: int, stage: int) -> tuple[int, int, int, int]:
    return (node, row.service, stage, row.dest_set)


def _balance(rows: list[LedgerRow]):
    """credit/debit/q0/q1 per (node, service, stage, dest_set) -> {status: packets}."""
    credit = defaultdict(lambda: defaultdict(float))
    debit = defaultdict(lambda: defaultdict(float))
    q0 = defaultdict(lambda: defaultdict(float))
    q1 = defaultdict(lambda: defaultdict(float))
    width = {}
    slots = set()
    for r in rows:
        if r.kind == "cost":
            continue
        if r.kind in ("tx", "pr", "arrival", "deliver"):
            slots.add(r.slot)
        q, s = _mask(r.q), _mask(r.s)
        here = _key(r, r.node, r.stage)
        width[(r.service, r.dest_set)] = len(r.q)
        if r.kind == "q0":
            q0[here][q] += r.amount
        elif r.kind == "q1":
            q1[here][q] += r.amount
        elif r.kind == "arrival":
            credit[here][q] += r.amount
        elif r.kind == "deliver":
            debit[here][q] += r.amount
            if q ^ s:
                credit[here][q ^ s] += r.amount
        elif r.kind == "tx":
            debit[here][q] += r.amount
            credit[_key(r, r.peer, r.stage)][s] += r.amount
            if q ^ s:
                credit[here][q ^ s] += r.amount
        elif r.kind == "pr":
            debit[here][q] += r.amount
            credit[_key(r, r.node, r.stage + 1)][s] += r.scaling * r.amount
            if q ^ s:
                credit[here][q ^ s] += r.amount
        else:
            raise ValueError(f"unknown ledger row kind {r.kind!r}")
    return credit, debit, q0, q1, width, slots


def check_conservation(source, model: Optional[NetworkModel] = None,
                       rtol: float = CONSERVATION_RTOL) -> AuditReport:
    """Flow conservation with duplication, per node, content and destination index.

    For every ``d_k`` the packets that still have ``d_k`` among their current
    destinations must balance: credited in-flow (arrivals, received and
    processed packets, reloads) minus out-flow (sent, processed, delivered)
    equals the change of backlog over the window. ``source`` is a ledger
    (rows or CSV path) or, with ``model``, a :class:`FlowTally`.
    """
    if model is not None:
        return _conservation_tally(source, model, rtol)
    credit, debit, q0, q1, width, slots = _balance(read_ledger(source))
    keys = set(credit) | set(debit) | set(q0) | set(q1)
    worst, locus = 0.0, ""
    span = f"slots {min(slots)}..{max(slots)}" if slots else "empty window"
    for key in sorted(keys):
        D = width.get((key[1], key[3]), 0)
        for k in range(D):
            bit = 1 << (D - 1 - k)
            statuses = [q for q in range(1, 1 << D) if q & bit]
            inflow = sum(credit[key][q] for q in statuses)
            outflow = sum(debit[key][q] for q in statuses)
            dq = sum(q1[key][q] - q0[key][q] for q in statuses)
            err = abs(inflow - outflow - dq) / max(inflow, outflow, 1.0)
            if err > worst:
                worst = err
                locus = (f"node {key[0]}, service {key[1]}, stage {key[2]}, dest_set {key[3]}, "
                         f"d_{k + 1}, {span}")
    return AuditReport([CheckResult("conservation", worst <= rtol, worst, locus if worst > rtol else "",
                                    f"{len(keys)} commodities, {span}")])


def _conservation_tally(tally, model: NetworkModel, rtol: float) -> AuditReport:
    worst, locus = 0.0, ""
    dq = tally.q_end - tally.q_start
    for c in range(model.n_contents):
        D = model.dest_size(c)
        for k in range(D):
            bit = 1 << (D - 1 - k)
            mask = np.array([bool(q & bit) for q in range(model.n_statuses)])
            inflow = tally.credit[:, c, mask].sum(axis=1)
            outflow = tally.debit[:, c, mask].sum(axis=1)
            change = dq[:, c, mask].sum(axis=1)
            err = np.abs(inflow - outflow - change) / np.maximum(np.maximum(inflow, outflow), 1.0)
            i = int(np.argmax(err))
            if err[i] > worst:
                worst = float(err[i])
                phi, m, d = model.contents[c]
                locus = (f"node {model.node_ids[i]}, service {phi}, stage {m}, dest_set {d}, "
                         f"d_{k + 1}, slots {tally.start_slot}..{tally.end_slot - 1}")
    detail = f"slots {tally.start_slot}..{tally.end_slot - 1}, dummy packets {tally.dummy_packets:g}"
    return AuditReport([CheckResult("conservation", worst <= rtol, worst, locus if worst > rtol else "", detail)])


def check_capacity(source, model: Optional[NetworkModel] = None,
                   rtol: float = CAPACITY_RTOL) -> AuditReport:
    """Per slot: CPU load on each processor and packet load (dummies included) on each link."""
    if model is not None:
        ratio = source.load_ratio
        f = int(np.argmax(ratio)) if len(ratio) else 0
        worst = float(ratio[f] - 1.0) if len(ratio) else -1.0
        return AuditReport([CheckResult("capacity", worst <= rtol, max(worst, 0.0),
                                        model.interface_name(f) if worst > rtol else "",
                                        f"peak load ratio {worst + 1.0:.6g}")])
    load = defaultdict(float)
    cap = {}
    for r in read_ledger(source):
        if r.kind not in ("tx", "pr"):
            continue
        used = r.requested * (r.workload if r.kind == "pr" else 1.0)
        load[(r.slot, r.interface)] += used
        cap[(r.slot, r.interface)] = r.capacity
    worst, locus = 0.0, ""
    for k, used in load.items():
        c = cap[k]
        excess = (used - c) / c if c > 0 else (math.inf if used > 0 else 0.0)
        if excess > worst:
            worst, locus = excess, f"{k[1]} at slot {k[0]}"
    ok = worst <= rtol
    return AuditReport([CheckResult("capacity", ok, worst, "" if ok else locus, f"{len(load)} interface-slots")])


def check_coverage(source) -> AuditReport:
    """Every posting operates a nonzero ``s`` inside ``q``; ``s`` and ``q - s`` cover ``q`` exactly."""
    bad, locus = 0, ""
    n = 0
    for r in read_ledger(source):
        if r.kind not in ("tx", "pr", "deliver"):
            continue
        n += 1
        q, s = _mask(r.q), _mask(r.s)
        rest = q - s
        if s == 0 or s & ~q or (s | rest) != q or (s & rest):
            bad += 1
            if not locus:
                locus = f"{r.kind} {r.interface or r.node} slot {r.slot} q={r.q} s={r.s}"
    return AuditReport([CheckResult("coverage", bad == 0, float(bad), locus, f"{n} postings")])


def check_cost(source, rtol: float = COST_RTOL) -> AuditReport:
    """Reported per-slot cost equals the sum of unit cost times real packets moved."""
    rows = read_ledger(source)
    recomputed = defaultdict(float)
    reported = {}
    for r in rows:
        if r.kind in ("tx", "pr"):
            recomputed[r.slot] += r.unit_cost * r.amount
        elif r.kind == "cost":
            reported[r.slot] = r.amount
    worst, locus = 0.0, ""
    for slot, val in reported.items():
        err = abs(val - recomputed.get(slot, 0.0)) / max(abs(val), 1e-300)
        if val == 0.0:
            err = abs(recomputed.get(slot, 0.0))
        if err > worst:
            worst, locus = err, f"slot {slot}"
    ok = worst <= rtol
    return AuditReport([CheckResult("cost", ok, worst, "" if ok else locus, f"{len(reported)} slots")])


def check_destination_states(source) -> AuditReport:
    """Backlog snapshots never hold a packet at one of its own current destinations."""
    bad, locus = 0, ""
    rows = read_ledger(source)
    members = _dest_members(rows)
    for r in rows:
        if r.kind not in ("q0", "q1") or r.amount == 0:
            continue
        dest = members.get((r.service, r.stage, r.dest_set))
        if dest is None:
            continue
        q = _mask(r.q)
        D = len(r.q)
        for k, node in enumerate(dest):
            if node == r.node and q & (1 << (D - 1 - k)):
                bad += 1
                locus = locus or f"node {r.node} service {r.service} dest_set {r.dest_set} q={r.q}"
    return AuditReport([CheckResult("destination_state", bad == 0, float(bad), locus)])


def _dest_members(rows: list[LedgerRow]) -> dict:
    """Destination lists inferred from delivery rows (final stage only)."""
    out = {}
    for r in rows:
        if r.kind == "deliver":
            D = len(r.q)
            k = D - 1 - int(math.log2(_mask(r.s)))
            lst = out.setdefault((r.service, r.stage, r.dest_set), [None] * D)
            lst[k] = r.node
    return out


def audit_ledger(source) -> AuditReport:
    """All ledger checks."""
    rows = read_ledger(source)
    report = AuditReport()
    for check in (check_conservation, check_capacity, check_coverage, check_cost, check_destination_states):
        report = report.merge(check(rows))
    return report


# ---------------------------------------------------------------------------
# brute-force policy oracle

BRUTE_FORCE_LIMIT = 200_000


def _oracle_read(model: NetworkModel, Q: QueueTable, node: int, c: int, q: int, dest_read: str) -> float:
    """Backlog as the policy sees it, derived from the destination sets directly."""
    if q == 0:
        return 0.0
    phi, m, d = model.contents[c]
    svc = model.service_by_id[phi]
    ds = model.dest_set_by_id[d]
    key = model.index_to_key(c, q)
    if m == svc.n_stages and node in ds.members:
        k = ds.members.index(node)
        bit = 1 << (ds.size - 1 - k)
        if q & bit:
            if dest_read == "zero":
                return 0.0
            return _oracle_read(model, Q, node, c, q & ~bit, dest_read)
    return Q[node, key]


def _link_price(model: NetworkModel, e: int) -> float:
    # cost per second of running the arc at one packet per slot
    cfg = model.config
    return cfg.links[e].tx_cost * cfg.packet_bits / cfg.slot_seconds


def _oracle_options(model: NetworkModel, Q: QueueTable, f: int, V: float, unicast: bool,
                    dest_read: str) -> list[tuple[int, float, float]]:
    """``(tuple index, objective contribution, weight)`` for every option; idle first."""
    a = model.arrays
    N = model.n_nodes
    opts = [(-1, Fraction(0), 0.0)]
    for t in range(len(a.tup_c)):
        c, q, s = int(a.tup_c[t]), int(a.tup_q[t]), int(a.tup_s[t])
        if unicast and s != q:
            continue
        rest = q - s
        if f < N:
            node = model.node_ids[f]
            nxt = int(a.content_next[c])
            if nxt < 0:
                continue
            phi, m, d = model.contents[c]
            fn = model.service_by_id[phi].functions[m - 1]
            r = a.content_workload[c]
            w = (_oracle_read(model, Q, node, c, q, dest_read) - _oracle_read(model, Q, node, c, rest, dest_read)
                 - fn.scaling * _oracle_read(model, Q, node, nxt, s, dest_read)) / r - V * model.config.nodes[f].proc_cost
            cap = float(a.proc_cap[f])  # CPUs
        else:
            e = f - N
            i, j = model.arcs[e]
            src, dst = model.node_ids[i], model.node_ids[j]
            w = (_oracle_read(model, Q, src, c, q, dest_read) - _oracle_read(model, Q, src, c, rest, dest_read)
                 - _oracle_read(model, Q, dst, c, s, dest_read) - V * _link_price(model, e))
            cap = float(a.arc_cap[e])
        opts.append((t, Fraction(w) * Fraction(cap), w))
    return opts


def brute_force_decision(Q: QueueTable, model: NetworkModel, params) -> FlowAssignment:
    """Exhaustive maximizer of the sum of weight times assigned capacity.

    Enumerates every joint choice (idle or one tuple per interface) in
    lexicographic order and keeps the first strict improvement, which is the
    same tie-break as the per-interface policy.
    """
    cfg = model.config
    if model.n_nodes > 3 or any(d.size > 2 for d in cfg.dest_sets) or any(
            s.n_stages > 2 for s in cfg.services):
        raise ValueError("instance too large for brute force (need <= 3 nodes, D <= 2, <= 2 stages)")
    unicast = params.kind == "ldp-unicast-baseline"
    per_if = [_oracle_options(model, Q, f, params.V, unicast, params.dest_read)
              for f in range(model.n_interfaces)]
    size = math.prod(len(o) for o in per_if)
    if size > BRUTE_FORCE_LIMIT:
        raise ValueError(f"instance too large for brute force ({size} joint choices)")
    best, best_combo = Fraction(0), None
    for combo in itertools.product(*per_if):
        total = sum(o[1] for o in combo)  # exact, so ties are real ties
        if best_combo is None or total > best:
            best, best_combo = total, combo
    fa = FlowAssignment.idle(model)
    a = model.arrays
    for f, (t, _, w) in enumerate(best_combo):
        if t < 0 or not w > 0:
            continue
        if f < model.n_nodes:
            fa.set(f, t, a.proc_cap[f] / a.content_workload[a.tup_c[t]], w)
        else:
            fa.set(f, t, a.arc_cap[f - model.n_nodes], w)
    return fa


# ---------------------------------------------------------------------------
# Y-network capacity oracle

def ycut_capacity_oracle(config: ScenarioConfig) -> tuple[float, float]:
    """Largest stable per-stream arrival (packets/slot) for multicast and unicast.

    The topology must be a Y: one source ``s`` with a single out-arc to a relay
    ``p``, which has arcs to both members of the only destination set. With
    ample processing, multicast crosses ``s -> p`` once and duplicates at
    ``p``, so it is limited by the smallest of the three arcs; unicast sends
    both copies over ``s -> p``, halving that arc's share.
    """
    from .model import build_network
    model = build_network(config)
    if len(config.streams) != 1 or len(config.dest_sets) != 1 or len(config.services) != 1:
        raise ValueError("not a Y-network: need one stream, one destination set and one service")
    ds = config.dest_sets[0]
    src = config.streams[0].source
    if ds.size != 2 or src in ds.members:
        raise ValueError("not a Y-network: need two destinations distinct from the source")
    d1, d2 = ds.members
    caps = {(ln.src, ln.dst): ln.tx_capacity for ln in config.links}
    out_s = [b for (a_, b) in caps if a_ == src]
    if len(out_s) != 1:
        raise ValueError("not a Y-network: the source needs exactly one out-arc")
    relay = out_s[0]
    if relay in (d1, d2) or (relay, d1) not in caps or (relay, d2) not in caps:
        raise ValueError("not a Y-network: the relay must reach both destinations directly")
    if {n.id for n in config.nodes} != {src, relay, d1, d2}:
        raise ValueError("not a Y-network: expected exactly four nodes")
    if any(f.scaling != 1.0 for f in config.services[0].functions):
        raise ValueError("Y-network oracle assumes a pass-through service")
    to_pk = lambda bps: bps * config.slot_seconds / config.packet_bits
    k_sp, k1, k2 = to_pk(caps[(src, relay)]), to_pk(caps[(relay, d1)]), to_pk(caps[(relay, d2)])
    multicast = min(k_sp, k1, k2)
    unicast = min(k_sp / 2, k1, k2)
    cpu = model.arrays.proc_cap / np.where(model.arrays.content_workload[0] > 0,
                                           model.arrays.content_workload[0], 1.0)
    if np.min(cpu) < 2 * multicast:
        raise ValueError("Y-network oracle assumes ample processing capacity")
    return multicast, unicast
