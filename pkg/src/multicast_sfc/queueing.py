"""Queue state and the per-slot update kernel.

Within a slot the update runs in three passes:

1. :func:`serve_and_split` hands real packets to the interfaces that asked
   for them. Requests beyond the available backlog are filled with dummy
   packets, which occupy capacity but carry nothing.
2. :func:`apply_slot` credits operated packets downstream (scaled by the
   function's output ratio when processed), reloads the non-operated copy
   of every duplicated packet at the sending node, and adds exogenous arrivals.
3. :func:`consume_at_destinations` drains destination-state queues: a
   final-stage packet sitting at one of its current destinations is delivered
   there and the remainder of its status is kept at that node.

Kernels are numba-jitted and operate on the ``(node, content, status)``
backlog array; the dataclasses below are thin views for callers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from numba import njit

from .model import CommodityKey, ModelArrays, NetworkModel

CAPACITY_RTOL = 4 * np.finfo(float).eps


class CapacityViolation(ValueError):
    pass


class QueueTable:
    """Backlog per (node, commodity), in packets."""

    def __init__(self, model: NetworkModel, backlog: Optional[np.ndarray] = None):
        self.model = model
        if backlog is None:
            backlog = np.zeros(model.shape)
        if backlog.shape != model.shape:
            raise ValueError(f"backlog shape {backlog.shape} != {model.shape}")
        self.backlog = backlog

    def __getitem__(self, item: tuple[int, CommodityKey]) -> float:
        node, key = item
        return float(self.backlog[self.model.key_to_index(node, key)])

    def __setitem__(self, item: tuple[int, CommodityKey], value: float) -> None:
        if value < 0:
            raise ValueError("backlog must be nonnegative")
        node, key = item
        self.backlog[self.model.key_to_index(node, key)] = value

    def copy(self) -> "QueueTable":
        return QueueTable(self.model, self.backlog.copy())

    def total(self) -> float:
        return float(self.backlog.sum())

    def items(self) -> Iterator[tuple[int, CommodityKey, float]]:
        """Nonzero entries as ``(node id, key, backlog)``."""
        m = self.model
        for i, c, q in zip(*np.nonzero(self.backlog)):
            yield m.node_ids[i], m.index_to_key(int(c), int(q)), float(self.backlog[i, c, q])

    def __eq__(self, other) -> bool:
        return isinstance(other, QueueTable) and np.array_equal(self.backlog, other.backlog)


@dataclass
class FlowAssignment:
    """Per-interface decision: tuple index (``-1`` idle), requested input packets, weight.

    Interfaces ``0..N-1`` are the processors of nodes ``0..N-1``; interface
    ``N + e`` is arc ``e``.
    """
    choice: np.ndarray
    amount: np.ndarray
    weight: np.ndarray

    @classmethod
    def idle(cls, model: NetworkModel) -> "FlowAssignment":
        n = model.n_interfaces
        return cls(np.full(n, -1, dtype=np.int64), np.zeros(n), np.zeros(n))

    def set(self, f: int, t: int, amount: float, weight: float = 0.0) -> "FlowAssignment":
        self.choice[f] = t
        self.amount[f] = amount
        self.weight[f] = weight
        return self

    def active(self) -> np.ndarray:
        return np.flatnonzero(self.choice >= 0)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FlowAssignment)
                and np.array_equal(self.choice, other.choice)
                and np.array_equal(self.amount, other.amount))


@dataclass
class SlotLedger:
    """What each interface actually moved in one slot.

    ``remaining`` is the start-of-slot backlog after departures; reload and
    processed-output postings are derived from ``fa`` and ``real``.
    """
    fa: FlowAssignment
    real: np.ndarray
    dummy: np.ndarray
    remaining: np.ndarray

    def reloads(self, model: NetworkModel) -> list[tuple[int, int, int, float]]:
        """``(node, content, status, amount)`` reload postings."""
        a = model.arrays
        out = []
        for f in self.fa.active():
            t = self.fa.choice[f]
            q, s = int(a.tup_q[t]), int(a.tup_s[t])
            if s != q and self.real[f] > 0:
                out.append((model.interface_node(f), int(a.tup_c[t]), q ^ s, float(self.real[f])))
        return out


@dataclass
class DeliveryLog:
    """Cumulative delivered packets per (final content, destination position)."""
    counts: np.ndarray

    @classmethod
    def empty(cls, model: NetworkModel) -> "DeliveryLog":
        a = model.arrays
        return cls(np.zeros((len(a.final_c), a.final_members.shape[1])))

    def by_destination(self, model: NetworkModel) -> dict[tuple[int, int, int], float]:
        """``{(service, dest_set, destination node id): packets}``."""
        a = model.arrays
        out = {}
        for row, c in enumerate(a.final_c):
            phi, _, d = model.contents[c]
            for k in range(a.final_size[row]):
                out[(phi, d, model.node_ids[a.final_members[row, k]])] = float(self.counts[row, k])
        return out

    def total(self) -> float:
        return float(self.counts.sum())


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True)
def _serve_kernel(Q, A, choice, amount, weight, real, dummy, rem):
    rem[:] = Q
    order = np.empty(A.if_idx.shape[0], dtype=np.int64)
    for i in range(A.n_nodes):
        cnt = 0
        for p in range(A.if_ptr[i], A.if_ptr[i + 1]):
            f = A.if_idx[p]
            if choice[f] < 0:
                real[f] = 0.0
                dummy[f] = 0.0
                continue
            # stable insertion by descending weight
            k = cnt
            while k > 0 and weight[order[k - 1]] < weight[f]:
                order[k] = order[k - 1]
                k -= 1
            order[k] = f
            cnt += 1
        for k in range(cnt):
            f = order[k]
            t = choice[f]
            c = A.tup_c[t]
            q = A.tup_q[t]
            avail = rem[i, c, q]
            x = amount[f]
            r = x if x < avail else avail
            if r < 0.0:
                r = 0.0
            rem[i, c, q] = avail - r
            real[f] = r
            dummy[f] = x - r


@njit(cache=True)
def _apply_kernel(rem, A, choice, real, post_node, post_c, post_q, post_stream, arrivals, Qn):
    Qn[:] = rem
    N = A.n_nodes
    for f in range(choice.shape[0]):
        t = choice[f]
        if t < 0:
            continue
        x = real[f]
        if x <= 0.0:
            continue
        c = A.tup_c[t]
        q = A.tup_q[t]
        s = A.tup_s[t]
        if f < N:
            i = f
            Qn[i, A.content_next[c], s] += A.content_scaling[c] * x
        else:
            e = f - N
            i = A.arc_src[e]
            Qn[A.arc_dst[e], c, s] += x
        if s != q:
            Qn[i, c, q ^ s] += x
    for p in range(post_node.shape[0]):
        a = arrivals[post_stream[p]]
        if a > 0.0:
            Qn[post_node[p], post_c[p], post_q[p]] += a


@njit(cache=True)
def _consume_kernel(Q, A, delivered):
    for row in range(A.final_c.shape[0]):
        c = A.final_c[row]
        D = A.final_size[row]
        full = (1 << D) - 1
        for k in range(D):
            i = A.final_members[row, k]
            bit = 1 << (D - 1 - k)
            for q in range(1, full + 1):
                if q & bit:
                    x = Q[i, c, q]
                    if x > 0.0:
                        delivered[row, k] += x
                        r = q ^ bit
                        if r:
                            Q[i, c, r] += x
                        Q[i, c, q] = 0.0


# ---------------------------------------------------------------------------
# public operations

def check_assignment(model: NetworkModel, fa: FlowAssignment) -> None:
    """Raise :class:`CapacityViolation` if ``fa`` exceeds an interface capacity."""
    a = model.arrays
    N = model.n_nodes
    if np.any(fa.amount < 0):
        raise CapacityViolation("negative request")
    for f in fa.active():
        t = fa.choice[f]
        c = a.tup_c[t]
        if f < N:
            if a.content_next[c] < 0:
                raise CapacityViolation(f"{model.interface_name(f)}: final-stage commodity cannot be processed")
            used, cap = a.content_workload[c] * fa.amount[f], a.proc_cap[f]
        else:
            used, cap = fa.amount[f], a.arc_cap[f - N]
        if used > cap * (1 + CAPACITY_RTOL):
            raise CapacityViolation(f"{model.interface_name(f)}: load {used} exceeds capacity {cap}")


def serve_and_split(model: NetworkModel, Q: QueueTable, fa: FlowAssignment) -> SlotLedger:
    """Allocate real packets to requests; shortages go to the heaviest interface first."""
    check_assignment(model, fa)
    n = model.n_interfaces
    real, dummy = np.zeros(n), np.zeros(n)
    rem = np.empty_like(Q.backlog)
    _serve_kernel(Q.backlog, model.arrays, fa.choice, fa.amount, fa.weight, real, dummy, rem)
    return SlotLedger(fa, real, dummy, rem)


@dataclass
class ArrivalMap:
    """Where each stream's arrivals are posted (one posting per status)."""
    node: np.ndarray
    content: np.ndarray
    status: np.ndarray
    stream: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def for_model(cls, model: NetworkModel, unicast: bool = False) -> "ArrivalMap":
        node, content, status, stream = [], [], [], []
        for k, st in enumerate(model.streams):
            ds = model.dest_set_by_id[st.dest_set]
            statuses = [1 << b for b in range(ds.size)] if unicast else [ds.full_status]
            for q in statuses:
                node.append(model.stream_node[k])
                content.append(model.stream_content[k])
                status.append(q)
                stream.append(k)
        as_i = lambda v: np.array(v, dtype=np.int64)
        return cls(as_i(node), as_i(content), as_i(status), as_i(stream))


def apply_slot(model: NetworkModel, ledger: SlotLedger, arrivals: Optional[np.ndarray] = None,
               arrival_map: Optional[ArrivalMap] = None) -> QueueTable:
    """Next-slot backlog from the served ledger plus exogenous per-stream arrivals."""
    if arrivals is None:
        arrivals = np.zeros(len(model.streams))
    if arrival_map is None:
        arrival_map = ArrivalMap.for_model(model)
    Qn = np.empty_like(ledger.remaining)
    _apply_kernel(ledger.remaining, model.arrays, ledger.fa.choice, ledger.real,
                  arrival_map.node, arrival_map.content, arrival_map.status, arrival_map.stream,
                  np.asarray(arrivals, dtype=float), Qn)
    return QueueTable(model, Qn)


def consume_at_destinations(model: NetworkModel, Q: QueueTable) -> tuple[QueueTable, DeliveryLog]:
    """Deliver destination-state backlog; returns the new table and the delivery delta."""
    out = Q.backlog.copy()
    delta = DeliveryLog.empty(model)
    _consume_kernel(out, model.arrays, delta.counts)
    return QueueTable(model, out), delta
