"""Per-slot decisions: drift-plus-penalty max-weight, its unicast baseline, and
stationary randomized selection.

Every interface (a node's processor or an arc) scores each (content, status,
operated status) tuple against the start-of-slot backlog and commits its whole
capacity to the best tuple when that tuple's weight is strictly positive.
Ties go to the lexicographically smallest tuple.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .model import DEFAULT_DEST_READ, DEST_READS, POLICY_KINDS, CommodityKey, NetworkModel
from .queueing import ArrivalMap, FlowAssignment, QueueTable


@dataclass(frozen=True)
class PolicyParams:
    V: float = 0.0
    kind: str = "ldp-multicast"
    dest_read: str = DEFAULT_DEST_READ

    def __post_init__(self):
        if self.V < 0:
            raise ValueError("V must be nonnegative")
        if self.dest_read not in DEST_READS:
            raise ValueError(f"unknown dest_read {self.dest_read!r}")
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")


@njit(cache=True)
def _decide_kernel(Q, A, rq, V, proc_tuples, link_tuples, choice, amount, weight):
    """Max-weight per interface. ``rq[i, c, q]`` is the status whose backlog
    stands in for ``Q[i, c, q]`` (status 0 is always empty)."""
    N = A.n_nodes
    tup_c = A.tup_c
    tup_q = A.tup_q
    tup_s = A.tup_s
    nxt = A.content_next
    scaling = A.content_scaling
    workload = A.content_workload
    proc_cost = A.proc_price
    proc_cap = A.proc_cap
    src = A.arc_src
    dst = A.arc_dst
    arc_cost = A.arc_price
    arc_cap = A.arc_cap
    # weights are written out inline: small helper calls defeat vectorization here
    for i in range(N):
        best = 0.0
        best_t = -1
        pc = V * proc_cost[i]
        for k in range(proc_tuples.shape[0]):
            t = proc_tuples[k]
            c = tup_c[t]
            q = tup_q[t]
            s = tup_s[t]
            cn = nxt[c]
            w = (Q[i, c, rq[i, c, q]] - Q[i, c, rq[i, c, q ^ s]]
                 - scaling[c] * Q[i, cn, rq[i, cn, s]]) / workload[c] - pc
            if w > best:
                best = w
                best_t = t
        if proc_cap[i] <= 0.0:
            best_t = -1
            best = 0.0
        choice[i] = best_t
        weight[i] = best
        amount[i] = proc_cap[i] / workload[tup_c[best_t]] if best_t >= 0 else 0.0
    for e in range(src.shape[0]):
        best = 0.0
        best_t = -1
        i = src[e]
        j = dst[e]
        lc = V * arc_cost[e]
        for k in range(link_tuples.shape[0]):
            t = link_tuples[k]
            c = tup_c[t]
            q = tup_q[t]
            s = tup_s[t]
            w = Q[i, c, rq[i, c, q]] - Q[i, c, rq[i, c, q ^ s]] - Q[j, c, rq[j, c, s]] - lc
            if w > best:
                best = w
                best_t = t
        if arc_cap[e] <= 0.0:
            best_t = -1
            best = 0.0
        choice[N + e] = best_t
        weight[N + e] = best
        amount[N + e] = arc_cap[e] if best_t >= 0 else 0.0


def read_map(model: NetworkModel, dest_read: str) -> np.ndarray:
    """Status-read table for the chosen destination-state convention."""
    if dest_read == "zero":
        return model.arrays.read_zero
    if dest_read == "residual":
        return model.arrays.read_residual
    raise ValueError(f"unknown dest_read {dest_read!r}; use 'zero' or 'residual'")


def _read(model: NetworkModel, Q: QueueTable, rq: np.ndarray, i: int, c: int, q: int) -> float:
    return float(Q.backlog[i, c, rq[i, c, q]])


def processing_weight(model: NetworkModel, Q: QueueTable, node: int, key, s: int, V: float,
                      dest_read: str = "zero") -> float:
    """Weight of processing commodity ``key`` at ``node`` with operated status ``s``."""
    i, c, q = model.key_to_index(node, key)
    rq = read_map(model, dest_read)
    a = model.arrays
    if a.content_next[c] < 0:
        raise ValueError("final-stage commodities are not processed")
    if s == 0 or s & ~q:
        raise ValueError(f"operated status {s} is not a nonzero subset of {q}")
    diff = (_read(model, Q, rq, i, c, q) - _read(model, Q, rq, i, c, q ^ s)
            - a.content_scaling[c] * _read(model, Q, rq, i, int(a.content_next[c]), s))
    return diff / a.content_workload[c] - V * a.proc_price[i]


def transmission_weight(model: NetworkModel, Q: QueueTable, src: int, dst: int, key, s: int,
                        V: float, dest_read: str = "zero") -> float:
    """Weight of sending commodity ``key`` over arc ``src -> dst`` with operated status ``s``."""
    i, c, q = model.key_to_index(src, key)
    rq = read_map(model, dest_read)
    j = model.node_index[dst]
    e = model.arcs.index((i, j))
    if s == 0 or s & ~q:
        raise ValueError(f"operated status {s} is not a nonzero subset of {q}")
    return (_read(model, Q, rq, i, c, q) - _read(model, Q, rq, i, c, q ^ s)
            - _read(model, Q, rq, j, c, s) - V * model.arrays.arc_price[e])


def weight_tables(model: NetworkModel, Q: QueueTable, params: PolicyParams) -> dict[int, np.ndarray]:
    """Per-interface weight arrays, indexed like the policy's tuple list."""
    proc_t, link_t = _tuples(model, params)
    a = model.arrays
    rq = read_map(model, params.dest_read)
    B = Q.backlog
    out = {}
    c, q, s = a.tup_c[proc_t], a.tup_q[proc_t], a.tup_s[proc_t]
    cn = a.content_next[c]
    for i in range(model.n_nodes):
        diff = B[i, c, rq[i, c, q]] - B[i, c, rq[i, c, q ^ s]] - a.content_scaling[c] * B[i, cn, rq[i, cn, s]]
        out[i] = diff / a.content_workload[c] - params.V * a.proc_price[i]
    c, q, s = a.tup_c[link_t], a.tup_q[link_t], a.tup_s[link_t]
    for e in range(model.n_arcs):
        i, j = a.arc_src[e], a.arc_dst[e]
        out[model.n_nodes + e] = (B[i, c, rq[i, c, q]] - B[i, c, rq[i, c, q ^ s]]
                                  - B[j, c, rq[j, c, s]] - params.V * a.arc_price[e])
    return out


def select_max_weight(weights: np.ndarray, tuples: np.ndarray, capacity: float) -> tuple[int, float, float]:
    """``(tuple index or -1, amount, weight)`` for one interface.

    ``weights`` must follow the lexicographic order of ``tuples``; ``np.argmax``
    keeps the first maximizer.
    """
    if len(weights) == 0:
        return -1, 0.0, 0.0
    k = int(np.argmax(weights))
    w = float(weights[k])
    if not w > 0:
        return -1, 0.0, 0.0
    return int(tuples[k]), float(capacity), w


def _tuples(model: NetworkModel, params: PolicyParams) -> tuple[np.ndarray, np.ndarray]:
    if params.kind == "ldp-unicast-baseline":
        return model.nosplit_proc_tuples, model.nosplit_link_tuples
    return model.proc_tuples, model.link_tuples


def ldp_decide(Q: QueueTable, model: NetworkModel, params: PolicyParams) -> FlowAssignment:
    """Independent max-weight decision on every interface."""
    proc_t, link_t = _tuples(model, params)
    fa = FlowAssignment.idle(model)
    _decide_kernel(Q.backlog, model.arrays, read_map(model, params.dest_read), float(params.V), proc_t, link_t,
                   fa.choice, fa.amount, fa.weight)
    return fa


def unicast_baseline_decide(Q: QueueTable, model: NetworkModel, params: PolicyParams) -> FlowAssignment:
    """Max-weight without duplication; pair with unicast-expanded arrivals."""
    return ldp_decide(Q, model, PolicyParams(params.V, "ldp-unicast-baseline", params.dest_read))


# ---------------------------------------------------------------------------
# stationary randomized policy

@dataclass
class RandomizedPolicySpec:
    """Per-interface probability mass over tuple indices; leftover mass idles."""
    probs: dict[int, dict[int, float]]

    @classmethod
    def from_named(cls, model: NetworkModel, data: dict) -> "RandomizedPolicySpec":
        """Build from ``{"proc:1": [{"service", "stage", "dest_set", "q", "s", "p"}, ...]}``.

        ``q`` and ``s`` are bit strings (``"11"``, ``"10"``); interface names as
        in :meth:`NetworkModel.interface_name`.
        """
        names = {model.interface_name(f): f for f in range(model.n_interfaces)}
        index = {(model.tuple_key(t)[0], model.tuple_key(t)[1]): t
                 for t in range(len(model.arrays.tup_c))}
        probs: dict[int, dict[int, float]] = {}
        for name, entries in data.items():
            if name not in names:
                raise ValueError(f"unknown interface {name!r}")
            mass = probs.setdefault(names[name], {})
            for ent in entries:
                key = CommodityKey(int(ent["service"]), int(ent["stage"]), int(ent["dest_set"]),
                                   int(str(ent["q"]), 2))
                t = index.get((key, int(str(ent["s"]), 2)))
                if t is None:
                    raise ValueError(f"{name}: no tuple {ent}")
                mass[t] = mass.get(t, 0.0) + float(ent["p"])
        spec = cls(probs)
        spec.validate(model)
        return spec

    def validate(self, model: NetworkModel) -> None:
        a = model.arrays
        for f, mass in self.probs.items():
            if not 0 <= f < model.n_interfaces:
                raise ValueError(f"unknown interface {f}")
            vals = np.array(list(mass.values()), dtype=float)
            if np.any(vals < 0):
                raise ValueError(f"negative probability on {model.interface_name(f)}")
            if vals.sum() > 1 + 1e-12:
                raise ValueError(f"probabilities on {model.interface_name(f)} sum to {vals.sum()} > 1")
            for t in mass:
                if f < model.n_nodes and a.content_next[a.tup_c[t]] < 0:
                    raise ValueError("final-stage tuples cannot be processed")


def randomized_decide(spec: RandomizedPolicySpec, model: NetworkModel,
                      rng: np.random.Generator) -> FlowAssignment:
    """Each interface draws one tuple (or idle) and commits full capacity to it."""
    a = model.arrays
    fa = FlowAssignment.idle(model)
    for f in sorted(spec.probs):
        mass = spec.probs[f]
        tuples = np.fromiter(mass.keys(), dtype=np.int64, count=len(mass))
        cum = np.cumsum(np.fromiter(mass.values(), dtype=float, count=len(mass)))
        k = int(np.searchsorted(cum, rng.random(), side="right"))
        if k >= len(tuples):
            continue
        t = int(tuples[k])
        if f < model.n_nodes:
            fa.set(f, t, a.proc_cap[f] / a.content_workload[a.tup_c[t]])
        else:
            fa.set(f, t, a.arc_cap[f - model.n_nodes])
    return fa


class Policy:
    """Policy object used by the engine."""
    kind: str = "ldp-multicast"
    unicast_arrivals: bool = False

    def decide(self, Q: QueueTable, model: NetworkModel, rng: Optional[np.random.Generator]) -> FlowAssignment:
        raise NotImplementedError

    def arrival_map(self, model: NetworkModel) -> ArrivalMap:
        return ArrivalMap.for_model(model, unicast=self.unicast_arrivals)


class LDPPolicy(Policy):
    def __init__(self, V: float = 0.0, unicast: bool = False, dest_read: str = DEFAULT_DEST_READ):
        self.params = PolicyParams(V, "ldp-unicast-baseline" if unicast else "ldp-multicast", dest_read)
        self.kind = self.params.kind
        self.unicast_arrivals = unicast

    @property
    def V(self) -> float:
        return self.params.V

    @property
    def dest_read(self) -> str:
        return self.params.dest_read

    def tuples(self, model: NetworkModel) -> tuple[np.ndarray, np.ndarray]:
        return _tuples(model, self.params)

    def decide(self, Q, model, rng=None):
        return ldp_decide(Q, model, self.params)

    def __repr__(self):
        return f"LDPPolicy(V={self.V:g}, kind={self.kind!r}, dest_read={self.dest_read!r})"


class RandomizedPolicy(Policy):
    kind = "randomized"

    def __init__(self, spec: RandomizedPolicySpec):
        self.spec = spec

    def decide(self, Q, model, rng=None):
        if rng is None:
            raise ValueError("randomized policy needs an rng")
        return randomized_decide(self.spec, model, rng)


def make_policy(kind: str, V: float = 0.0, spec: Optional[RandomizedPolicySpec] = None,
                dest_read: str = DEFAULT_DEST_READ) -> Policy:
    aliases = {"multicast": "ldp-multicast", "unicast": "ldp-unicast-baseline"}
    kind = aliases.get(kind, kind)
    if kind == "ldp-multicast":
        return LDPPolicy(V, dest_read=dest_read)
    if kind == "ldp-unicast-baseline":
        return LDPPolicy(V, unicast=True, dest_read=dest_read)
    if kind == "randomized":
        if spec is None:
            raise ValueError("randomized policy needs a RandomizedPolicySpec")
        return RandomizedPolicy(spec)
    raise ValueError(f"unknown policy kind {kind!r}")
