"""Time-slotted simulation loop, metrics, stability detection and sweeps."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from numba import njit

from .model import NetworkModel, ScenarioConfig, build_network, rate_to_packets
from .policy import LDPPolicy, Policy, _decide_kernel, make_policy, read_map
from .queueing import (ArrivalMap, DeliveryLog, QueueTable, _apply_kernel, _consume_kernel,
                       _serve_kernel, apply_slot, serve_and_split)

log = logging.getLogger(__name__)

SAMPLE_EVERY = 100
WARMUP_FRACTION = 0.10
STABILITY_WINDOW = 0.20
STABILITY_RATIO = 1.10
STABILITY_ABS_TOL = 1.0  # packets
CHUNK_SLOTS = 10_000
WORKERS_ENV = "MCSC_WORKERS"

SeedLike = Union[int, np.random.SeedSequence]


# ---------------------------------------------------------------------------
# per-slot kernels shared by the stepwise and the chunked paths

@njit(cache=True)
def _slot_cost(A, choice, real, dummy):
    """(real cost, dummy cost, dummy packets) of one slot in internal units."""
    N = A.n_nodes
    cost = 0.0
    dcost = 0.0
    dpk = 0.0
    for f in range(choice.shape[0]):
        t = choice[f]
        if t < 0:
            continue
        if f < N:
            unit = A.proc_cost[f] * A.content_workload[A.tup_c[t]]
        else:
            unit = A.arc_cost[f - N]
        cost += unit * real[f]
        dcost += unit * dummy[f]
        dpk += dummy[f]
    return cost, dcost, dpk


@njit(cache=True)
def _tally_ops(A, choice, amount, real, post_node, post_c, post_q, post_stream, arrivals,
               debit, credit, load_ratio):
    N = A.n_nodes
    for f in range(choice.shape[0]):
        t = choice[f]
        if t < 0:
            continue
        c = A.tup_c[t]
        q = A.tup_q[t]
        s = A.tup_s[t]
        x = real[f]
        if f < N:
            i = f
            used = A.content_workload[c] * amount[f]
            cap = A.proc_cap[i]
            credit[i, A.content_next[c], s] += A.content_scaling[c] * x
        else:
            e = f - N
            i = A.arc_src[e]
            used = amount[f]
            cap = A.arc_cap[e]
            credit[A.arc_dst[e], c, s] += x
        debit[i, c, q] += x
        if s != q:
            credit[i, c, q ^ s] += x
        if cap > 0.0:
            ratio = used / cap
        elif used > 0.0:
            ratio = np.inf
        else:
            ratio = 0.0
        if ratio > load_ratio[f]:
            load_ratio[f] = ratio
    for p in range(post_node.shape[0]):
        credit[post_node[p], post_c[p], post_q[p]] += arrivals[post_stream[p]]


@njit(cache=True)
def _total(x):
    # sequential sum; both paths reduce through here so metrics match bit for bit
    t = 0.0
    for v in x.ravel():
        t += v
    return t


@njit(cache=True)
def _backlog_stats(Q):
    s = 0.0
    s2 = 0.0
    for v in Q.ravel():
        s += v
        s2 += v * v
    return s, 0.5 * s2


@njit(cache=True)
def _tally_consume(Q, A, debit, credit):
    # mirrors _consume_kernel; must run on the pre-consumption table
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
                        debit[i, c, q] += x
                        r = q ^ bit
                        if r:
                            credit[i, c, r] += x


@njit(cache=True)
def _ldp_chunk(Q, A, rq, V, proc_t, link_t, post_node, post_c, post_q, post_stream, arrivals,
               delivered, out, track, debit, credit, load_ratio):
    """Run ``arrivals.shape[0]`` slots in place on ``Q``.

    ``out[k]`` = (cost, dummy cost, dummy packets, backlog, delivered, lyapunov).
    Real postings are tallied into ``debit``/``credit`` when ``track``.
    """
    n_if = A.n_nodes + A.arc_src.shape[0]
    choice = np.empty(n_if, dtype=np.int64)
    amount = np.empty(n_if)
    weight = np.empty(n_if)
    real = np.empty(n_if)
    dummy = np.empty(n_if)
    rem = np.empty_like(Q)
    Qn = np.empty_like(Q)
    for k in range(arrivals.shape[0]):
        _decide_kernel(Q, A, rq, V, proc_t, link_t, choice, amount, weight)
        _serve_kernel(Q, A, choice, amount, weight, real, dummy, rem)
        _apply_kernel(rem, A, choice, real, post_node, post_c, post_q, post_stream, arrivals[k], Qn)
        before = _total(delivered)
        if track:
            _tally_ops(A, choice, amount, real, post_node, post_c, post_q, post_stream, arrivals[k],
                       debit, credit, load_ratio)
            _tally_consume(Qn, A, debit, credit)
        _consume_kernel(Qn, A, delivered)
        cost, dcost, dpk = _slot_cost(A, choice, real, dummy)
        Q[:] = Qn
        out[k, 0] = cost
        out[k, 1] = dcost
        out[k, 2] = dpk
        out[k, 3], out[k, 5] = _backlog_stats(Q)
        out[k, 4] = _total(delivered) - before


# ---------------------------------------------------------------------------
# state, metrics, results

@dataclass
class FlowTally:
    """Accumulated real postings over an audit window (see :mod:`.audit`)."""
    start_slot: int
    end_slot: int
    q_start: np.ndarray
    q_end: np.ndarray
    debit: np.ndarray
    credit: np.ndarray
    load_ratio: np.ndarray
    dummy_packets: float = 0.0

    @classmethod
    def begin(cls, model: NetworkModel, Q: np.ndarray, slot: int) -> "FlowTally":
        return cls(slot, slot, Q.copy(), Q.copy(), np.zeros(model.shape), np.zeros(model.shape),
                   np.zeros(model.n_interfaces))


@dataclass
class SimState:
    model: NetworkModel
    Q: QueueTable
    slot: int = 0
    delivered: Optional[DeliveryLog] = None

    def __post_init__(self):
        if self.delivered is None:
            self.delivered = DeliveryLog.empty(self.model)

    @classmethod
    def initial(cls, model: NetworkModel) -> "SimState":
        return cls(model, QueueTable(model))


@dataclass
class SlotMetrics:
    cost: float  # internal units per slot, real packets only
    dummy_cost: float
    dummy: float
    backlog: float
    delivered: float
    lyapunov: float

    def as_row(self) -> tuple:
        return (self.cost, self.dummy_cost, self.dummy, self.backlog, self.delivered, self.lyapunov)


@dataclass
class StabilityVerdict:
    stable: bool
    ratio: float
    stable_backlog: float  # inf when unstable

    @property
    def label(self) -> str:
        return "stable" if self.stable else "unstable"


@dataclass
class RunResult:
    scenario: str
    policy: str
    V: float
    arrival_rate: float  # bps per stream
    slots: int
    seed: Optional[int]
    sample_every: int
    timeline: dict  # column -> array, one entry per sample window
    avg_backlog: float
    avg_cost_slot: float
    avg_cost: float  # per second
    avg_dummy: float
    total_delivered: float
    delivered_rate: dict  # (service, dest_set, node) -> packets/slot after warm-up
    verdict: StabilityVerdict
    final_Q: np.ndarray = field(repr=False, default=None)
    tally: Optional[FlowTally] = field(repr=False, default=None)

    @property
    def arrival_mbps(self) -> float:
        return self.arrival_rate / 1e6

    def summary(self) -> dict:
        return {
            "scenario": self.scenario, "policy": self.policy, "V": self.V,
            "lambda_mbps": self.arrival_mbps, "slots": self.slots, "seed": self.seed,
            "verdict": self.verdict.label, "growth_ratio": self.verdict.ratio,
            "stable_backlog": self.verdict.stable_backlog,
            "avg_backlog": self.avg_backlog, "avg_cost": self.avg_cost,
            "avg_cost_per_slot": self.avg_cost_slot, "avg_dummy_per_slot": self.avg_dummy,
            "total_delivered": self.total_delivered,
        }


def detect_stability(series: Sequence[float], window: float = STABILITY_WINDOW,
                     ratio: float = STABILITY_RATIO, abs_tol: float = STABILITY_ABS_TOL) -> StabilityVerdict:
    """Compare the means of the last two ``window``-fraction slices of a backlog series.

    Growth by more than ``ratio`` (and by more than ``abs_tol`` packets) is unstable.
    """
    x = np.asarray(series, dtype=float)
    w = int(len(x) * window)
    if w < 1 or 2 * w > len(x):
        raise ValueError(f"series of length {len(x)} too short for two {window:.0%} windows")
    prev = float(x[-2 * w:-w].mean())
    last = float(x[-w:].mean())
    growth = last / prev if prev > 0 else (math.inf if last > 0 else 1.0)
    unstable = last > ratio * prev and last - prev > abs_tol
    stable_mean = float(x[-2 * w:].mean())
    return StabilityVerdict(not unstable, growth, math.inf if unstable else stable_mean)


# ---------------------------------------------------------------------------
# stepping

def _as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def step(state: SimState, policy: Policy, rng: np.random.Generator,
         arrivals: Optional[np.ndarray] = None, arrival_map: Optional[ArrivalMap] = None,
         recorder=None, tally: Optional[FlowTally] = None) -> tuple[SimState, SlotMetrics]:
    """Advance one slot: decide, serve, apply with fresh arrivals, consume, record."""
    model = state.model
    if arrival_map is None:
        arrival_map = policy.arrival_map(model)
    if arrivals is None:
        arrivals = rng.poisson(model.stream_rates).astype(float)
    fa = policy.decide(state.Q, model, rng)
    ledger = serve_and_split(model, state.Q, fa)
    Qn = apply_slot(model, ledger, arrivals, arrival_map)
    if tally is not None:
        a = arrival_map
        _tally_ops(model.arrays, fa.choice, fa.amount, ledger.real, a.node, a.content, a.status,
                   a.stream, arrivals, tally.debit, tally.credit, tally.load_ratio)
        _tally_consume(Qn.backlog, model.arrays, tally.debit, tally.credit)
    cost, dcost, dpk = _slot_cost(model.arrays, fa.choice, ledger.real, ledger.dummy)
    if recorder is not None:
        recorder.record(state.slot, model, ledger, arrivals, arrival_map, Qn.backlog, cost)
    delivered = state.delivered.counts.copy()
    before = _total(delivered)
    _consume_kernel(Qn.backlog, model.arrays, delivered)
    backlog, lyap = _backlog_stats(Qn.backlog)
    metrics = SlotMetrics(cost, dcost, dpk, backlog, _total(delivered) - before, lyap)
    return SimState(model, Qn, state.slot + 1, DeliveryLog(delivered)), metrics


class _Accumulator:
    """Folds per-slot metric rows into window samples and post-warm-up averages."""

    def __init__(self, slots: int, sample_every: int, warmup: int):
        self.K = sample_every
        self.warmup = warmup
        self.n = (slots + sample_every - 1) // sample_every
        self.win = np.zeros((self.n, 6))
        self.win_len = np.zeros(self.n)
        self.sums = np.zeros(6)
        self.count = 0
        self.t = 0

    def add(self, rows: np.ndarray) -> None:
        t0 = self.t
        idx = (t0 + np.arange(len(rows))) // self.K
        np.add.at(self.win, idx, rows)
        np.add.at(self.win_len, idx, 1)
        keep = max(self.warmup - t0, 0)
        if keep < len(rows):
            self.sums += rows[keep:].sum(axis=0)
            self.count += len(rows) - keep
        self.t += len(rows)


def run(config: ScenarioConfig, policy: Optional[Policy] = None, slots: Optional[int] = None,
        seed: Optional[SeedLike] = None, model: Optional[NetworkModel] = None,
        sample_every: int = SAMPLE_EVERY, audit_from: Optional[int] = None,
        recorder=None, stepwise: bool = False) -> RunResult:
    """Simulate ``slots`` slots from empty queues.

    ``audit_from`` starts a :class:`FlowTally` at that slot. A ``recorder``
    (ledger dump) or a non-LDP policy forces the slower stepwise path; both
    paths run the same kernels and give identical results.
    """
    slots = config.horizon if slots is None else int(slots)
    if slots < 1:
        raise ValueError("need at least one slot")
    if sample_every < 1:
        raise ValueError("sample_every must be positive")
    seed = config.seed if seed is None else seed
    model = build_network(config) if model is None else model
    policy = make_policy(config.policy, config.V, dest_read=config.dest_read) if policy is None else policy
    rng = _as_generator(seed)
    amap = policy.arrival_map(model)
    acc = _Accumulator(slots, sample_every, int(WARMUP_FRACTION * slots))
    track = audit_from is not None
    tally = None

    state = SimState.initial(model)
    if recorder is not None:
        recorder.begin(model, state.Q.backlog, 0)
    fast = isinstance(policy, LDPPolicy) and recorder is None and not stepwise
    if fast:
        proc_t, link_t = policy.tuples(model)
    warm_counts = state.delivered.counts.copy()

    def events(slot):
        nonlocal tally, warm_counts
        if slot == acc.warmup:
            warm_counts = state.delivered.counts.copy()
        if track and tally is None and slot == audit_from:
            tally = FlowTally.begin(model, state.Q.backlog, slot)

    t = 0
    while t < slots:
        n = min(CHUNK_SLOTS, slots - t)
        arrivals = rng.poisson(model.stream_rates, size=(n, len(model.streams))).astype(float)
        rows = np.empty((n, 6))
        if fast:
            cuts = sorted({0, n} | {b - t for b in (acc.warmup, audit_from)
                                    if b is not None and t < b < t + n})
            for a, b in zip(cuts, cuts[1:]):
                events(t + a)
                _ldp_segment(state, model, policy, proc_t, link_t, amap, arrivals[a:b], rows[a:b], tally)
            state.slot = t + n
        else:
            for k in range(n):
                events(t + k)
                state, m = step(state, policy, rng, arrivals[k], amap, recorder, tally)
                rows[k] = m.as_row()
        if tally is not None:
            tally.dummy_packets += rows[max(tally.start_slot - t, 0):, 2].sum()
        acc.add(rows)
        t += n
    if acc.warmup >= slots:
        warm_counts = state.delivered.counts.copy()
    if tally is not None:
        tally.end_slot = slots
        tally.q_end = state.Q.backlog.copy()
    if recorder is not None:
        recorder.end(model, state.Q.backlog, slots)
    return _finish(config, model, policy, slots, seed, acc, state, tally, warm_counts)


def _ldp_segment(state, model, policy, proc_t, link_t, amap, arrivals, rows, tally):
    if tally is None:
        debit = credit = np.zeros((1, 1, 1))
        load = np.zeros(model.n_interfaces)
    else:
        debit, credit, load = tally.debit, tally.credit, tally.load_ratio
    _ldp_chunk(state.Q.backlog, model.arrays, read_map(model, policy.dest_read), float(policy.V), proc_t, link_t, amap.node,
               amap.content, amap.status, amap.stream, arrivals, state.delivered.counts, rows,
               tally is not None, debit, credit, load)


def _finish(config, model, policy, slots, seed, acc: _Accumulator, state: SimState, tally,
            warm_counts) -> RunResult:
    means = acc.win / np.maximum(acc.win_len, 1)[:, None]
    cum = np.cumsum(acc.win, axis=0)
    ends = np.minimum((np.arange(acc.n) + 1) * acc.K, slots)
    timeline = {
        "slot": ends,
        "backlog_total": means[:, 3],
        "cost": means[:, 0] / config.slot_seconds,
        "delivered": cum[:, 4],
        "dummy": cum[:, 2],
        "lyapunov": means[:, 5],
    }
    avg = acc.sums / max(acc.count, 1)
    if acc.n >= 5:
        verdict = detect_stability(timeline["backlog_total"])
    else:
        verdict = StabilityVerdict(True, 1.0, float(avg[3]))
    span = max(slots - acc.warmup, 1)
    after = DeliveryLog(state.delivered.counts - warm_counts).by_destination(model)
    rate = {k: v / span for k, v in after.items()}
    return RunResult(
        scenario=config.name, policy=policy.kind, V=getattr(policy, "V", 0.0),
        arrival_rate=config.arrival_rate, slots=slots,
        seed=seed if isinstance(seed, int) else None, sample_every=acc.K,
        timeline=timeline, avg_backlog=float(avg[3]), avg_cost_slot=float(avg[0]),
        avg_cost=float(avg[0]) / config.slot_seconds, avg_dummy=float(avg[2]),
        total_delivered=float(cum[-1, 4]), delivered_rate=rate,
        verdict=verdict, final_Q=state.Q.backlog, tally=tally,
    )


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepRow:
    value: float  # lambda in bps, or V
    verdict: str
    avg_backlog: float
    avg_cost: float
    stable_backlog: float


@dataclass
class SweepResult:
    kind: str  # "lambda" or "V"
    policy: str
    rows: list[SweepRow]
    boundary: Optional[float] = None
    warnings: list[str] = field(default_factory=list)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _run_point(args) -> RunResult:
    config, policy, slots, seed = args
    return run(config, policy, slots, seed)


def _map(jobs, workers: Optional[int] = None) -> list[RunResult]:
    workers = _workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_run_point(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_point, jobs))


def sweep_lambda(config: ScenarioConfig, grid: Sequence[float], policy: Optional[Policy] = None,
                 slots: Optional[int] = None, seed: Optional[int] = None,
                 workers: Optional[int] = None) -> SweepResult:
    """Stability verdict per arrival rate (bps per stream); boundary = largest stable rate."""
    grid = [float(x) for x in grid]
    if not grid:
        raise ValueError("empty lambda grid")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be sorted ascending")
    policy = make_policy(config.policy, config.V, dest_read=config.dest_read) if policy is None else policy
    seed = config.seed if seed is None else seed
    children = np.random.SeedSequence(seed).spawn(len(grid))
    jobs = [(config.replace(arrival_rate=lam), policy, slots, ss) for lam, ss in zip(grid, children)]
    results = _map(jobs, workers)
    rows = [SweepRow(lam, r.verdict.label, r.avg_backlog, r.avg_cost, r.verdict.stable_backlog)
            for lam, r in zip(grid, results)]
    stable = [r.value for r in rows if r.verdict == "stable"]
    out = SweepResult("lambda", policy.kind, rows, max(stable) if stable else None)
    first_bad = next((r.value for r in rows if r.verdict != "stable"), None)
    if first_bad is not None and any(v > first_bad for v in stable):
        msg = f"non-monotone verdicts: stable point above unstable lambda={first_bad:g}"
        out.warnings.append(msg)
        log.warning(msg)
    return out


def sweep_v(config: ScenarioConfig, grid: Sequence[float], arrival_rate: Optional[float] = None,
            unicast: bool = False, slots: Optional[int] = None, seed: Optional[int] = None,
            workers: Optional[int] = None) -> SweepResult:
    """Backlog/cost per V at a fixed arrival rate, on matched seeds."""
    grid = [float(v) for v in grid]
    if not grid:
        raise ValueError("empty V grid")
    cfg = config if arrival_rate is None else config.replace(arrival_rate=arrival_rate)
    seed = config.seed if seed is None else seed
    jobs = [(cfg, LDPPolicy(v, unicast=unicast, dest_read=cfg.dest_read), slots, seed) for v in grid]
    results = _map(jobs, workers)
    rows = [SweepRow(v, r.verdict.label, r.avg_backlog, r.avg_cost, r.verdict.stable_backlog)
            for v, r in zip(grid, results)]
    out = SweepResult("V", "ldp-unicast-baseline" if unicast else "ldp-multicast", rows)
    for r in rows:
        if r.verdict != "stable":
            msg = f"unstable run at V={r.value:g}; lambda may lie outside the region"
            out.warnings.append(msg)
            log.warning(msg)
    return out


def packets_per_slot(config: ScenarioConfig, rate_bps: float) -> float:
    return rate_to_packets(rate_bps, config.slot_seconds, config.packet_bits)
