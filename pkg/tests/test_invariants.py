"""Property tests: random small networks must satisfy every ledger invariant."""
import numpy as np
from hypothesis import given, strategies as st

from multicast_sfc.audit import LedgerRecorder, audit_ledger
from multicast_sfc.engine import run
from multicast_sfc.model import build_network
from multicast_sfc.policy import LDPPolicy, RandomizedPolicy, RandomizedPolicySpec

from conftest import micro


@st.composite
def small_configs(draw):
    n = draw(st.integers(2, 4))
    ring = [(i, (i + 1) % n) for i in range(n)] + [((i + 1) % n, i) for i in range(n)]
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3))
    arcs = tuple(dict.fromkeys(a for a in ring + extra if a[0] != a[1]))
    members = draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=min(3, n), unique=True))
    fns = tuple(draw(st.lists(st.tuples(st.sampled_from([0.5, 1.0, 2.0]), st.floats(0.05, 1.0)),
                              min_size=1, max_size=2)))
    return micro(n, arcs=arcs, fns=fns, members=tuple(sorted(members)),
                 cap=draw(st.floats(1.0, 8.0)), cpus=draw(st.floats(0.5, 4.0)),
                 source=draw(st.integers(0, n - 1)), rate=draw(st.floats(0.0, 6.0)),
                 proc_price=draw(st.floats(0.0, 5.0)), arc_price=draw(st.floats(0.0, 5.0)),
                 dest_read=draw(st.sampled_from(["zero", "residual"])))


@given(cfg=small_configs(), V=st.sampled_from([0.0, 0.5, 20.0]), unicast=st.booleans(),
       seed=st.integers(0, 2**31 - 1))
def test_ldp_runs_satisfy_all_invariants(cfg, V, unicast, seed):
    policy = LDPPolicy(V, unicast=unicast, dest_read=cfg.dest_read)
    rec = LedgerRecorder()
    res = run(cfg, policy, slots=120, seed=seed, recorder=rec, sample_every=10)
    report = audit_ledger(rec.rows)
    assert report.passed, report.to_text()
    Q = res.final_Q
    assert np.all(Q >= 0)
    assert np.all(Q[build_network(cfg).arrays.dest_state] == 0)
    assert np.all(res.timeline["cost"] >= 0)
    again = run(cfg, policy, slots=120, seed=seed, sample_every=10)
    assert np.array_equal(again.final_Q, Q)
    for k in res.timeline:
        assert np.array_equal(again.timeline[k], res.timeline[k]), (k, again.timeline[k], res.timeline[k])


@given(cfg=small_configs(), seed=st.integers(0, 1000), data=st.data())
def test_randomized_runs_satisfy_invariants(cfg, seed, data):
    model = build_network(cfg)
    A = model.arrays
    beta = {}
    for f in range(model.n_interfaces):
        allowed = [t for t in range(len(A.tup_c)) if f >= model.n_nodes or A.content_next[A.tup_c[t]] >= 0]
        picks = data.draw(st.lists(st.sampled_from(allowed), max_size=3, unique=True)) if allowed else []
        if picks:
            w = data.draw(st.lists(st.floats(0.0, 1.0 / len(picks)), min_size=len(picks),
                                   max_size=len(picks)))
            beta[f] = dict(zip(picks, w))
    rec = LedgerRecorder()
    run(cfg, RandomizedPolicy(RandomizedPolicySpec(beta)), slots=80, seed=seed, model=model, recorder=rec)
    report = audit_ledger(rec.rows)
    assert report.passed, report.to_text()
