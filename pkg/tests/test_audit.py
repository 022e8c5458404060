import dataclasses

import numpy as np
import pytest

from multicast_sfc.audit import (BRUTE_FORCE_LIMIT, LedgerRecorder, audit_ledger, brute_force_decision,
                                 check_capacity, check_conservation, check_cost, check_coverage,
                                 check_destination_states, read_ledger, ycut_capacity_oracle)
from multicast_sfc.engine import run
from multicast_sfc.model import build_network
from multicast_sfc.policy import PolicyParams, RandomizedPolicy, RandomizedPolicySpec, ldp_decide
from multicast_sfc.queueing import QueueTable
from multicast_sfc.scenarios import abilene, chain2, single_node, y_network

from conftest import key, micro, put, tuple_index, valid_backlog


@pytest.fixture(scope="module")
def chain_rows():
    rec = LedgerRecorder()
    run(chain2(arrival_rate=3e6), slots=400, seed=11, recorder=rec)
    return rec.rows


def _replace(rows, index, **changes):
    out = list(rows)
    out[index] = dataclasses.replace(rows[index], **changes)
    return out


# --- ledger audits --------------------------------------------------------------

def test_clean_run_passes(chain_rows):
    report = audit_ledger(chain_rows)
    assert report.passed, report.to_text()
    assert {c.name for c in report.checks} == {"conservation", "capacity", "coverage", "cost",
                                               "destination_state"}


def test_idle_run_is_balanced():
    rec = LedgerRecorder()
    run(chain2(arrival_rate=0.0), slots=50, seed=0, recorder=rec)
    assert audit_ledger(rec.rows).passed


def test_csv_round_trip(tmp_path, chain_rows):
    path = tmp_path / "ledger.csv"
    rec = LedgerRecorder(path)
    run(chain2(arrival_rate=3e6), slots=400, seed=11, recorder=rec)
    assert read_ledger(path) == chain_rows
    assert audit_ledger(path).passed


def test_dropped_posting_breaks_conservation(chain_rows):
    k = next(i for i, r in enumerate(chain_rows) if r.kind == "tx" and r.amount > 0 and r.slot > 100)
    bad = chain_rows[:k] + chain_rows[k + 1:]
    res = check_conservation(bad)["conservation"]
    assert not res.passed
    dropped = chain_rows[k]
    assert f"stage {dropped.stage}" in res.locus
    assert f"node {dropped.node}" in res.locus or f"node {dropped.peer}" in res.locus


def test_over_assignment_breaks_capacity(chain_rows):
    k = next(i for i, r in enumerate(chain_rows) if r.kind == "tx")
    bad = _replace(chain_rows, k, requested=chain_rows[k].capacity * 1.5)
    res = check_capacity(bad)["capacity"]
    assert not res.passed and chain_rows[k].interface in res.locus
    assert res.max_violation == pytest.approx(0.5)


def test_bad_split_breaks_coverage(chain_rows):
    k = next(i for i, r in enumerate(chain_rows) if r.kind == "tx" and r.q == "01")
    assert not check_coverage(_replace(chain_rows, k, s="10"))["coverage"].passed


def test_misreported_cost_detected(chain_rows):
    k = next(i for i, r in enumerate(chain_rows) if r.kind == "cost" and r.amount > 0)
    bad = _replace(chain_rows, k, amount=chain_rows[k].amount * 1.01)
    assert not check_cost(bad)["cost"].passed


def test_leftover_destination_state_detected(chain_rows):
    last = [r for r in chain_rows if r.kind == "deliver"][0]
    extra = dataclasses.replace(last, kind="q1", q=last.q, amount=1.0)
    assert not check_destination_states(chain_rows + [extra]).passed


def test_tally_audit_on_stable_run():
    cfg = y_network(arrival_rate=6e6)
    model = build_network(cfg)
    res = run(cfg, slots=20_000, seed=2, model=model, audit_from=10_000)
    assert check_conservation(res.tally, model).passed
    assert check_capacity(res.tally, model).passed


def test_randomized_run_respects_capacity(line3):
    f = line3.n_nodes
    spec = RandomizedPolicySpec({f: {tuple_index(line3, key(1, 0b11), 0b10): 0.5},
                                 0: {tuple_index(line3, key(1, 0b11), 0b11): 0.7}})
    rec = LedgerRecorder()
    cfg = line3.config.replace(arrival_rate=4e6)
    run(cfg, RandomizedPolicy(spec), slots=300, seed=1, recorder=rec)
    report = audit_ledger(rec.rows)
    assert report["capacity"].passed and report["coverage"].passed and report["conservation"].passed


def test_report_rendering(chain_rows):
    report = audit_ledger(chain_rows)
    assert report.to_text().endswith("overall: PASS")
    assert '"passed": true' in report.to_json()


# --- brute force oracle -----------------------------------------------------------

def test_brute_force_agrees_on_100_random_chain_instances():
    model = build_network(chain2())
    agree = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        Q = QueueTable(model, valid_backlog(model, r))
        params = PolicyParams(float(r.choice([0.0, 1.0, 50.0])),
                              "ldp-unicast-baseline" if seed % 4 == 3 else "ldp-multicast",
                              "residual" if seed % 5 == 4 else "zero")
        agree += brute_force_decision(Q, model, params) == ldp_decide(Q, model, params)
    assert agree == 100


def test_brute_force_single_node():
    model = build_network(single_node())
    Q = put(model, QueueTable(model), {(0, 1, 1): 5})
    assert brute_force_decision(Q, model, PolicyParams(0.0)) == ldp_decide(Q, model, PolicyParams(0.0))


def test_brute_force_zero_queue_idles():
    model = build_network(chain2())
    fa = brute_force_decision(QueueTable(model), model, PolicyParams(0.0))
    assert np.all(fa.choice == -1)


def test_brute_force_rejects_large_instances():
    with pytest.raises(ValueError, match="too large"):
        brute_force_decision(QueueTable(build_network(abilene())), build_network(abilene()), PolicyParams(0.0))
    big = build_network(micro(3, arcs=((0, 1), (1, 0), (1, 2), (2, 1)), members=(1, 2)))
    with pytest.raises(ValueError, match="too large"):
        brute_force_decision(QueueTable(big), big, PolicyParams(0.0))
    assert BRUTE_FORCE_LIMIT > 0


# --- Y-cut oracle -----------------------------------------------------------------

def test_ycut_oracle_values():
    assert ycut_capacity_oracle(y_network(kappa=10)) == (10, 5)
    assert ycut_capacity_oracle(y_network(kappa=0)) == (0, 0)


def test_ycut_rejects_other_topologies():
    with pytest.raises(ValueError):
        ycut_capacity_oracle(chain2())
