import math

import numpy as np
import pytest

from multicast_sfc import engine
from multicast_sfc.engine import (RunResult, SimState, StabilityVerdict, detect_stability, run, step,
                                  sweep_lambda, sweep_v)
from multicast_sfc.model import build_network
from multicast_sfc.policy import LDPPolicy
from multicast_sfc.scenarios import chain2, y_network

from conftest import micro


def _same(a: RunResult, b: RunResult):
    assert a.timeline.keys() == b.timeline.keys()
    for k in a.timeline:
        assert np.array_equal(a.timeline[k], b.timeline[k]), k
    assert np.array_equal(a.final_Q, b.final_Q)
    assert a.avg_cost == b.avg_cost and a.avg_backlog == b.avg_backlog


def test_idle_step_changes_nothing():
    model = build_network(chain2())
    state = SimState.initial(model)
    nxt, m = step(state, LDPPolicy(0.0), np.random.default_rng(0), arrivals=np.zeros(1))
    assert nxt.Q == state.Q and nxt.slot == 1
    assert m.cost == 0 and m.backlog == 0 and m.dummy == 0


def test_zero_slots_rejected():
    with pytest.raises(ValueError):
        run(chain2(), slots=0)


def test_timeline_length():
    res = run(chain2(), slots=1234, sample_every=100)
    assert len(res.timeline["slot"]) == math.ceil(1234 / 100)
    assert res.timeline["slot"][-1] == 1234


def test_replay_is_bit_identical():
    cfg = y_network(arrival_rate=7e6)
    _same(run(cfg, slots=5000, seed=42), run(cfg, slots=5000, seed=42))


def test_seeds_differ():
    cfg = y_network(arrival_rate=7e6)
    assert run(cfg, slots=2000, seed=1).avg_backlog != run(cfg, slots=2000, seed=2).avg_backlog


@pytest.mark.parametrize("cfg", [chain2(arrival_rate=3e6), y_network(arrival_rate=6e6),
                                 y_network(arrival_rate=4e6, V=2.0)])
@pytest.mark.parametrize("unicast", [False, True])
def test_fast_path_equals_stepwise(cfg, unicast):
    pol = LDPPolicy(cfg.V, unicast=unicast)
    _same(run(cfg, pol, slots=3000, seed=5), run(cfg, pol, slots=3000, seed=5, stepwise=True))


def test_audit_window_does_not_perturb_run():
    cfg = y_network(arrival_rate=6e6)
    a = run(cfg, slots=4000, seed=3)
    b = run(cfg, slots=4000, seed=3, audit_from=1500)
    _same(a, b)
    assert b.tally.start_slot == 1500 and b.tally.end_slot == 4000


def test_single_link_below_capacity_is_stable():
    cfg = micro(2, arcs=((0, 1),), members=(1,), cap=10.0, rate=7.0, fns=((1.0, 0.01),), cpus=1.0)
    res = run(cfg, slots=10_000, seed=0)
    assert res.verdict.stable
    assert res.timeline["backlog_total"].max() < 1_000


def test_single_link_above_capacity_is_unstable():
    cfg = micro(2, arcs=((0, 1),), members=(1,), cap=10.0, rate=12.0, fns=((1.0, 0.01),), cpus=1.0)
    res = run(cfg, slots=10_000, seed=0)
    assert not res.verdict.stable and math.isinf(res.verdict.stable_backlog)


def test_throughput_through_scaling_chain():
    # xi = 2 doubles every packet; each of the two destinations receives 2 * rate
    cfg = micro(3, arcs=((0, 1), (1, 0), (1, 2), (2, 1)), members=(1, 2), cap=20.0, rate=3.0,
                fns=((2.0, 0.05),), cpus=1.0)
    res = run(cfg, slots=100_000, seed=9)
    assert res.verdict.stable
    for (svc, ds, node), r in res.delivered_rate.items():
        assert r == pytest.approx(6.0, rel=0.02), node


def test_cost_is_nonnegative_and_priced():
    cfg = micro(2, arcs=((0, 1),), members=(1,), cap=10.0, rate=5.0, fns=((1.0, 0.01),), cpus=1.0,
                proc_price=2.0, arc_price=3.0)
    res = run(cfg, slots=5000, seed=0)
    assert np.all(res.timeline["cost"] >= 0)
    # every packet is processed once (0.01 CPU) and sent once, each CPU-second costs 2
    # and a packet/slot sustained for a second costs 3; cost counts real packets only
    assert res.avg_cost == pytest.approx(5.0 * (0.01 * 2.0 + 3.0), rel=0.05)


# --- stability detector -------------------------------------------------------

def test_linear_growth_is_unstable():
    v = detect_stability(np.arange(1000, dtype=float))
    assert not v.stable and math.isinf(v.stable_backlog) and v.label == "unstable"


def test_bounded_noise_is_stable():
    x = 100 + np.random.default_rng(0).uniform(-10, 10, 1000)
    v = detect_stability(x)
    assert v.stable and v.stable_backlog == pytest.approx(100, abs=2)


def test_tiny_absolute_growth_is_stable():
    assert detect_stability(np.r_[np.zeros(60), np.full(20, 0.01), np.full(20, 0.5)]).stable


def test_thresholds_are_configurable():
    x = np.r_[np.full(80, 100.0), np.full(20, 105.0)]
    assert detect_stability(x).stable
    assert not detect_stability(x, ratio=1.01).stable


def test_short_series_rejected():
    with pytest.raises(ValueError):
        detect_stability([1.0, 2.0])


# --- sweeps -------------------------------------------------------------------

def test_sweep_below_boundary_returns_max():
    res = sweep_lambda(y_network(), [2e6, 4e6], slots=5000, seed=1)
    assert [r.verdict for r in res.rows] == ["stable", "stable"]
    assert res.boundary == 4e6


def test_sweep_validation():
    with pytest.raises(ValueError):
        sweep_lambda(y_network(), [], slots=100)
    with pytest.raises(ValueError):
        sweep_lambda(y_network(), [4e6, 2e6], slots=100)
    with pytest.raises(ValueError):
        sweep_v(y_network(), [], slots=100)


def test_non_monotone_verdicts_warn(monkeypatch, caplog):
    def fake(jobs, workers=None):
        out = []
        for cfg, _, _, _ in jobs:
            stable = cfg.arrival_rate != 2e6
            out.append(RunResult("x", "ldp-multicast", 0.0, cfg.arrival_rate, 10, 0, 1, {}, 1.0, 0.0, 0.0,
                                 0.0, 0.0, {}, StabilityVerdict(stable, 1.0, 1.0 if stable else math.inf)))
        return out
    monkeypatch.setattr(engine, "_map", fake)
    res = sweep_lambda(y_network(), [1e6, 2e6, 3e6])
    assert res.boundary == 3e6
    assert res.warnings and "non-monotone" in caplog.text


def test_workers_env_matches_serial(monkeypatch):
    cfg = y_network()
    grid = [3e6, 6e6]
    serial = sweep_lambda(cfg, grid, slots=3000, seed=4)
    monkeypatch.setenv(engine.WORKERS_ENV, "2")
    parallel = sweep_lambda(cfg, grid, slots=3000, seed=4)
    assert serial.rows == parallel.rows


def test_v_sweep_orders_backlog():
    cfg = chain2(arrival_rate=3e6)
    res = sweep_v(cfg, [0.0, 1e3, 1e4], slots=20_000, seed=2)
    backlog = [r.avg_backlog for r in res.rows]
    assert backlog[0] == min(backlog)
    assert backlog == sorted(backlog)
