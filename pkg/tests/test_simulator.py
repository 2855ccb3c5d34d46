from __future__ import annotations

import dataclasses

import pytest

from spotprobe.analysis import co_interrupt_cdf_records, compare_records
from spotprobe.core import InvariantError, PoolId, group_by_pool
from spotprobe.simulator import (
    CapacityState,
    PoolConfig,
    PoolSimulator,
    default_pools,
    run_scenario,
    scenario_from_dict,
    scenario_to_dict,
    validate_scenario,
)

POOL = PoolId("m5.large", "us-east-1", "us-east-1a")
QUIET = dict(foreign_mean=0.0, foreign_jitter=0.0, probe_overshoot_prob=0.0, precursor_prob=0.0,
             recovery_lag_mean_minutes=0.0)


def test_steady_state_keeps_target():
    cfg = PoolConfig(POOL, mean_up_minutes=1e9, **QUIET)
    sim = PoolSimulator(cfg, 3, seed=1)
    for t in range(1, 101):
        events, rec = sim.step(t * 180)
        assert events == []
        assert rec.running == 10 and rec.cycle == t


def test_forced_total_reclaim():
    cfg = PoolConfig(POOL, capacity_down=0, mean_up_minutes=30, mean_down_minutes=1e7, **QUIET)
    sim = PoolSimulator(cfg, 3, seed=3)
    down_at = None
    events = []
    for t in range(1, 2000):
        expiry = sim.state.state_expiry
        was_up = sim.state.state is CapacityState.UP
        fired, _ = sim.step(t * 180)
        events += fired
        if was_up and sim.state.state is CapacityState.DOWN:
            down_at = expiry
        if down_at is not None and sim.now > down_at + 400:
            break
    assert down_at is not None
    assert len(events) == 10
    assert len({e.node_id for e in events}) == 10
    assert all(0 < e.ts - down_at <= cfg.reclaim_delay_cap_s for e in events)
    assert sim.state.running == 0


def test_full_headroom_probe():
    sim = PoolSimulator(PoolConfig(POOL, capacity_up=20, mean_up_minutes=1e9, **QUIET), 3, seed=0)
    sim.step(180)
    assert sim.probe(10) == 10


def test_zero_headroom_probe():
    sim = PoolSimulator(PoolConfig(POOL, capacity_up=10, mean_up_minutes=1e9, **QUIET), 3, seed=0)
    _, rec = sim.step(180)
    assert rec.running == 10
    assert sim.probe(10) == 0


def test_reference_run_shape(default_bundle):
    by_pool = group_by_pool(default_bundle.cycles)
    assert len(by_pool) == 20
    for recs in by_pool.values():
        assert [r.cycle for r in recs] == list(range(1, 481))
    for recs in group_by_pool(default_bundle.running).values():
        assert [r.cycle for r in recs] == list(range(1, 481))
    assert len(default_bundle.probes) == 20 * 480 * 10


def test_same_seed_byte_identical(tmp_path):
    pools = default_pools(3)
    a = run_scenario(pools, 240, 3, 10, seed=11).write(tmp_path / "a")
    b = run_scenario(pools, 240, 3, 10, seed=11).write(tmp_path / "b")
    for kind in a:
        assert a[kind].read_bytes() == b[kind].read_bytes()


def test_seed_changes_probe_file(tmp_path):
    pools = default_pools(3)
    a = run_scenario(pools, 720, 3, 10, seed=11).write(tmp_path / "a")
    b = run_scenario(pools, 720, 3, 10, seed=12).write(tmp_path / "b")
    assert any(a[k].read_bytes() != b[k].read_bytes() for k in a)


def test_pool_order_does_not_change_a_pool():
    pools = default_pools(4)
    fwd = group_by_pool(run_scenario(pools, 300, 3, 10, seed=5).cycles)
    rev = group_by_pool(run_scenario(pools[::-1], 300, 3, 10, seed=5).cycles)
    assert fwd == rev


def test_conservatism_without_overshoot():
    pools = [dataclasses.replace(p, probe_overshoot_prob=0.0) for p in default_pools(20)]
    bundle = run_scenario(pools, 1440, 3, 10, seed=7)
    running = {(r.pool, r.cycle): r for r in bundle.running}
    for c in bundle.cycles:
        r = running[c.pool, c.cycle]
        if c.successes > r.running:
            assert r.running < r.target


def test_capacity_accounting():
    for cfg in default_pools(6):
        sim = PoolSimulator(cfg, 3, seed=2)
        for t in range(1, 481):
            sim.step(t * 180)
            st = sim.state
            committed = st.running - len(st.pending_reclaims)
            assert committed + st.foreign <= st.capacity
            assert st.foreign >= 0
            assert st.running <= cfg.tenant_target


def test_clustering_within_three_minutes(default_bundle):
    assert len(default_bundle.interruptions) >= 1000
    cdf = co_interrupt_cdf_records(default_bundle.interruptions)
    assert cdf.at(180) >= 0.92
    pts = [f for _, f in cdf.points(600)]
    assert pts == sorted(pts)


def test_default_compare_bands(default_bundle):
    counts = compare_records(default_bundle.cycles, default_bundle.running)
    assert counts.actual_lt / counts.total <= 0.01
    assert 0.05 <= counts.actual_gt / counts.total <= 0.30


def test_config_validation():
    with pytest.raises(InvariantError):
        PoolConfig(POOL, capacity_up=5).validate()
    with pytest.raises(InvariantError):
        PoolConfig(POOL, capacity_down=10).validate()
    with pytest.raises(InvariantError):
        validate_scenario([PoolConfig(POOL), PoolConfig(POOL)])
    with pytest.raises(InvariantError):
        run_scenario([PoolConfig(POOL)], 100, 3, 10, seed=0)


def test_scenario_dict_round_trip():
    pools = default_pools(5)
    assert scenario_from_dict(scenario_to_dict(pools)) == pools
    flat = scenario_from_dict({"defaults": {"capacity_up": 25},
                               "pools": [{"instance_type": "a", "region": "r", "zone": "rz"}]})
    assert flat[0].capacity_up == 25 and flat[0].pool == PoolId("a", "r", "rz")
    with pytest.raises(ValueError):
        scenario_from_dict({"pools": [{"pool": POOL.as_fields(), "bogus": 1}]})
