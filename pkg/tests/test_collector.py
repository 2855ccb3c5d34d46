from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotprobe.collector import (
    CollectorConfigError,
    Lifecycle,
    LeakError,
    ProviderError,
    RateLimit,
    RateLimiter,
    SimClock,
    SimulatedProvider,
    check_feasible,
    collect_cycle,
    collect_run,
)
from spotprobe.core import BUNDLE_FILES, Kind, Outcome, PoolId
from spotprobe.simulator import PoolConfig, default_pools, run_scenario

POOL = PoolId("m5.large", "us-east-1", "us-east-1a")
QUIET = dict(foreign_mean=0.0, foreign_jitter=0.0, probe_overshoot_prob=0.0, precursor_prob=0.0,
             recovery_lag_mean_minutes=0.0, mean_up_minutes=1e9)


class FixedPort:
    """Provider that accepts the first ``budget`` requests of each call batch."""

    def __init__(self, budget: int, fail_cancel: bool = False):
        self.budget = budget
        self.fail_cancel = fail_cancel
        self.handles = 0
        self.accepted = set()
        self.cancelled = []

    def submit_request(self, pool):
        self.handles += 1
        if len(self.accepted) + len(self.cancelled) < self.budget:
            self.accepted.add(self.handles)
        return self.handles

    def await_lifecycle(self, handle):
        if handle in self.accepted:
            return Lifecycle.PROVISIONING_STARTED
        return Lifecycle.REJECTED_INSUFFICIENT_CAPACITY

    def cancel(self, handle):
        if self.fail_cancel:
            raise ProviderError("throttled")
        self.accepted.discard(handle)
        self.cancelled.append(handle)


def limiter(spec="1000/60"):
    return RateLimiter(RateLimit.parse(spec), SimClock())


def max_in_any_window(times, window):
    """Brute force: every window (t - window, t] anchored at each request."""
    return max((sum(1 for u in times if t - window < u <= t) for t in times), default=0)


def test_full_acceptance():
    port = FixedPort(10)
    res = collect_cycle(port, POOL, 10, limiter(), cycle=1, interval_minutes=3)
    assert res.measurement.successes == 10
    assert [r.outcome for r in res.records] == [Outcome.ACCEPTED] * 10
    assert res.cancels == 10 and len(port.cancelled) == 10


def test_simulated_full_headroom():
    port = SimulatedProvider([PoolConfig(POOL, capacity_up=20, **QUIET)], 3, seed=0)
    port.advance(1)
    res = collect_cycle(port, POOL, 10, RateLimiter(RateLimit(470, 180), port.clock), 1, 3)
    assert res.measurement.successes == 10 and res.cancels == 10


def test_zero_headroom_no_cancels():
    port = SimulatedProvider([PoolConfig(POOL, capacity_up=10, **QUIET)], 3, seed=0)
    port.advance(1)
    res = collect_cycle(port, POOL, 10, RateLimiter(RateLimit(470, 180), port.clock), 1, 3)
    assert res.measurement.successes == 0 and res.cancels == 0
    assert port.tenant_running(POOL) == 10


def test_rate_limited_cycle():
    lim = limiter("5/60")
    res = collect_cycle(FixedPort(10), POOL, 10, lim, cycle=0, interval_minutes=3)
    assert len(res.records) == 10
    assert lim.clock.now - lim.log[0] >= 60
    assert max_in_any_window(lim.log, 60) <= 5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 90), st.integers(1, 30), st.integers(1, 4))
def test_rate_limit_never_exceeded(cap, window, n, cycles):
    lim = limiter(f"{cap}/{window}")
    for c in range(cycles):
        lim.clock.advance_to(c * 30)
        collect_cycle(FixedPort(n), POOL, n, lim, cycle=c, interval_minutes=3)
    assert len(lim.log) == n * cycles
    assert max_in_any_window(lim.log, window) <= cap


def test_count_conservation_and_shape(tmp_path):
    port = SimulatedProvider([PoolConfig(POOL, **{**QUIET, "foreign_mean": 15.0, "foreign_jitter": 4.0})],
                             3, seed=4)
    bundle = collect_run(port, [POOL], 12, 3, 10, RateLimit(470, 180), out=tmp_path)
    assert len(bundle.probes) == 40 and len(bundle.cycles) == 4
    for m in bundle.cycles:
        acc = [r for r in bundle.probes if r.cycle == m.cycle and r.outcome is Outcome.ACCEPTED]
        assert len(acc) == m.successes
    assert (tmp_path / BUNDLE_FILES[Kind.CYCLE]).exists()


def test_collector_matches_run_scenario(tmp_path):
    pools = default_pools(5)
    port = SimulatedProvider(pools, 3, seed=9)
    collect_run(port, [p.pool for p in pools], 720, 3, 10, RateLimit(470, 180), out=tmp_path / "c")
    run_scenario(pools, 720, 3, 10, seed=9).write(tmp_path / "s")
    for kind in (Kind.CYCLE, Kind.RUNNING, Kind.INTERRUPTION):
        name = BUNDLE_FILES[kind]
        assert (tmp_path / "c" / name).read_bytes() == (tmp_path / "s" / name).read_bytes()


def test_feasibility_47_pools():
    check_feasible(47, 10, 3, RateLimit(470, 180))
    with pytest.raises(CollectorConfigError):
        check_feasible(47, 10, 3, RateLimit(469, 180))


def test_cancel_failure_is_a_leak():
    with pytest.raises(LeakError):
        collect_cycle(FixedPort(3, fail_cancel=True), POOL, 10, limiter(), cycle=1, interval_minutes=3)


def test_late_cancel_leaves_a_running_node():
    port = SimulatedProvider([PoolConfig(POOL, capacity_up=20, **QUIET)], 3, seed=0,
                             provisioning_seconds=5)
    port.advance(1)
    h = port.submit_request(POOL)
    assert port.await_lifecycle(h) is Lifecycle.PROVISIONING_STARTED
    port.clock.advance_to(port.clock.now + 10)
    with pytest.raises(ProviderError):
        port.cancel(h)
    assert port.attributed_running(POOL) == 1


def test_zero_residency_every_cycle():
    pools = default_pools(3)
    port = SimulatedProvider(pools, 3, seed=1)
    seen = []

    class Watch:
        def __getattr__(self, name):
            return getattr(port, name)

        def advance(self, t):
            seen.append(port.attributed_running())
            port.advance(t)

    collect_run(Watch(), [p.pool for p in pools], 1440, 3, 10, RateLimit(470, 180), clock=port.clock)
    assert len(seen) == 480 and set(seen) == {0}
    assert port.attributed_running() == 0
