"""Cancel-on-provisioning probe collection against a provider port.

Each cycle the collector submits ``n`` spot requests per pool, waits for
the lifecycle outcome of each, and cancels every request that reached
provisioning before it can start running.  Requests go out in concurrent
batches as large as the account-wide rate limit allows; the clock is
simulated, so throttling advances simulated time instead of sleeping.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

from .core import CycleMeasurement, Outcome, PoolId, ProbeRecord, RunningRecord
from .simulator import PoolConfig, PoolSimulator, TraceBundle, validate_scenario


class Lifecycle(str, enum.Enum):
    PROVISIONING_STARTED = "provisioning_started"
    REJECTED_INSUFFICIENT_CAPACITY = "rejected_insufficient_capacity"


class ProviderError(RuntimeError):
    """A provider API call failed."""


class LeakError(RuntimeError):
    """An accepted probe could not be canceled and may reach the running state."""


class CollectorConfigError(ValueError):
    pass


@runtime_checkable
class ProviderPort(Protocol):
    def submit_request(self, pool: PoolId): ...

    def await_lifecycle(self, handle) -> Lifecycle: ...

    def cancel(self, handle) -> None: ...


class SimClock:
    def __init__(self, now: float = 0.0):
        self.now = float(now)

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.now = float(t)


@dataclass(frozen=True)
class RateLimit:
    max_requests_per_window: int
    window_seconds: int

    def __post_init__(self):
        if self.max_requests_per_window < 1 or self.window_seconds < 1:
            raise CollectorConfigError("rate limit values must be >= 1")

    def capacity(self, span_seconds: float) -> int:
        """Requests a fresh limiter can issue within ``span_seconds``."""
        return self.max_requests_per_window * max(1, math.ceil(span_seconds / self.window_seconds))

    @classmethod
    def parse(cls, text: str) -> "RateLimit":
        """``"470/180"`` -> 470 requests per 180 s window."""
        count, _, window = text.partition("/")
        return cls(int(count), int(window or 60))


class RateLimiter:
    """Sliding-window limiter; a request at ``t`` counts against ``(t - window, t]``."""

    def __init__(self, limit: RateLimit, clock: SimClock):
        self.limit = limit
        self.clock = clock
        self._recent: deque = deque()
        self.log: list[float] = []

    def _expire(self) -> None:
        edge = self.clock.now - self.limit.window_seconds
        while self._recent and self._recent[0] <= edge:
            self._recent.popleft()

    def quota(self) -> int:
        """Block (in simulated time) until at least one slot is free; return free slots."""
        self._expire()
        if len(self._recent) >= self.limit.max_requests_per_window:
            self.clock.advance_to(self._recent[0] + self.limit.window_seconds)
            self._expire()
        return self.limit.max_requests_per_window - len(self._recent)

    def record(self) -> None:
        self._recent.append(self.clock.now)
        self.log.append(self.clock.now)


@dataclass
class _Request:
    handle: int
    pool: PoolId
    accepted: bool
    deadline: float
    canceled: bool = False


class SimulatedProvider:
    """Provider port backed by :class:`PoolSimulator` instances.

    The acceptance budget of a pool is fixed at the first request of each
    cycle; canceled slots are only returned at the next cycle boundary, so
    throttled batches within one cycle see the same snapshot.  An accepted
    request that is not canceled within ``provisioning_seconds`` turns into
    a running node attributed to the collector.
    """

    def __init__(self, configs: Sequence[PoolConfig], interval_minutes: int, seed: int,
                 clock: SimClock | None = None, provisioning_seconds: float = 60.0):
        validate_scenario(list(configs))
        self.clock = clock or SimClock()
        self.interval_minutes = interval_minutes
        self.provisioning_seconds = provisioning_seconds
        self.sims = {c.pool: PoolSimulator(c, interval_minutes, seed) for c in configs}
        self.cycle = 0
        self.running_records: list[RunningRecord] = []
        self.interruptions: list = []
        self._budget: dict = {}
        self._requests: dict[int, _Request] = {}
        self._next_handle = 0
        self.collector_nodes: dict[PoolId, int] = {p: 0 for p in self.sims}
        self.cancels = 0

    def advance(self, cycle: int) -> None:
        """Move every pool to the boundary of ``cycle``."""
        self._settle()
        while self.cycle < cycle:
            self.cycle += 1
            now = self.cycle * self.interval_minutes * 60
            for sim in self.sims.values():
                fired, rec = sim.step(now)
                self.interruptions.extend(fired)
                self.running_records.append(rec)
        self._budget.clear()
        self.clock.advance_to(self.cycle * self.interval_minutes * 60)

    def submit_request(self, pool: PoolId) -> int:
        if pool not in self.sims:
            raise ProviderError(f"unknown pool {pool.key}")
        if pool not in self._budget:
            headroom, overshoot = self.sims[pool].probe_budget()
            self._budget[pool] = [headroom + int(overshoot), 0]
        budget = self._budget[pool]
        accepted = budget[1] < budget[0]
        if accepted:
            budget[1] += 1
        self._next_handle += 1
        self._requests[self._next_handle] = _Request(
            self._next_handle, pool, accepted, self.clock.now + self.provisioning_seconds)
        return self._next_handle

    def await_lifecycle(self, handle: int) -> Lifecycle:
        req = self._requests[handle]
        if not req.accepted:
            del self._requests[handle]
            return Lifecycle.REJECTED_INSUFFICIENT_CAPACITY
        return Lifecycle.PROVISIONING_STARTED

    def cancel(self, handle: int) -> None:
        req = self._requests.pop(handle, None)
        if req is None or not req.accepted:
            raise ProviderError(f"cannot cancel request {handle}: not provisioning")
        if self.clock.now >= req.deadline:
            self._requests[handle] = req
            raise ProviderError(f"request {handle} already reached running")
        self.cancels += 1

    def _settle(self) -> None:
        """Promote provisioning requests whose deadline passed to running nodes."""
        for h, req in list(self._requests.items()):
            if req.accepted and self.clock.now >= req.deadline:
                self.collector_nodes[req.pool] += 1
                del self._requests[h]

    def attributed_running(self, pool: PoolId | None = None) -> int:
        """Running nodes (or still-provisioning requests) owned by the collector."""
        self._settle()
        pending = sum(1 for r in self._requests.values()
                      if r.accepted and (pool is None or r.pool == pool))
        nodes = sum(self.collector_nodes.values()) if pool is None else self.collector_nodes[pool]
        return nodes + pending

    def tenant_running(self, pool: PoolId) -> int:
        return self.sims[pool].state.running


@dataclass
class CycleResult:
    measurement: CycleMeasurement
    records: list[ProbeRecord]
    cancels: int
    request_times: list = field(default_factory=list)


def collect_cycle(port: ProviderPort, pool: PoolId, n: int, limiter: RateLimiter, cycle: int,
                  interval_minutes: int) -> CycleResult:
    """Probe ``pool`` with ``n`` requests and cancel every accepted one."""
    if n < 1:
        raise CollectorConfigError("n must be >= 1")
    ts = cycle * interval_minutes * 60
    outcomes: list[tuple[Outcome, str | None]] = [(Outcome.REJECTED, None)] * n
    cancels = 0
    times = []
    i = 0
    while i < n:
        batch = min(limiter.quota(), n - i)
        handles = []
        for k in range(i, i + batch):
            limiter.record()
            times.append(limiter.clock.now)
            try:
                handles.append((k, port.submit_request(pool)))
            except ProviderError as exc:
                outcomes[k] = (Outcome.REJECTED, f"submit failed: {exc}")
        for k, handle in handles:
            try:
                status = port.await_lifecycle(handle)
            except ProviderError as exc:
                outcomes[k] = (Outcome.REJECTED, f"lifecycle unknown: {exc}")
                status = Lifecycle.PROVISIONING_STARTED
            if status is Lifecycle.PROVISIONING_STARTED:
                try:
                    port.cancel(handle)
                except ProviderError as exc:
                    raise LeakError(f"{pool.key} cycle {cycle} request {k}: cancel failed: {exc}") from exc
                cancels += 1
                if outcomes[k][1] is None:
                    outcomes[k] = (Outcome.ACCEPTED, None)
        i += batch
    records = [ProbeRecord(ts, cycle, pool, k, o, err) for k, (o, err) in enumerate(outcomes)]
    s = sum(1 for r in records if r.outcome is Outcome.ACCEPTED)
    return CycleResult(CycleMeasurement(cycle, pool, s, n, interval_minutes), records, cancels, times)


def check_feasible(n_pools: int, n: int, interval_minutes: int, limit: RateLimit) -> None:
    need = n_pools * n
    have = limit.capacity(interval_minutes * 60)
    if need > have:
        raise CollectorConfigError(
            f"{n_pools} pools x {n} requests = {need} per {interval_minutes}-min cycle exceeds "
            f"the rate limit capacity of {have} ({limit.max_requests_per_window}/{limit.window_seconds}s)"
        )


def collect_run(port: ProviderPort, pools: Sequence[PoolId], duration_minutes: int,
                interval_minutes: int, n: int, limit: RateLimit, out: str | Path | None = None,
                clock: SimClock | None = None) -> TraceBundle:
    """Run the collection loop for ``duration_minutes`` on a simulated clock.

    When the port is a :class:`SimulatedProvider`, the returned bundle also
    carries its running records and interruptions, and zero collector
    residency is asserted after every cycle.
    """
    if interval_minutes <= 0 or duration_minutes % interval_minutes:
        raise CollectorConfigError(f"duration {duration_minutes} not divisible by interval {interval_minutes}")
    check_feasible(len(pools), n, interval_minutes, limit)
    clock = clock or getattr(port, "clock", None) or SimClock()
    limiter = RateLimiter(limit, clock)
    probes, cycles = [], []
    for t in range(1, duration_minutes // interval_minutes + 1):
        if hasattr(port, "advance"):
            port.advance(t)
        clock.advance_to(t * interval_minutes * 60)
        for pool in pools:
            res = collect_cycle(port, pool, n, limiter, t, interval_minutes)
            probes.extend(res.records)
            cycles.append(res.measurement)
        if hasattr(port, "attributed_running") and port.attributed_running() != 0:
            raise LeakError(f"cycle {t}: provider attributes {port.attributed_running()} nodes to the collector")
    bundle = TraceBundle(probes, cycles, list(getattr(port, "running_records", [])),
                         sorted(getattr(port, "interruptions", []), key=lambda e: e.ts))
    if out is not None:
        bundle.write(out)
    return bundle
