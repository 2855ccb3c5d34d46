"""Discrete-event simulation of shared spot capacity pools.

Each pool alternates between an Up and a Down capacity state with
exponential dwell times.  A tenant keeps ``tenant_target`` nodes running
while capacity allows; foreign (provider-side) demand occupies part of the
pool and is resampled at every cycle boundary.  Entering Down schedules
reclaims for the tenant nodes that no longer fit; they fire after a short
truncated-exponential delay, which is what clusters interruptions in time.

Two transient foreign-load bumps shape what probes see relative to what
the tenant experiences:

* a *precursor* ramp in the last minutes of some Up episodes, so probe
  headroom tightens before running nodes are reclaimed;
* a *recovery* bump that decays after Down -> Up, so probe acceptance
  recovers more slowly than the tenant's running count.

Probes only see headroom beyond the committed (tenant + foreign) load and
never create running nodes.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import (
    BUNDLE_FILES,
    CycleMeasurement,
    InterruptionEvent,
    InvariantError,
    Kind,
    Outcome,
    PoolId,
    ProbeRecord,
    RunningRecord,
    write_trace,
)


class CapacityState(str, enum.Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class PoolConfig:
    pool: PoolId
    capacity_up: int = 30
    capacity_down: int = 0
    mean_up_minutes: float = 180.0
    mean_down_minutes: float = 45.0
    foreign_mean: float = 6.0
    foreign_jitter: float = 2.0
    reclaim_delay_mean_s: float = 30.0
    reclaim_delay_cap_s: float = 180.0
    probe_overshoot_prob: float = 0.005
    tenant_target: int = 10
    # transient foreign-load bumps (see module docstring)
    precursor_prob: float = 0.85
    precursor_min_minutes: float = 6.0
    precursor_max_minutes: float = 30.0
    precursor_load: float = 14.0
    recovery_lag_mean_minutes: float = 12.0
    recovery_load: float = 14.0

    def validate(self) -> None:
        if not self.capacity_down < self.tenant_target <= self.capacity_up:
            raise InvariantError(
                f"{self.pool.key}: need capacity_down < tenant_target <= capacity_up, got "
                f"{self.capacity_down} / {self.tenant_target} / {self.capacity_up}"
            )
        if self.capacity_down < 0:
            raise InvariantError(f"{self.pool.key}: capacity_down must be >= 0")
        if self.mean_up_minutes <= 0 or self.mean_down_minutes <= 0:
            raise InvariantError(f"{self.pool.key}: dwell means must be positive")
        if self.foreign_mean < 0 or self.foreign_jitter < 0:
            raise InvariantError(f"{self.pool.key}: foreign load parameters must be >= 0")
        if self.reclaim_delay_mean_s <= 0:
            raise InvariantError(f"{self.pool.key}: reclaim_delay_mean_s must be > 0")
        if self.reclaim_delay_cap_s < self.reclaim_delay_mean_s:
            raise InvariantError(f"{self.pool.key}: reclaim_delay_cap_s < reclaim_delay_mean_s")
        if not 0.0 <= self.probe_overshoot_prob <= 1.0:
            raise InvariantError(f"{self.pool.key}: probe_overshoot_prob outside [0, 1]")
        if not 0.0 <= self.precursor_prob <= 1.0:
            raise InvariantError(f"{self.pool.key}: precursor_prob outside [0, 1]")
        if not 0 < self.precursor_min_minutes <= self.precursor_max_minutes:
            raise InvariantError(f"{self.pool.key}: bad precursor window")
        if self.precursor_load < 0 or self.recovery_load < 0 or self.recovery_lag_mean_minutes < 0:
            raise InvariantError(f"{self.pool.key}: load bumps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pool"] = self.pool.as_fields()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoolConfig":
        """Pool identity is either a nested ``pool`` object or flat id fields."""
        d = dict(d)
        if "pool" not in d:
            d["pool"] = {k: d.pop(k) for k in ("instance_type", "region", "zone") if k in d}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pool config keys: {sorted(unknown)}")
        d["pool"] = PoolId.from_fields(d["pool"])
        return cls(**d)


@dataclass
class PoolState:
    state: CapacityState
    state_expiry: int
    capacity: int
    foreign: int = 0
    running_nodes: set = field(default_factory=set)
    pending_reclaims: dict = field(default_factory=dict)  # node_id -> fire time
    up_since: int = 0
    precursor_start: int | None = None
    precursor_load: float = 0.0
    recovery_until: int = 0
    recovery_load: float = 0.0

    @property
    def running(self) -> int:
        return len(self.running_nodes)

    @property
    def headroom(self) -> int:
        return self.capacity - self.running - self.foreign


def pool_rng(seed: int, pool: PoolId) -> np.random.Generator:
    """Per-pool generator so results do not depend on pool iteration order."""
    digest = hashlib.sha256(f"{pool.instance_type}|{pool.region}|{pool.zone}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")]))


_TOGGLE, _RECLAIM = 0, 1


class PoolSimulator:
    """One pool's state machine; advance it with :meth:`step` at each cycle boundary."""

    def __init__(self, config: PoolConfig, interval_minutes: int, seed: int):
        config.validate()
        self.config = config
        self.interval_s = int(interval_minutes * 60)
        self.rng = pool_rng(seed, config.pool)
        self.now = 0
        self._events: list = []
        self._seq = 0
        self._node_counter = 0
        self.state = PoolState(CapacityState.UP, 0, config.capacity_up)
        self._enter_up(0, initial=True)
        for _ in range(config.tenant_target):
            self.state.running_nodes.add(self._new_node())

    # -- internals -------------------------------------------------------

    def _push(self, when: int, kind: int, payload=None) -> None:
        heapq.heappush(self._events, (when, self._seq, kind, payload))
        self._seq += 1

    def _new_node(self) -> str:
        self._node_counter += 1
        p = self.config.pool
        return f"{p.instance_type}.{p.zone}.n{self._node_counter:05d}"

    def _dwell(self, mean_minutes: float) -> int:
        return max(1, int(round(self.rng.exponential(mean_minutes * 60.0))))

    def _reclaim_delay(self) -> int:
        cfg = self.config
        while True:
            x = self.rng.exponential(cfg.reclaim_delay_mean_s)
            if x <= cfg.reclaim_delay_cap_s:
                return max(1, min(int(cfg.reclaim_delay_cap_s), math.ceil(x)))

    def _enter_up(self, when: int, initial: bool = False) -> None:
        cfg, st = self.config, self.state
        st.state = CapacityState.UP
        st.capacity = cfg.capacity_up
        st.up_since = when
        st.state_expiry = when + self._dwell(cfg.mean_up_minutes)
        # capacity is back: outstanding reclaims are no longer needed
        st.pending_reclaims.clear()
        if self.rng.random() < cfg.precursor_prob:
            lead = self.rng.uniform(cfg.precursor_min_minutes, cfg.precursor_max_minutes) * 60.0
            st.precursor_start = max(when, st.state_expiry - int(round(lead)))
            st.precursor_load = cfg.precursor_load * self.rng.uniform(0.5, 1.5)
        else:
            st.precursor_start = None
            st.precursor_load = 0.0
        if initial or cfg.recovery_lag_mean_minutes == 0:
            st.recovery_until = when
            st.recovery_load = 0.0
        else:
            st.recovery_until = when + self._dwell(cfg.recovery_lag_mean_minutes)
            st.recovery_load = cfg.recovery_load * self.rng.uniform(0.5, 1.5)
        self._push(st.state_expiry, _TOGGLE)

    def _enter_down(self, when: int) -> None:
        cfg, st = self.config, self.state
        st.state = CapacityState.DOWN
        st.capacity = cfg.capacity_down
        st.state_expiry = when + self._dwell(cfg.mean_down_minutes)
        st.foreign = min(st.foreign, st.capacity)
        keep = max(0, st.capacity - st.foreign)
        excess = st.running - keep
        if excess > 0:
            nodes = sorted(st.running_nodes)
            chosen = self.rng.choice(len(nodes), size=excess, replace=False)
            for i in sorted(int(c) for c in chosen):
                fire = when + self._reclaim_delay()
                st.pending_reclaims[nodes[i]] = fire
                self._push(fire, _RECLAIM, nodes[i])
        self._push(st.state_expiry, _TOGGLE)

    def _foreign_mean(self, now: int) -> float:
        st = self.state
        mean = self.config.foreign_mean
        if st.state is CapacityState.UP:
            if st.precursor_start is not None and now >= st.precursor_start:
                span = max(1, st.state_expiry - st.precursor_start)
                mean += st.precursor_load * min(1.0, (now - st.precursor_start) / span)
            if now < st.recovery_until:
                span = max(1, st.recovery_until - st.up_since)
                mean += st.recovery_load * (st.recovery_until - now) / span
        return mean

    # -- public API ------------------------------------------------------

    def step(self, now: int) -> tuple[list[InterruptionEvent], RunningRecord]:
        """Advance to cycle boundary ``now`` (seconds).

        Fires every toggle and reclaim due in ``(previous now, now]``,
        resamples foreign occupancy, lets the tenant re-acquire nodes when
        the pool is Up, and returns the interruptions plus the running
        count observed at the boundary.
        """
        if now <= self.now or now % self.interval_s:
            raise ValueError(f"step must advance by whole cycles, got now={now} after {self.now}")
        cfg, st = self.config, self.state
        emitted: list[InterruptionEvent] = []
        while self._events and self._events[0][0] <= now:
            when, _, kind, payload = heapq.heappop(self._events)
            if kind == _TOGGLE:
                if when != st.state_expiry:
                    continue
                if st.state is CapacityState.UP:
                    self._enter_down(when)
                else:
                    self._enter_up(when)
            else:
                if st.pending_reclaims.get(payload) != when:
                    continue  # canceled by a return to Up
                del st.pending_reclaims[payload]
                st.running_nodes.discard(payload)
                emitted.append(InterruptionEvent(when, cfg.pool, payload))
        self.now = now

        sample = self.rng.normal(self._foreign_mean(now), cfg.foreign_jitter)
        st.foreign = max(0, min(int(round(max(0.0, sample))), st.capacity - st.running))

        if st.state is CapacityState.UP and st.running < cfg.tenant_target:
            grab = min(cfg.tenant_target - st.running, st.headroom)
            for _ in range(max(0, grab)):
                st.running_nodes.add(self._new_node())

        record = RunningRecord(now // self.interval_s, cfg.pool, st.running, cfg.tenant_target)
        return emitted, record

    def probe_budget(self) -> tuple[int, bool]:
        """Headroom visible to probes this cycle and whether one extra is admitted.

        Consumes exactly one random draw; :meth:`probe` and the per-request
        provider port both go through here so they stay in lockstep.
        """
        overshoot = bool(self.rng.random() < self.config.probe_overshoot_prob)
        return max(0, self.state.headroom), overshoot

    def probe(self, n_requests: int) -> int:
        """Number of ``n_requests`` concurrent probes the pool would accept now."""
        if n_requests < 1:
            raise ValueError("n_requests must be >= 1")
        headroom, overshoot = self.probe_budget()
        return min(n_requests, headroom + int(overshoot))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

_TYPES = ["m5.large", "c5.xlarge", "r5.large", "m6i.xlarge", "c6g.2xlarge",
          "r6i.large", "g4dn.xlarge", "t3.xlarge", "m5a.2xlarge", "i3.large"]
_ZONES = [("us-east-1", "us-east-1a"), ("us-west-2", "us-west-2b"),
          ("eu-west-1", "eu-west-1a"), ("ap-northeast-1", "ap-northeast-1c")]


def default_pools(n: int = 20) -> list[PoolConfig]:
    """Reference scenario: ``n`` heterogeneous pools with fixed parameters."""
    gen = np.random.default_rng(20241201)
    pools = []
    for i in range(n):
        itype = _TYPES[i % len(_TYPES)]
        region, zone = _ZONES[(i // len(_TYPES) + i) % len(_ZONES)]
        noisy = i % 7 == 3
        pools.append(PoolConfig(
            pool=PoolId(itype, region, zone),
            capacity_down=int(gen.integers(0, 3)),
            mean_up_minutes=float(round(gen.uniform(120, 260), 1)),
            mean_down_minutes=float(round(gen.uniform(25, 60), 1)),
            foreign_mean=9.0 if noisy else float(round(gen.uniform(3, 7), 1)),
            foreign_jitter=3.0 if noisy else float(round(gen.uniform(1.0, 2.0), 2)),
        ))
    return pools


def load_scenario(path: str | Path) -> list[PoolConfig]:
    """Read a scenario JSON file: ``{"defaults": {...}, "pools": [{...}, ...]}``.

    ``{"default_pools": 20}`` expands to the built-in reference scenario.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return scenario_from_dict(data)


def scenario_from_dict(data) -> list[PoolConfig]:
    if isinstance(data, list):
        data = {"pools": data}
    if "default_pools" in data:
        return default_pools(int(data["default_pools"]))
    defaults = data.get("defaults", {})
    return [PoolConfig.from_dict({**defaults, **p}) for p in data["pools"]]


def scenario_to_dict(configs: list[PoolConfig]) -> dict:
    return {"pools": [c.to_dict() for c in configs]}


@dataclass
class TraceBundle:
    probes: list[ProbeRecord]
    cycles: list[CycleMeasurement]
    running: list[RunningRecord]
    interruptions: list[InterruptionEvent]

    def write(self, out_dir: str | Path) -> dict[Kind, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / name for k, name in BUNDLE_FILES.items()}
        write_trace(self.probes, paths[Kind.PROBE])
        write_trace(self.cycles, paths[Kind.CYCLE])
        write_trace(self.running, paths[Kind.RUNNING])
        write_trace(self.interruptions, paths[Kind.INTERRUPTION])
        return paths


def validate_scenario(configs: list[PoolConfig]) -> None:
    seen = set()
    for cfg in configs:
        cfg.validate()
        if cfg.pool in seen:
            raise InvariantError(f"duplicate pool {cfg.pool.key}")
        seen.add(cfg.pool)


def probe_records(pool: PoolId, cycle: int, ts: int, n: int, accepted: int) -> list[ProbeRecord]:
    return [ProbeRecord(ts, cycle, pool, i, Outcome.ACCEPTED if i < accepted else Outcome.REJECTED)
            for i in range(n)]


def run_scenario(configs: list[PoolConfig], duration_minutes: int, interval_minutes: int,
                 n_probe: int, seed: int) -> TraceBundle:
    """Simulate every pool for ``duration_minutes`` and probe it once per cycle."""
    validate_scenario(configs)
    if interval_minutes <= 0 or duration_minutes % interval_minutes:
        raise InvariantError(f"duration {duration_minutes} not divisible by interval {interval_minutes}")
    if n_probe < 1:
        raise InvariantError("n_probe must be >= 1")
    n_cycles = duration_minutes // interval_minutes
    per_pool = []
    for cfg in configs:
        sim = PoolSimulator(cfg, interval_minutes, seed)
        probes, cycles, running, events = [], [], [], []
        for t in range(1, n_cycles + 1):
            now = t * sim.interval_s
            fired, rec = sim.step(now)
            events.extend(fired)
            running.append(rec)
            s = sim.probe(n_probe)
            cycles.append(CycleMeasurement(t, cfg.pool, s, n_probe, interval_minutes))
            probes.extend(probe_records(cfg.pool, t, now, n_probe, s))
        per_pool.append((probes, cycles, running, events))

    def merged(idx: int, key) -> list:
        out = [r for part in per_pool for r in part[idx]]
        out.sort(key=key)  # stable: ties keep scenario pool order
        return out

    return TraceBundle(
        probes=merged(0, lambda r: r.cycle),
        cycles=merged(1, lambda r: r.cycle),
        running=merged(2, lambda r: r.cycle),
        interruptions=merged(3, lambda r: r.ts),
    )
