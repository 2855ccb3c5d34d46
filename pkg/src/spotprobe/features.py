"""Incremental availability features and horizon labels.

Per pool and per cycle ``t`` (1-based) with ``N`` concurrent probes and
``S_t`` acceptances:

* ``sr``  = S_t / N
* ``ur``  = unfulfilled requests over the last ``w = W / dt`` cycles divided
  by ``w * N`` (``t * N`` while fewer than ``w`` cycles exist), read off a
  cumulative array ``P`` in constant time
* ``cut`` = minutes of the current unbroken shortfall streak (0 at t = 1 and
  whenever S_t = N)

Labels come from the tenant's running counts, not from the probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .core import (
    CycleMeasurement,
    FeatureVector,
    Kind,
    PoolId,
    RunningRecord,
    group_by_pool,
    read_trace,
    write_trace,
)


class FeatureError(ValueError):
    pass


@dataclass
class FeatureState:
    pool: PoolId
    interval_minutes: int
    window_minutes: int
    requested: int | None = None
    cumulative_unfulfilled: list = field(default_factory=lambda: [0])
    last_cut: int = 0

    def __post_init__(self):
        if self.interval_minutes <= 0:
            raise FeatureError(f"interval must be positive, got {self.interval_minutes}")
        if self.window_minutes <= 0 or self.window_minutes % self.interval_minutes:
            raise FeatureError(
                f"window {self.window_minutes} min is not a positive multiple of "
                f"interval {self.interval_minutes} min"
            )

    @property
    def window_cycles(self) -> int:
        return self.window_minutes // self.interval_minutes

    @property
    def cycle(self) -> int:
        """Index of the last consumed cycle (0 before the first update)."""
        return len(self.cumulative_unfulfilled) - 1


def update(state: FeatureState, m: CycleMeasurement) -> FeatureVector:
    """Consume the next cycle measurement and return its features.

    Mutates ``state`` in place.  Gaps, interval changes and a changing
    request count are hard errors since the window arithmetic assumes a
    uniform stream.
    """
    P = state.cumulative_unfulfilled
    t = len(P)
    if m.cycle != t:
        raise FeatureError(f"{state.pool.key}: expected cycle {t}, got {m.cycle}")
    if m.interval_minutes != state.interval_minutes:
        raise FeatureError(
            f"{state.pool.key} cycle {m.cycle}: interval {m.interval_minutes} != {state.interval_minutes}"
        )
    if state.requested is None:
        state.requested = m.requested
    elif m.requested != state.requested:
        raise FeatureError(
            f"{state.pool.key} cycle {m.cycle}: requested {m.requested} != {state.requested}"
        )
    n = m.requested
    w = state.window_cycles

    sr = Fraction(m.successes, n)
    P.append(P[t - 1] + (n - m.successes))
    if t >= w:
        ur = Fraction(P[t] - P[t - w], w * n)
    else:
        ur = Fraction(P[t] - P[0], t * n)
    if t == 1 or m.successes == n:
        cut = 0
    else:
        cut = state.last_cut + state.interval_minutes
    state.last_cut = cut
    return FeatureVector(t, m.pool, state.window_minutes, sr, ur, cut)


def label(running: Sequence[RunningRecord], t: int, horizon_minutes: int,
          interval_minutes: int, target: int) -> int | None:
    """1 (Available) iff the pool stays at ``target`` nodes over the horizon.

    ``running`` is the pool's record sequence indexed so that
    ``running[k]`` is cycle ``k + 1``.  For a zero horizon the current
    cycle decides; otherwise cycles ``t+1 .. t+h/dt`` must all be full.
    Returns None when the horizon runs past the end of the trace.
    """
    if horizon_minutes % interval_minutes:
        raise FeatureError(f"horizon {horizon_minutes} not divisible by interval {interval_minutes}")
    k = horizon_minutes // interval_minutes
    if k == 0:
        return int(running[t - 1].running == target)
    if t + k > len(running):
        return None
    return int(all(r.running == target for r in running[t:t + k]))


def horizon_labels(running: Sequence[RunningRecord], horizon_minutes: int,
                   interval_minutes: int) -> list[int | None]:
    """Labels for every cycle in one backward pass (same rule as :func:`label`)."""
    if horizon_minutes % interval_minutes:
        raise FeatureError(f"horizon {horizon_minutes} not divisible by interval {interval_minutes}")
    k = horizon_minutes // interval_minutes
    full = [int(r.running == r.target) for r in running]
    T = len(full)
    if k == 0:
        return full
    # next_short[i]: first index >= i with a shortfall (T if none)
    next_short = [T] * (T + 1)
    for i in range(T - 1, -1, -1):
        next_short[i] = i if not full[i] else next_short[i + 1]
    out: list[int | None] = []
    for t in range(1, T + 1):
        if t + k > T:
            out.append(None)
        else:
            out.append(int(next_short[t] >= t + k))
    return out


def _check_contiguous(pool: PoolId, recs: Sequence, what: str) -> None:
    for i, r in enumerate(recs, start=1):
        if r.cycle != i:
            raise FeatureError(f"{pool.key}: {what} trace has a gap or offset at position {i} (cycle {r.cycle})")


def featurize_pool(cycles: Sequence[CycleMeasurement], running: Sequence[RunningRecord] | None,
                   window_minutes: int, horizons: Iterable[int]) -> list[FeatureVector]:
    if not cycles:
        return []
    pool = cycles[0].pool
    dt = cycles[0].interval_minutes
    _check_contiguous(pool, cycles, "cycle")
    state = FeatureState(pool, dt, window_minutes)
    vectors = [update(state, m) for m in cycles]
    horizons = sorted(set(horizons))
    if running is not None and horizons:
        _check_contiguous(pool, running, "running")
        if len(running) != len(cycles):
            raise FeatureError(f"{pool.key}: {len(cycles)} cycle records vs {len(running)} running records")
        per_h = {h: horizon_labels(running, h, dt) for h in horizons}
        for i, v in enumerate(vectors):
            v.labels.update({h: per_h[h][i] for h in horizons})
    return vectors


def featurize(cycles: Sequence[CycleMeasurement], running: Sequence[RunningRecord] | None,
              window_minutes: int, horizons: Iterable[int] = ()) -> list[FeatureVector]:
    """Features for every pool, pools in order of first appearance."""
    horizons = list(horizons)
    by_pool = group_by_pool(cycles)
    run_by_pool = group_by_pool(running) if running is not None else {}
    errors = []
    out: list[FeatureVector] = []
    for pool, recs in by_pool.items():
        try:
            out.extend(featurize_pool(recs, run_by_pool.get(pool, [] if running is not None else None),
                                      window_minutes, horizons))
        except (FeatureError, ValueError) as exc:
            errors.append(str(exc))
    if errors:
        raise FeatureError("; ".join(errors))
    return out


def featurize_trace(cycles_path: str | Path, running_path: str | Path | None, window_minutes: int,
                    horizons: Iterable[int], out_path: str | Path | None = None) -> list[FeatureVector]:
    cycles = read_trace(cycles_path, Kind.CYCLE)
    running = read_trace(running_path, Kind.RUNNING) if running_path is not None else None
    vectors = featurize(cycles, running, window_minutes, horizons)
    if out_path is not None:
        write_trace(vectors, out_path)
    return vectors


def running_as_cycles(running: Sequence[RunningRecord], interval_minutes: int) -> list[CycleMeasurement]:
    """Recast running counts as probe outcomes (S := R, N := target)."""
    return [CycleMeasurement(r.cycle, r.pool, r.running, r.target, interval_minutes) for r in running]
