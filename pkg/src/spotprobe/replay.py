"""Trace-driven replay of a sequential query workload on one pool.

A query only makes progress while the pool is Available (every target
node running).  Availability is piecewise constant per collection cycle;
when a cycle starts Unavailable, the running query loses all of its
progress and goes back to the head of the queue.

Strategies:

* ``ar``      launch the next query as soon as the previous one ends;
* ``sjf``     same, with the queue sorted by ascending duration;
* ``predict`` consult a classifier at every cycle boundary; an Unavailable
              forecast blocks new launches for the model's horizon.  A query
              already running is never stopped by a forecast.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import BUNDLE_FILES, FeatureVector, Kind, PoolId, RunningRecord, group_by_pool, read_trace
from .features import featurize_pool
from .predictor import Model, feature_row

log = logging.getLogger(__name__)

MIN_DURATION_S = 0.1


class ReplayError(ValueError):
    pass


class Strategy(str, enum.Enum):
    ALWAYS_RUN = "ar"
    SJF = "sjf"
    PREDICT_AR = "predict"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        aliases = {"alwaysrun": "ar", "always_run": "ar", "predictar": "predict",
                   "predict-ar": "predict", "predict_ar": "predict"}
        t = text.strip().lower()
        return cls(aliases.get(t, t))


@dataclass(frozen=True)
class Query:
    id: int
    duration_seconds: float

    def __post_init__(self):
        if not self.duration_seconds > 0:
            raise ReplayError(f"query {self.id}: duration must be > 0")


def gen_workload(count: int = 99, total_minutes: float = 206.0, min_s: float = 0.5,
                 max_s: float = 661.5, seed: int = 0, max_tries: int = 100) -> list[Query]:
    """Log-uniform durations in [min_s, max_s], rescaled to sum to ``total_minutes``."""
    if count < 1:
        raise ReplayError("count must be >= 1")
    if not 0 < min_s < max_s:
        raise ReplayError("need 0 < min_s < max_s")
    total = total_minutes * 60.0
    if count == 1:
        return [Query(0, total)]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        d = np.exp(rng.uniform(math.log(min_s), math.log(max_s), size=count))
        d *= total / d.sum()
        d[-1] = total - d[:-1].sum()
        if d.min() >= MIN_DURATION_S:
            return [Query(i, float(x)) for i, x in enumerate(d)]
    raise ReplayError(f"could not draw {count} durations >= {MIN_DURATION_S}s summing to {total}s")


def load_queries_csv(path: str | Path) -> list[Query]:
    """CSV with a ``duration_seconds`` column (optional ``id``), or one bare number per line."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [r for r in csv.reader(text) if r and r[0].strip()]
    if not rows:
        return []
    header = [c.strip().lower() for c in rows[0]]
    if "duration_seconds" in header:
        di = header.index("duration_seconds")
        ii = header.index("id") if "id" in header else None
        return [Query(int(r[ii]) if ii is not None else k, float(r[di]))
                for k, r in enumerate(rows[1:])]
    return [Query(k, float(r[0])) for k, r in enumerate(rows)]


@dataclass(frozen=True)
class ReplayOutcome:
    strategy: str
    lost_seconds: float
    idle_seconds: float
    makespan_seconds: float
    completed: int
    useful_seconds: float = 0.0
    blocked_seconds: float = 0.0
    unfinished_seconds: float = 0.0
    interruptions: int = 0
    deferrals: int = 0
    incomplete: bool = False


def availability(running: Sequence[RunningRecord]) -> list[bool]:
    return [r.running == r.target for r in running]


def order_queue(queries: Sequence[Query], strategy: Strategy) -> list[Query]:
    if strategy is Strategy.SJF:
        return sorted(queries, key=lambda q: (q.duration_seconds, q.id))
    return list(queries)


def replay(available: Sequence[bool], queries: Sequence[Query], strategy: Strategy | str,
           model: Model | None = None, horizon_minutes: int | None = None,
           interval_minutes: int = 3, features: Sequence[FeatureVector] | None = None) -> ReplayOutcome:
    """Run ``queries`` in order over the availability trace.

    Cycle ``c`` (0-based) covers ``[c*dt, (c+1)*dt)``.  ``features[c]`` is
    the feature vector observed at the start of that cycle.
    """
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    dt = interval_minutes * 60
    if strategy is Strategy.PREDICT_AR:
        if model is None:
            raise ReplayError("predict strategy needs a model")
        if features is None or len(features) < len(available):
            raise ReplayError("predict strategy needs one feature vector per cycle")
        h = model.spec.horizon_minutes if horizon_minutes is None else horizon_minutes
        if h <= 0 or h % interval_minutes:
            raise ReplayError(f"horizon {h} must be a positive multiple of {interval_minutes}")
        fs = model.spec.feature_set
        X = np.array([feature_row(v, fs) for v in features[:len(available)]], dtype=float)
        forecast = model.predict(X) if len(X) else np.array([], dtype=int)
        defer_span = h * 60

    queue = deque(order_queue(queries, strategy))
    lost = idle = blocked = useful = 0.0
    completed = interruptions = deferrals = 0
    running: tuple[Query, float] | None = None
    defer_until = 0.0
    last_done = 0.0
    T = len(available)
    for c in range(T):
        start, end = c * dt, (c + 1) * dt
        if running is not None and not available[c]:
            q, began = running
            lost += start - began
            queue.appendleft(q)
            running = None
            interruptions += 1
        if running is None and not queue:
            break
        if strategy is Strategy.PREDICT_AR and start >= defer_until and forecast[c] == 0:
            defer_until = start + defer_span
            deferrals += 1
        if not available[c]:
            blocked += dt
            continue
        now = float(start)
        while now < end:
            if running is None:
                if not queue:
                    break
                if now < defer_until:
                    idle += end - now
                    now = end
                    break
                running = (queue.popleft(), now)
            q, began = running
            finish = began + q.duration_seconds
            if finish <= end:
                useful += q.duration_seconds
                completed += 1
                last_done = now = finish
                running = None
            else:
                now = end

    done = running is None and not queue
    unfinished = 0.0
    if done:
        makespan = last_done
    else:
        makespan = float(T * dt)
        if running is not None:
            unfinished = makespan - running[1]
    return ReplayOutcome(strategy.value, lost, idle, makespan, completed, useful, blocked,
                         unfinished, interruptions, deferrals, not done)


# ---------------------------------------------------------------------------
# Experiments over a bundle
# ---------------------------------------------------------------------------

EXPERIMENT_COLUMNS = ["instance_type", "region", "zone", "strategy", "horizon_min", "permutation",
                      "lost_seconds", "idle_seconds", "makespan_seconds", "completed",
                      "interruptions", "deferrals", "incomplete"]


@dataclass(frozen=True)
class ExperimentRow:
    pool: PoolId
    strategy: str
    horizon_min: int
    permutation: str  # run index, or "mean"
    lost_seconds: float
    idle_seconds: float
    makespan_seconds: float
    completed: float
    interruptions: float
    deferrals: float
    incomplete: float

    def as_list(self) -> list:
        vals = [self.pool.instance_type, self.pool.region, self.pool.zone, self.strategy,
                self.horizon_min, self.permutation]
        vals += [round(float(getattr(self, c)), 6) for c in EXPERIMENT_COLUMNS[6:]]
        return vals


def run_experiment(bundle_dir: str | Path, strategies: Sequence[Strategy | str], horizons: Sequence[int],
                   permutations: int = 5, seed: int = 0, models: dict | None = None,
                   queries: Sequence[Query] | None = None, pools: Sequence[PoolId] | None = None,
                   out: str | Path | None = None) -> list[ExperimentRow]:
    """Replay every (pool, strategy, horizon) over ``permutations`` shuffled queues.

    ``models`` maps horizon minutes to a trained model.  Evaluation pools
    default to the test pools recorded in the models, else every pool.
    """
    bundle = Path(bundle_dir)
    strategies = [Strategy.parse(s) if isinstance(s, str) else s for s in strategies]
    models = models or {}
    queries = list(queries) if queries is not None else gen_workload(seed=seed)
    running = group_by_pool(read_trace(bundle / BUNDLE_FILES[Kind.RUNNING], Kind.RUNNING))
    cycles = group_by_pool(read_trace(bundle / BUNDLE_FILES[Kind.CYCLE], Kind.CYCLE))
    if pools is None:
        recorded = sorted({p for m in models.values() for p in m.test_pools})
        pools = recorded or sorted(running)
    missing = [p for p in pools if p not in running or p not in cycles]
    if missing:
        log.warning("no traces for %s; skipped", ", ".join(p.key for p in missing))
    pools = [p for p in pools if p not in missing]

    if Strategy.PREDICT_AR in strategies:
        absent = [h for h in horizons if h not in models]
        if absent:
            raise ReplayError(f"predict strategy needs models for horizons {absent}")

    rng = np.random.default_rng(seed)
    orders = [rng.permutation(len(queries)) for _ in range(permutations)]

    rows: list[ExperimentRow] = []
    for pool in pools:
        recs = running[pool]
        avail = availability(recs)
        dt = cycles[pool][0].interval_minutes
        feats_by_window: dict[int, list[FeatureVector]] = {}
        cells = []
        for s in strategies:
            if s is Strategy.PREDICT_AR:
                cells += [(s, h) for h in horizons]
            else:
                cells.append((s, 0))
        for s, h in cells:
            model = models.get(h) if s is Strategy.PREDICT_AR else None
            feats = None
            if model is not None:
                W = model.spec.window_minutes
                if W not in feats_by_window:
                    feats_by_window[W] = featurize_pool(cycles[pool], None, W, ())
                feats = feats_by_window[W]
            runs = []
            for k, order in enumerate(orders):
                qs = [queries[i] for i in order]
                res = replay(avail, qs, s, model, h if model else None, dt, feats)
                runs.append(res)
                rows.append(ExperimentRow(pool, s.value, h, str(k), res.lost_seconds, res.idle_seconds,
                                          res.makespan_seconds, res.completed, res.interruptions,
                                          res.deferrals, int(res.incomplete)))
            mean = {f: float(np.mean([getattr(r, f) for r in runs])) for f in
                    ("lost_seconds", "idle_seconds", "makespan_seconds", "completed", "interruptions",
                     "deferrals")}
            rows.append(ExperimentRow(pool, s.value, h, "mean", mean["lost_seconds"], mean["idle_seconds"],
                                      mean["makespan_seconds"], mean["completed"], mean["interruptions"],
                                      mean["deferrals"], float(np.mean([r.incomplete for r in runs]))))
    if out is not None:
        write_experiment_csv(rows, out)
    return rows


def write_experiment_csv(rows: Sequence[ExperimentRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPERIMENT_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())


def summarize(rows: Sequence[ExperimentRow]) -> dict[tuple[str, int], dict[str, float]]:
    """Totals over pools of the per-permutation means, keyed by (strategy, horizon)."""
    out: dict[tuple[str, int], dict[str, float]] = {}
    for r in rows:
        if r.permutation != "mean":
            continue
        agg = out.setdefault((r.strategy, r.horizon_min), {"lost_seconds": 0.0, "idle_seconds": 0.0,
                                                            "completed": 0.0, "pools": 0})
        agg["lost_seconds"] += r.lost_seconds
        agg["idle_seconds"] += r.idle_seconds
        agg["completed"] += r.completed
        agg["pools"] += 1
    return out
