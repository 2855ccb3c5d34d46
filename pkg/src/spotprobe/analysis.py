"""Fidelity and measurement analyses over trace files.

* :func:`compare` tallies probe acceptances against running counts.
* :func:`co_interrupt_cdf` computes nearest-other-node interruption gaps.
* :func:`feature_fidelity` correlates probe-derived and running-derived features.
* :func:`cost_model` prices continuous monitoring, periodic launch probing
  and cancel-before-running probing.
"""

from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    CycleMeasurement,
    FeatureVector,
    InterruptionEvent,
    Kind,
    RunningRecord,
    group_by_pool,
    read_trace,
)

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Probe vs running comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompareCounts:
    actual_gt: int
    equal: int
    actual_lt: int

    @property
    def total(self) -> int:
        return self.actual_gt + self.equal + self.actual_lt

    def pct(self, name: str) -> float:
        return round(100.0 * getattr(self, name) / self.total, 2) if self.total else 0.0

    def as_dict(self) -> dict:
        return {
            "actual_gt": self.actual_gt, "equal": self.equal, "actual_lt": self.actual_lt,
            "total": self.total,
            "actual_gt_pct": self.pct("actual_gt"), "equal_pct": self.pct("equal"),
            "actual_lt_pct": self.pct("actual_lt"),
        }


def compare_records(cycles: Sequence[CycleMeasurement], running: Sequence[RunningRecord]) -> CompareCounts:
    s_at = {(c.pool, c.cycle): c.successes for c in cycles}
    r_at = {(r.pool, r.cycle): r.running for r in running}
    missing = sorted(set(s_at) ^ set(r_at), key=lambda k: (k[0], k[1]))
    if missing:
        shown = ", ".join(f"{p.key}#{c}" for p, c in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise AnalysisError(f"misaligned cycles: {shown}{more}")
    gt = eq = lt = 0
    for key, s in s_at.items():
        r = r_at[key]
        if r > s:
            gt += 1
        elif r == s:
            eq += 1
        else:
            lt += 1
    return CompareCounts(gt, eq, lt)


def compare(cycles_path: str | Path, running_path: str | Path) -> CompareCounts:
    return compare_records(read_trace(cycles_path, Kind.CYCLE), read_trace(running_path, Kind.RUNNING))


# ---------------------------------------------------------------------------
# Co-interruption proximity
# ---------------------------------------------------------------------------

@dataclass
class ProximityCDF:
    proximities: list  # sorted seconds, one per qualifying event

    @property
    def empty(self) -> bool:
        return not self.proximities

    def at(self, seconds: float) -> float:
        if self.empty:
            return float("nan")
        return bisect.bisect_right(self.proximities, seconds) / len(self.proximities)

    def points(self, max_seconds: int | None = None) -> list[tuple[int, float]]:
        """CDF sampled at every whole second from 0 to ``max_seconds``."""
        if self.empty:
            return []
        top = int(math.ceil(self.proximities[-1])) if max_seconds is None else max_seconds
        return [(s, self.at(s)) for s in range(0, top + 1)]


def proximities(events: Sequence[InterruptionEvent]) -> list[int]:
    """Per event, the gap to the nearest interruption of another node in its pool."""
    out = []
    for pool, evs in group_by_pool(events).items():
        nodes = {e.node_id for e in evs}
        if len(nodes) < 2:
            continue
        evs = sorted(evs, key=lambda e: (e.ts, e.node_id))
        ts = [e.ts for e in evs]
        for i, e in enumerate(evs):
            best = None
            # walk outwards until another node is found on each side
            for step in (-1, 1):
                j = i + step
                while 0 <= j < len(evs):
                    if evs[j].node_id != e.node_id:
                        gap = abs(ts[j] - e.ts)
                        best = gap if best is None else min(best, gap)
                        break
                    j += step
            if best is not None:
                out.append(best)
    return out


def co_interrupt_cdf_records(events: Sequence[InterruptionEvent]) -> ProximityCDF:
    prox = sorted(proximities(events))
    if not prox:
        log.warning("co_interrupt_cdf: no pool has interruptions of two distinct nodes")
    return ProximityCDF(prox)


def co_interrupt_cdf(events_path: str | Path) -> ProximityCDF:
    return co_interrupt_cdf_records(read_trace(events_path, Kind.INTERRUPTION))


# ---------------------------------------------------------------------------
# Feature fidelity
# ---------------------------------------------------------------------------

def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-pass Pearson correlation; NaN when either series has zero variance."""
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if a.shape != b.shape:
        raise AnalysisError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        return float("nan")
    da = a - a.mean()
    db = b - b.mean()
    sxx = float(np.dot(da, da))
    syy = float(np.dot(db, db))
    if sxx == 0.0 or syy == 0.0:
        return float("nan")
    r = float(np.dot(da, db)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class FidelityResult:
    per_pool: dict  # feature -> {PoolId: r}
    excluded: dict  # feature -> [PoolId] with zero variance

    def values(self, feature: str) -> list[float]:
        return sorted(self.per_pool[feature].values())

    def median(self, feature: str) -> float:
        vals = self.values(feature)
        return float(np.median(vals)) if vals else float("nan")

    def cdf(self, feature: str) -> list[tuple[float, float]]:
        vals = self.values(feature)
        n = len(vals)
        return [(v, (i + 1) / n) for i, v in enumerate(vals)]


_FEATURE_GETTERS = {
    "sr": lambda v: float(v.sr),
    "ur": lambda v: float(v.ur),
    "cut": lambda v: float(v.cut_minutes),
}


def feature_fidelity_records(ddd: Sequence[FeatureVector], actual: Sequence[FeatureVector]) -> FidelityResult:
    ddd_by = group_by_pool(ddd)
    act_by = group_by_pool(actual)
    if set(ddd_by) != set(act_by):
        raise AnalysisError("probe and actual feature files cover different pools")
    per_pool = {f: {} for f in _FEATURE_GETTERS}
    excluded = {f: [] for f in _FEATURE_GETTERS}
    for pool in sorted(ddd_by):
        a, b = ddd_by[pool], act_by[pool]
        if len(a) != len(b) or any(x.cycle != y.cycle for x, y in zip(a, b)):
            raise AnalysisError(f"{pool.key}: feature sequences are not time-aligned")
        for name, get in _FEATURE_GETTERS.items():
            r = pearson([get(v) for v in a], [get(v) for v in b])
            if math.isnan(r):
                excluded[name].append(pool)
            else:
                per_pool[name][pool] = r
    return FidelityResult(per_pool, excluded)


def feature_fidelity(ddd_path: str | Path, actual_path: str | Path) -> FidelityResult:
    return feature_fidelity_records(read_trace(ddd_path, Kind.FEATURE), read_trace(actual_path, Kind.FEATURE))


def write_fidelity_csv(res: FidelityResult, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "instance_type", "region", "zone", "pearson_r", "excluded"])
        for feat in _FEATURE_GETTERS:
            rows = [(p, res.per_pool[feat][p], 0) for p in res.per_pool[feat]]
            rows += [(p, "", 1) for p in res.excluded[feat]]
            for p, r, ex in sorted(rows, key=lambda t: t[0]):
                w.writerow([feat, p.instance_type, p.region, p.zone,
                            "" if r == "" else round(r, 9), ex])


# ---------------------------------------------------------------------------
# Monitoring cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostParams:
    """Inputs for the 24-hour monitoring cost comparison.

    Defaults describe one 10-node pool at $0.10/h, probed every 3 minutes
    by one short serverless invocation per request, against periodic launch
    probing every 10 minutes billed for 60 s per launched node.
    """

    instance_price_per_hour: float = 0.10
    nodes: int = 10
    duration_hours: float = 24.0
    probe_interval_min: float = 10.0
    ddd_interval_min: float = 3.0
    billed_seconds_per_probe_launch: float = 60.0
    invocations_per_cycle: int = 10
    invocation_cost: float = 0.0000195
    storage_cost_per_record: float = 0.0000005

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise AnalysisError(f"{k} must be non-negative, got {v}")
        minutes = self.duration_hours * 60
        for name in ("probe_interval_min", "ddd_interval_min"):
            iv = getattr(self, name)
            if iv <= 0:
                raise AnalysisError(f"{name} must be positive")
            ratio = minutes / iv
            if abs(ratio - round(ratio)) > 1e-9:
                raise AnalysisError(f"{name}={iv} does not divide the duration ({minutes} min)")


@dataclass(frozen=True)
class CostReport:
    continuous: float
    periodic_probe: float
    ddd: float

    @property
    def continuous_ratio(self) -> float:
        return self.continuous / self.ddd if self.ddd else float("inf")

    @property
    def periodic_ratio(self) -> float:
        return self.periodic_probe / self.ddd if self.ddd else float("inf")

    def as_dict(self) -> dict:
        return {"continuous": self.continuous, "periodic_probe": self.periodic_probe, "ddd": self.ddd,
                "continuous_over_ddd": self.continuous_ratio, "periodic_over_ddd": self.periodic_ratio}


def cost_model(p: CostParams = CostParams()) -> CostReport:
    p.validate()
    per_request = p.invocation_cost + p.storage_cost_per_record
    periodic_launches = p.duration_hours * 60 / p.probe_interval_min
    continuous = p.instance_price_per_hour * p.nodes * p.duration_hours
    periodic = (p.instance_price_per_hour * p.nodes * (p.billed_seconds_per_probe_launch / 3600.0)
                * periodic_launches + periodic_launches * p.nodes * per_request)
    ddd_cycles = p.duration_hours * 60 / p.ddd_interval_min
    ddd = ddd_cycles * p.invocations_per_cycle * per_request
    return CostReport(continuous, periodic, ddd)
