"""Shared record types and JSON-lines trace I/O.

Every trace kind is stored as UTF-8 JSON lines, one record per line, with
keys in a fixed order (see ``docs/formats.md``).  Pool identity is
flattened into ``instance_type``/``region``/``zone`` columns so the same
layout can be exported to CSV unchanged.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence, Union

SCHEMA_VERSION = 1


class TraceError(ValueError):
    """Base class for trace parsing and validation failures."""


class TraceFormatError(TraceError):
    def __init__(self, message: str, lineno: int | None = None, path: str | None = None):
        self.lineno = lineno
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)


class TraceOrderError(TraceFormatError):
    """A per-pool cycle/timestamp sequence went backwards."""


class InvariantError(TraceError):
    """A record violates its type invariants."""


class Kind(str, enum.Enum):
    PROBE = "probe"
    CYCLE = "cycle"
    RUNNING = "running"
    INTERRUPTION = "interruption"
    FEATURE = "feature"


class Outcome(str, enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


@dataclass(frozen=True, order=True)
class PoolId:
    instance_type: str
    region: str
    zone: str

    def __post_init__(self):
        for name in ("instance_type", "region", "zone"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise InvariantError(f"PoolId.{name} must be a non-empty string, got {value!r}")

    @property
    def key(self) -> str:
        return f"{self.instance_type}/{self.zone}"

    def as_fields(self) -> dict:
        return {"instance_type": self.instance_type, "region": self.region, "zone": self.zone}

    @classmethod
    def from_fields(cls, d: dict) -> "PoolId":
        return cls(d["instance_type"], d["region"], d["zone"])


@dataclass(frozen=True)
class ProbeRecord:
    ts: int
    cycle: int
    pool: PoolId
    request_index: int
    outcome: Outcome
    error: str | None = None

    def validate(self) -> None:
        if self.cycle < 0:
            raise InvariantError(f"cycle must be >= 0, got {self.cycle}")
        if self.request_index < 0:
            raise InvariantError(f"request_index must be >= 0, got {self.request_index}")
        if not isinstance(self.outcome, Outcome):
            raise InvariantError(f"bad outcome {self.outcome!r}")


@dataclass(frozen=True)
class CycleMeasurement:
    cycle: int
    pool: PoolId
    successes: int
    requested: int
    interval_minutes: int

    def validate(self) -> None:
        if self.cycle < 1:
            raise InvariantError(f"cycle must be >= 1, got {self.cycle}")
        if self.requested < 1:
            raise InvariantError(f"requested must be >= 1, got {self.requested}")
        if not 0 <= self.successes <= self.requested:
            raise InvariantError(
                f"successes={self.successes} outside [0, requested={self.requested}]"
            )
        if self.interval_minutes <= 0:
            raise InvariantError(f"interval_minutes must be > 0, got {self.interval_minutes}")


@dataclass(frozen=True)
class RunningRecord:
    cycle: int
    pool: PoolId
    running: int
    target: int

    def validate(self) -> None:
        if self.target < 1:
            raise InvariantError(f"target must be >= 1, got {self.target}")
        if not 0 <= self.running <= self.target:
            raise InvariantError(f"running={self.running} outside [0, target={self.target}]")


@dataclass(frozen=True)
class InterruptionEvent:
    ts: int
    pool: PoolId
    node_id: str

    def validate(self) -> None:
        if self.ts < 0:
            raise InvariantError(f"ts must be >= 0, got {self.ts}")
        if not self.node_id:
            raise InvariantError("node_id must be non-empty")


@dataclass(frozen=True)
class FeatureVector:
    """Features at one cycle.  ``sr``/``ur`` are exact rationals in memory."""

    cycle: int
    pool: PoolId
    window_minutes: int
    sr: Fraction
    ur: Fraction
    cut_minutes: int
    labels: dict = field(default_factory=dict)  # horizon minutes -> 1, 0 or None

    def validate(self) -> None:
        if not 0 <= self.sr <= 1:
            raise InvariantError(f"sr={self.sr} outside [0, 1]")
        if not 0 <= self.ur <= 1:
            raise InvariantError(f"ur={self.ur} outside [0, 1]")
        if self.cut_minutes < 0:
            raise InvariantError(f"cut_minutes must be >= 0, got {self.cut_minutes}")
        for h, v in self.labels.items():
            if v not in (0, 1, None):
                raise InvariantError(f"label for h={h} must be 0, 1 or null, got {v!r}")

    def label(self, horizon_minutes: int) -> int | None:
        return self.labels.get(horizon_minutes)


Record = Union[ProbeRecord, CycleMeasurement, RunningRecord, InterruptionEvent, FeatureVector]

KIND_OF = {
    ProbeRecord: Kind.PROBE,
    CycleMeasurement: Kind.CYCLE,
    RunningRecord: Kind.RUNNING,
    InterruptionEvent: Kind.INTERRUPTION,
    FeatureVector: Kind.FEATURE,
}

# Column order for each kind; JSON keys and CSV headers both follow it.
COLUMNS = {
    Kind.PROBE: ["v", "ts", "cycle", "instance_type", "region", "zone", "request_index", "outcome", "error"],
    Kind.CYCLE: ["v", "cycle", "instance_type", "region", "zone", "successes", "requested", "interval_min"],
    Kind.RUNNING: ["v", "cycle", "instance_type", "region", "zone", "running", "target"],
    Kind.INTERRUPTION: ["v", "ts", "instance_type", "region", "zone", "node_id"],
    Kind.FEATURE: ["v", "cycle", "instance_type", "region", "zone", "window_min", "sr", "ur", "cut_min", "labels"],
}


def decimal6(x: Fraction) -> float:
    return round(float(x), 6)


def to_dict(rec: Record) -> dict:
    """Serialize a record into an ordered dict matching ``COLUMNS``."""
    if isinstance(rec, ProbeRecord):
        d = {"v": SCHEMA_VERSION, "ts": rec.ts, "cycle": rec.cycle, **rec.pool.as_fields(),
             "request_index": rec.request_index, "outcome": rec.outcome.value}
        if rec.error is not None:
            d["error"] = rec.error
        return d
    if isinstance(rec, CycleMeasurement):
        return {"v": SCHEMA_VERSION, "cycle": rec.cycle, **rec.pool.as_fields(),
                "successes": rec.successes, "requested": rec.requested,
                "interval_min": rec.interval_minutes}
    if isinstance(rec, RunningRecord):
        return {"v": SCHEMA_VERSION, "cycle": rec.cycle, **rec.pool.as_fields(),
                "running": rec.running, "target": rec.target}
    if isinstance(rec, InterruptionEvent):
        return {"v": SCHEMA_VERSION, "ts": rec.ts, **rec.pool.as_fields(), "node_id": rec.node_id}
    if isinstance(rec, FeatureVector):
        labels = {str(h): rec.labels[h] for h in sorted(rec.labels)}
        return {"v": SCHEMA_VERSION, "cycle": rec.cycle, **rec.pool.as_fields(),
                "window_min": rec.window_minutes, "sr": decimal6(rec.sr),
                "ur": decimal6(rec.ur), "cut_min": rec.cut_minutes, "labels": labels}
    raise TypeError(f"not a trace record: {type(rec).__name__}")


def _as_fraction(x) -> Fraction:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise TypeError(f"expected a number, got {x!r}")
    return Fraction(repr(x)) if isinstance(x, float) else Fraction(x)


def _int(d: dict, key: str) -> int:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"{key} must be an integer, got {v!r}")
    return v


def from_dict(d: dict, kind: Kind) -> Record:
    if d.get("v", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {d.get('v')!r}")
    pool = PoolId.from_fields(d)
    if kind is Kind.PROBE:
        return ProbeRecord(_int(d, "ts"), _int(d, "cycle"), pool, _int(d, "request_index"),
                           Outcome(d["outcome"]), d.get("error"))
    if kind is Kind.CYCLE:
        return CycleMeasurement(_int(d, "cycle"), pool, _int(d, "successes"),
                                _int(d, "requested"), _int(d, "interval_min"))
    if kind is Kind.RUNNING:
        return RunningRecord(_int(d, "cycle"), pool, _int(d, "running"), _int(d, "target"))
    if kind is Kind.INTERRUPTION:
        return InterruptionEvent(_int(d, "ts"), pool, str(d["node_id"]))
    if kind is Kind.FEATURE:
        labels = {int(h): v for h, v in d.get("labels", {}).items()}
        return FeatureVector(_int(d, "cycle"), pool, _int(d, "window_min"),
                             _as_fraction(d["sr"]), _as_fraction(d["ur"]),
                             _int(d, "cut_min"), labels)
    raise ValueError(f"unknown kind {kind!r}")


def _order_key(rec: Record) -> tuple:
    if isinstance(rec, ProbeRecord):
        return (rec.cycle, rec.ts)
    if isinstance(rec, InterruptionEvent):
        return (rec.ts,)
    return (rec.cycle,)


class _OrderChecker:
    def __init__(self, last: dict | None = None):
        self.last = dict(last or {})

    def check(self, rec: Record) -> bool:
        pool_key = rec.pool
        if isinstance(rec, FeatureVector):
            pool_key = (rec.pool, rec.window_minutes)
        key = _order_key(rec)
        prev = self.last.get(pool_key)
        if prev is not None and key < prev:
            return False
        self.last[pool_key] = key
        return True


def read_trace(path: str | Path, kind: Kind | str) -> list[Record]:
    """Load all records of ``kind`` from a JSON-lines file, in file order.

    Raises :class:`TraceFormatError` (with the 1-based line number) for
    malformed lines or invariant violations, and :class:`TraceOrderError`
    when a pool's cycle or timestamp sequence decreases.
    """
    kind = Kind(kind)
    path = Path(path)
    records: list[Record] = []
    order = _OrderChecker()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = from_dict(json.loads(line), kind)
                rec.validate()
            except (ValueError, KeyError, TypeError) as exc:
                raise TraceFormatError(f"{type(exc).__name__}: {exc}", lineno, str(path)) from exc
            if not order.check(rec):
                raise TraceOrderError(f"{kind.value} record for {rec.pool.key} goes backwards",
                                      lineno, str(path))
            records.append(rec)
    return records


def dumps(rec: Record) -> str:
    return json.dumps(to_dict(rec), separators=(",", ":"), ensure_ascii=False)


def _check_uniform_kind(records: Sequence[Record]) -> Kind | None:
    kinds = {KIND_OF.get(type(r)) for r in records}
    if None in kinds:
        raise TypeError("write_trace only accepts trace record types")
    if len(kinds) > 1:
        raise TypeError(f"mixed record kinds: {sorted(k.value for k in kinds)}")
    return kinds.pop() if kinds else None


def write_trace(records: Iterable[Record], path: str | Path, append: bool = False) -> None:
    """Write records as JSON lines.

    All records are validated (and, in append mode, checked for per-pool
    monotonicity against the existing file) before anything is written.
    """
    records = list(records)
    kind = _check_uniform_kind(records)
    path = Path(path)
    last = None
    if append and path.exists() and kind is not None:
        checker = _OrderChecker()
        for rec in read_trace(path, kind):
            checker.check(rec)
        last = checker.last
    order = _OrderChecker(last)
    for i, rec in enumerate(records):
        try:
            rec.validate()
        except InvariantError as exc:
            raise InvariantError(f"record {i}: {exc}") from exc
        if not order.check(rec):
            raise TraceOrderError(f"record {i} for {rec.pool.key} goes backwards")
    lines = "".join(dumps(r) + "\n" for r in records)
    with path.open("a" if append else "w", encoding="utf-8", newline="\n") as fh:
        fh.write(lines)


def export_csv(records: Sequence[Record], path: str | Path) -> None:
    """CSV mirror of a trace; feature labels expand to ``label_h<minutes>`` columns."""
    records = list(records)
    kind = _check_uniform_kind(records)
    if kind is None:
        Path(path).write_text("", encoding="utf-8")
        return
    header = [c for c in COLUMNS[kind] if c != "labels"]
    horizons: list[int] = []
    if kind is Kind.FEATURE:
        horizons = sorted({h for r in records for h in r.labels})
        header += [f"label_h{h}" for h in horizons]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in records:
            d = to_dict(rec)
            row = [d.get(c, "") for c in header if not c.startswith("label_h")]
            if kind is Kind.FEATURE:
                row += ["" if rec.labels.get(h) is None else rec.labels[h] for h in horizons]
            writer.writerow(["" if v is None else v for v in row])


def group_by_pool(records: Iterable[Record]) -> dict[PoolId, list]:
    out: dict[PoolId, list] = {}
    for rec in records:
        out.setdefault(rec.pool, []).append(rec)
    return out


BUNDLE_FILES = {
    Kind.PROBE: "probe.jsonl",
    Kind.CYCLE: "cycle.jsonl",
    Kind.RUNNING: "running.jsonl",
    Kind.INTERRUPTION: "interruption.jsonl",
}
