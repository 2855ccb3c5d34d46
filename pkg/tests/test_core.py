from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotprobe.core import (
    COLUMNS,
    CycleMeasurement,
    FeatureVector,
    InterruptionEvent,
    InvariantError,
    Kind,
    Outcome,
    PoolId,
    ProbeRecord,
    RunningRecord,
    TraceFormatError,
    TraceOrderError,
    export_csv,
    read_trace,
    to_dict,
    write_trace,
)

POOL = PoolId("m5.large", "us-east-1", "us-east-1a")
OTHER = PoolId("c5.xlarge", "us-east-1", "us-east-1b")


def cycle_line(cycle, s, n=10, pool=POOL):
    return json.dumps(to_dict(CycleMeasurement(cycle, pool, s, n, 3)))


def test_three_cycle_lines_in_order(tmp_path):
    path = tmp_path / "cycle.jsonl"
    path.write_text("\n".join(cycle_line(c, s) for c, s in [(1, 10), (2, 7), (3, 9)]) + "\n")
    recs = read_trace(path, Kind.CYCLE)
    assert [(r.cycle, r.successes) for r in recs] == [(1, 10), (2, 7), (3, 9)]


def test_empty_file(tmp_path):
    path = tmp_path / "cycle.jsonl"
    path.write_text("")
    assert read_trace(path, "cycle") == []


def test_bound_violation_names_line(tmp_path):
    path = tmp_path / "cycle.jsonl"
    bad = json.loads(cycle_line(2, 10))
    bad["successes"] = 11
    path.write_text(cycle_line(1, 10) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(TraceFormatError) as err:
        read_trace(path, Kind.CYCLE)
    assert err.value.lineno == 2
    assert ":2" in str(err.value) or "line 2" in str(err.value)


def test_malformed_json_names_line(tmp_path):
    path = tmp_path / "cycle.jsonl"
    path.write_text(cycle_line(1, 10) + "\n{not json\n")
    with pytest.raises(TraceFormatError) as err:
        read_trace(path, Kind.CYCLE)
    assert err.value.lineno == 2


def test_backwards_cycle_rejected(tmp_path):
    path = tmp_path / "cycle.jsonl"
    path.write_text("\n".join([cycle_line(2, 10), cycle_line(1, 10)]) + "\n")
    with pytest.raises(TraceOrderError):
        read_trace(path, Kind.CYCLE)


def test_interleaved_pools_are_fine(tmp_path):
    path = tmp_path / "cycle.jsonl"
    path.write_text("\n".join([cycle_line(1, 10), cycle_line(1, 3, pool=OTHER),
                               cycle_line(2, 10), cycle_line(2, 4, pool=OTHER)]) + "\n")
    assert len(read_trace(path, Kind.CYCLE)) == 4


def test_invalid_record_rejected_before_writing(tmp_path):
    path = tmp_path / "running.jsonl"
    recs = [RunningRecord(1, POOL, 10, 10), RunningRecord(2, POOL, 11, 10)]
    with pytest.raises(InvariantError):
        write_trace(recs, path)
    assert not path.exists()


def test_append_mode(tmp_path):
    path = tmp_path / "running.jsonl"
    write_trace([RunningRecord(1, POOL, 10, 10), RunningRecord(2, POOL, 9, 10)], path)
    write_trace([RunningRecord(3, POOL, 10, 10)], path, append=True)
    assert [r.cycle for r in read_trace(path, Kind.RUNNING)] == [1, 2, 3]
    before = path.read_bytes()
    with pytest.raises(TraceOrderError):
        write_trace([RunningRecord(2, POOL, 10, 10)], path, append=True)
    assert path.read_bytes() == before


def test_field_order_is_fixed(tmp_path):
    path = tmp_path / "probe.jsonl"
    write_trace([ProbeRecord(180, 1, POOL, 0, Outcome.ACCEPTED)], path)
    keys = list(json.loads(path.read_text()).keys())
    assert keys == [c for c in COLUMNS[Kind.PROBE] if c != "error"]


def test_feature_csv_expands_labels(tmp_path):
    fv = FeatureVector(5, POOL, 60, Fraction(7, 10), Fraction(1, 20), 3, {0: 1, 15: None})
    export_csv([fv], tmp_path / "f.csv")
    header, row = (tmp_path / "f.csv").read_text().splitlines()
    assert header.endswith("label_h0,label_h15")
    assert row.endswith(",1,")


names = st.sampled_from(["m5.large", "c5.xlarge", "r6g.2xlarge"])
zones = st.sampled_from(["us-east-1a", "us-west-2b", "eu-west-1c"])


@st.composite
def probe_runs(draw):
    pools = [PoolId(t, z[:-1], z) for t, z in draw(st.lists(st.tuples(names, zones), min_size=1,
                                                            max_size=4, unique=True))]
    out = []
    cycle = {p: 0 for p in pools}
    for _ in range(draw(st.integers(0, 1000))):
        p = draw(st.sampled_from(pools))
        cycle[p] += draw(st.integers(0, 1))
        c = max(cycle[p], 1)
        err = draw(st.one_of(st.none(), st.text(min_size=1, max_size=10)))
        outcome = draw(st.sampled_from(list(Outcome)))
        out.append(ProbeRecord(c * 180, c, p, draw(st.integers(0, 9)), outcome, err))
    return out


@settings(max_examples=25, deadline=None)
@given(probe_runs())
def test_probe_round_trip(tmp_path_factory, recs):
    path = tmp_path_factory.mktemp("rt") / "probe.jsonl"
    write_trace(recs, path)
    assert read_trace(path, Kind.PROBE) == recs


def test_probe_round_trip_1000(tmp_path):
    recs = [ProbeRecord(180 * (i // 10 + 1), i // 10 + 1, POOL, i % 10,
                        Outcome.ACCEPTED if i % 3 else Outcome.REJECTED) for i in range(1000)]
    write_trace(recs, tmp_path / "p.jsonl")
    assert read_trace(tmp_path / "p.jsonl", Kind.PROBE) == recs


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(1, 500))))
def test_other_kinds_round_trip(tmp_path_factory, args):
    n, s, cycle = args
    d = tmp_path_factory.mktemp("k")
    cases = {
        Kind.CYCLE: [CycleMeasurement(cycle, POOL, s, n, 3)],
        Kind.RUNNING: [RunningRecord(cycle, POOL, s, n)],
        Kind.INTERRUPTION: [InterruptionEvent(cycle * 7, POOL, f"n{s}")],
        # sr/ur with terminating decimals survive the 6-decimal rendering exactly
        Kind.FEATURE: [FeatureVector(cycle, POOL, 60, Fraction(s, 10) if n == 10 else Fraction(1, 2),
                                     Fraction(1, 4), 3 * s, {0: 1, 60: None})],
    }
    for kind, recs in cases.items():
        write_trace(recs, d / f"{kind.value}.jsonl")
        assert read_trace(d / f"{kind.value}.jsonl", kind) == recs
