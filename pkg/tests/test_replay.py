from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotprobe.core import FeatureVector, PoolId
from spotprobe.features import featurize
from spotprobe.predictor import Model, ModelSpec, train_split_model
from spotprobe.replay import (
    Query,
    ReplayError,
    Strategy,
    gen_workload,
    load_queries_csv,
    replay,
    run_experiment,
)
from spotprobe.simulator import default_pools, run_scenario

POOL = PoolId("m5.large", "us-east-1", "us-east-1a")


def sr_model(h):
    """LR model that forecasts Available iff sr > 0.5."""
    spec = ModelSpec(kind="lr", feature_set=("sr",), horizon_minutes=h)
    return Model(spec, {"mean": [0.0], "scale": [1.0], "weights": [50.0], "bias": -25.0})


def feats(srs):
    return [FeatureVector(c + 1, POOL, 6, Fraction(s), Fraction(0), 0) for c, s in enumerate(srs)]


def qs(durations):
    return [Query(i, d) for i, d in enumerate(durations)]


def test_workload_reference_total():
    w = gen_workload(99, 206, 0.5, 661.5, seed=3)
    assert len(w) == 99
    assert abs(sum(q.duration_seconds for q in w) - 12360) <= 1e-6
    assert min(q.duration_seconds for q in w) >= 0.1


def test_workload_single_and_deterministic():
    assert gen_workload(1, 206, seed=0) == [Query(0, 12360.0)]
    assert gen_workload(seed=5) == gen_workload(seed=5)
    assert gen_workload(seed=5) != gen_workload(seed=6)


def test_queries_csv(tmp_path):
    (tmp_path / "q.csv").write_text("id,duration_seconds\n4,10.5\n9,3\n")
    assert load_queries_csv(tmp_path / "q.csv") == [Query(4, 10.5), Query(9, 3.0)]
    (tmp_path / "bare.csv").write_text("10\n20\n")
    assert [q.duration_seconds for q in load_queries_csv(tmp_path / "bare.csv")] == [10, 20]
    with pytest.raises(ReplayError):
        Query(0, 0.0)


@pytest.mark.parametrize("strategy", ["ar", "sjf", "predict"])
def test_fully_available(strategy):
    model = sr_model(15) if strategy == "predict" else None
    out = replay([True] * 100, qs([100, 500, 30]), strategy, model, None, 3, feats([1] * 100))
    assert (out.lost_seconds, out.idle_seconds, out.completed) == (0, 0, 3)
    assert out.makespan_seconds == 630


def test_one_cycle_then_down():
    out = replay([True] + [False] * 9, qs([300]), "ar")
    assert out.completed == 0 and out.lost_seconds == 180 and out.incomplete
    assert out.makespan_seconds == 1800


def test_query_finishing_inside_cycle_is_not_lost():
    out = replay([True, False, True], qs([100, 50]), "ar")
    assert out.lost_seconds == 0 and out.completed == 2 and out.makespan_seconds == 150


def test_sjf_sorts_queue():
    out = replay([True, False, True, True, True], qs([150, 20, 100]), "sjf")
    # 20 + 100 finish in cycle 0; 150 starts at 120 and is lost at 180
    assert out.lost_seconds == 60 and out.completed == 3


def test_predict_defers_for_horizon():
    # forecast Unavailable at cycle 0 blocks launches until 15 min
    out = replay([True] * 10, qs([60]), "predict", sr_model(15), None, 3, feats([0] + [1] * 9))
    assert out.deferrals == 1 and out.idle_seconds == 900 and out.makespan_seconds == 960


def test_predict_never_preempts():
    out = replay([True] * 10, qs([1000]), "predict", sr_model(15), None, 3, feats([1, 1] + [0] * 8))
    assert out.completed == 1 and out.lost_seconds == 0 and out.interruptions == 0
    assert out.deferrals >= 1


def test_predict_always_available_equals_ar():
    avail = [True, True, False, True, True, False, True] * 5
    work = qs([100, 500, 30, 260, 90])
    a = replay(avail, work, "ar")
    p = replay(avail, work, "predict", sr_model(3), None, 3, feats([1] * len(avail)))
    assert (a.lost_seconds, a.idle_seconds, a.makespan_seconds) == (p.lost_seconds, p.idle_seconds,
                                                                    p.makespan_seconds)


def test_predict_needs_model_and_features():
    with pytest.raises(ReplayError):
        replay([True], qs([1]), "predict")
    with pytest.raises(ReplayError):
        replay([True, True], qs([1]), "predict", sr_model(3), None, 3, feats([1]))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60),
       st.lists(st.floats(0.1, 700, allow_nan=False), min_size=1, max_size=15),
       st.sampled_from(["ar", "sjf", "predict"]),
       st.lists(st.sampled_from([0, 1]), min_size=60, max_size=60),
       st.sampled_from([3, 15]))
def test_time_accounting(avail, durations, strategy, srs, h):
    work = qs(durations)
    out = replay(avail, work, strategy, sr_model(h), None, 3, feats(srs))
    total = out.useful_seconds + out.lost_seconds + out.idle_seconds + out.blocked_seconds + out.unfinished_seconds
    assert total == pytest.approx(out.makespan_seconds, abs=1e-6)
    done = sorted(durations, key=float) if strategy == "sjf" else durations
    if strategy != "sjf":
        assert out.useful_seconds == pytest.approx(sum(done[:out.completed]))
    assert out.completed <= len(work)
    assert out.incomplete == (out.completed < len(work))
    assert out.lost_seconds >= 0 and out.idle_seconds >= 0
    if strategy != "predict":
        assert out.idle_seconds == 0


@pytest.fixture(scope="module")
def small_bundle(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    b = run_scenario(default_pools(8), 720, 3, 10, seed=3)
    b.write(d)
    return d, b


def test_experiment_rows_and_determinism(small_bundle, tmp_path):
    d, b = small_bundle
    vecs = featurize(b.cycles, b.running, 60, (3, 15))
    models = {h: train_split_model(vecs, ModelSpec(kind="boost", window_minutes=60, horizon_minutes=h,
                                                   rounds=10), seed=3) for h in (3, 15)}
    work = gen_workload(20, 40, seed=1)
    rows = run_experiment(d, ["ar", "sjf", "predict"], [3, 15], 5, 3, models, work, out=tmp_path / "a.csv")
    run_experiment(d, ["ar", "sjf", "predict"], [3, 15], 5, 3, models, work, out=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    pools = set(models[3].test_pools)
    assert {r.pool for r in rows} == pools
    for pool in pools:
        for s, h in [("ar", 0), ("sjf", 0), ("predict", 3), ("predict", 15)]:
            cell = [r for r in rows if r.pool == pool and r.strategy == s and r.horizon_min == h]
            assert sorted(r.permutation for r in cell) == ["0", "1", "2", "3", "4", "mean"]


def test_experiment_missing_model(small_bundle):
    d, _ = small_bundle
    with pytest.raises(ReplayError):
        run_experiment(d, [Strategy.PREDICT_AR], [15], 1, 0, {}, qs([10]))
