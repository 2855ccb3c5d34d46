from __future__ import annotations

import json

import pytest

from spotprobe.cli import main
from spotprobe.config import ConfigError, config_hash, load_config
from spotprobe.core import BUNDLE_FILES, Kind, read_trace

MINIMAL = {
    "scenario": {"pools": [{"instance_type": "m5.large", "region": "us-east-1", "zone": "us-east-1a",
                            "mean_up_minutes": 15, "mean_down_minutes": 6}]},
    "collection": {"duration_min": 60},
    "features": {"windows": [6, 15], "horizons": [0, 3, 15]},
    "replay": {"permutations": 2, "workload": {"count": 5, "total_minutes": 10}},
}


@pytest.fixture
def minimal_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(MINIMAL))
    return path


def test_pipeline_smoke(tmp_path, minimal_config):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(minimal_config), "--out", str(out)]) == 0
    for name in BUNDLE_FILES.values():
        assert (out / "bundle" / name).exists()
    assert (out / "features" / "ddd_W6.jsonl").exists()
    assert (out / "features" / "actual_W15.jsonl").exists()
    assert (out / "evaluation.csv").read_text().startswith("model,features,window_min,horizon_min,")
    assert list((out / "models").glob("*.json"))
    assert (out / "replay.csv").exists()
    for name in ("compare.json", "proximity_cdf.csv", "cost.json", "fidelity_W6.csv"):
        assert (out / "analysis" / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert "bundle/cycle.jsonl" in manifest["files"]
    assert not (out / "failed").exists()


def test_non_divisible_window_is_rejected_before_running(tmp_path):
    cfg = dict(MINIMAL, features={"windows": [100], "horizons": [0]})
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(path), "--out", str(out)]) == 1
    assert not out.exists()


def test_flags_override_file_and_env(tmp_path, minimal_config):
    cfg = load_config(minimal_config, {"seed": 3}, env={"SPOTPROBE_SEED": "5", "SPOTPROBE_OUT": "x"})
    assert cfg["seed"] == 3 and cfg["out_dir"] == "x"
    assert load_config(minimal_config, env={"SPOTPROBE_SEED": "5"})["seed"] == 5


def test_config_hash_tracks_semantic_fields(minimal_config):
    base = load_config(minimal_config, env={})
    assert config_hash(base) == config_hash(load_config(minimal_config, {"out_dir": "elsewhere", "jobs": 4},
                                                        env={}))
    assert config_hash(base) != config_hash(load_config(minimal_config, {"seed": 8}, env={}))
    assert config_hash(base) != config_hash(load_config(minimal_config, {"cost": {"nodes": 20}}, env={}))
    # spelling out a default leaves the hash alone
    assert config_hash(base) == config_hash(load_config(minimal_config, {"cost": {"nodes": 10}}, env={}))


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        load_config(overrides={"features": {"horizons": [0, 4]}}, env={})
    with pytest.raises(ConfigError):
        load_config(overrides={"predictor": {"models": ["svm"]}}, env={})
    with pytest.raises(ConfigError):
        load_config(overrides={"collection": {"duration_min": 1000}}, env={})


def test_stage_commands(tmp_path, minimal_config, capsys):
    c = ["--config", str(minimal_config)]
    b = tmp_path / "bundle"
    assert main(["simulate", *c, "--out", str(b), "--duration-min", "120"]) == 0
    assert len(read_trace(b / "cycle.jsonl", Kind.CYCLE)) == 40
    col = tmp_path / "collected"
    assert main(["collect", *c, "--out", str(col), "--duration-min", "120", "--rate-limit", "470/180"]) == 0
    assert (col / "cycle.jsonl").read_bytes() == (b / "cycle.jsonl").read_bytes()

    f = tmp_path / "f6.jsonl"
    assert main(["features", *c, "--cycles", str(b / "cycle.jsonl"), "--running", str(b / "running.jsonl"),
                 "--window-min", "6", "--horizons", "0,3", "--out", str(f), "--csv", str(tmp_path / "f6.csv")]) == 0
    vecs = read_trace(f, Kind.FEATURE)
    assert len(vecs) == 40 and set(vecs[0].labels) == {0, 3}
    assert main(["features", *c, "--cycles", str(b / "running.jsonl"), "--from-running",
                 "--window-min", "6", "--out", str(tmp_path / "a6.jsonl")]) == 0

    assert main(["evaluate", *c, "--features", str(f), "--models", "lr", "--feature-sets", "sr,sr+ur+cut",
                 "--horizons", "0,3", "--out", str(tmp_path / "eval.csv")]) == 0
    assert len((tmp_path / "eval.csv").read_text().splitlines()) == 1 + 4

    model = tmp_path / "m3.json"
    assert main(["train", *c, "--features", str(f), "--model", "lr", "--horizon-min", "3", "--out", str(model)]) == 0
    assert main(["replay", *c, "--bundle", str(b), "--strategies", "ar,predict", "--model", str(model),
                 "--permutations", "2", "--out", str(tmp_path / "replay.csv")]) == 0
    rows = (tmp_path / "replay.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 3

    capsys.readouterr()
    assert main(["analyze", "compare", "--cycles", str(b / "cycle.jsonl"), "--running", str(b / "running.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 40
    assert main(["analyze", "proximity", "--interruptions", str(b / "interruption.jsonl"),
                 "--out", str(tmp_path / "prox.csv")]) == 0
    assert main(["analyze", "fidelity", *c, "--bundle", str(b), "--window-min", "6",
                 "--out", str(tmp_path / "fid.csv")]) == 0
    capsys.readouterr()
    assert main(["analyze", "cost", "--nodes", "20"]) == 0
    assert json.loads(capsys.readouterr().out)["continuous"] == pytest.approx(48.0)


def test_exit_codes(tmp_path, minimal_config):
    assert main(["features", "--cycles", str(tmp_path / "missing.jsonl"), "--window-min", "6"]) == 1
    bad = tmp_path / "cycle.jsonl"
    bad.write_text('{"v":1,"cycle":1,"instance_type":"a","region":"r","zone":"z","successes":11,'
                   '"requested":10,"interval_min":3}\n')
    assert main(["features", "--cycles", str(bad), "--window-min", "6", "--out", str(tmp_path / "x")]) == 1
    run = tmp_path / "run"
    assert main(["pipeline", "--config", str(minimal_config), "--out", str(run)]) == 0
    # one pool over an hour does not meet the reference thresholds
    assert main(["check", str(run)]) == 3


def test_stage_failure_leaves_marker(tmp_path, monkeypatch, minimal_config):
    import spotprobe.pipeline as pl

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pl, "evaluate_matrix", boom)
    out = tmp_path / "run"
    assert main(["pipeline", "--config", str(minimal_config), "--out", str(out)]) == 2
    marker = (out / "failed" / "stage.txt").read_text()
    assert marker.startswith("evaluate\nRuntimeError: disk on fire")
    assert (out / "bundle" / "cycle.jsonl").exists()
