"""Run configuration for the end-to-end pipeline.

A config is a JSON document; every key is optional and falls back to the
reference setup (20 pools, 24 h, 3-minute cycles, 10 probes per cycle).
Environment variables ``SPOTPROBE_SEED``, ``SPOTPROBE_OUT`` and
``SPOTPROBE_JOBS`` override the file; command-line flags override both.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .analysis import CostParams
from .collector import RateLimit
from .predictor import MODEL_KINDS, all_feature_sets, parse_feature_set
from .replay import Strategy
from .simulator import scenario_from_dict, scenario_to_dict, validate_scenario

ENV_PREFIX = "SPOTPROBE_"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 7,
    "out_dir": "spotprobe-out",
    "jobs": 1,
    "scenario": {"default_pools": 20},
    "collection": {
        "interval_min": 3,
        "requests_per_cycle": 10,
        "duration_min": 1440,
        "rate_limit": "470/180",
        "use_collector": False,
    },
    "features": {
        "windows": [60, 120, 240, 480, 720],
        "horizons": [0, 3, 15, 30, 60],
    },
    "predictor": {
        "models": ["lr", "boost"],
        "feature_sets": "all",
        "split": "pool",
        "selection_horizon": 0,
        "replay_model": "boost",
        "hyperparams": {},
    },
    "replay": {
        "strategies": ["ar", "sjf", "predict"],
        "horizons": [3, 15],
        "permutations": 5,
        "queries": "gen",
        "workload": {"count": 99, "total_minutes": 206.0, "min_s": 0.5, "max_s": 661.5},
    },
    "cost": {},
}

# keys that do not change results
NON_SEMANTIC = ("out_dir", "jobs")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "scenario":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                env: dict | None = None) -> dict:
    """Defaults <- config file <- environment <- ``overrides`` (CLI flags)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
    env = os.environ if env is None else env
    if f"{ENV_PREFIX}SEED" in env:
        cfg["seed"] = int(env[f"{ENV_PREFIX}SEED"])
    if f"{ENV_PREFIX}OUT" in env:
        cfg["out_dir"] = env[f"{ENV_PREFIX}OUT"]
    if f"{ENV_PREFIX}JOBS" in env:
        cfg["jobs"] = int(env[f"{ENV_PREFIX}JOBS"])
    if overrides:
        cfg = _merge(cfg, overrides)
    return normalize(cfg)


def _int_list(values, what: str) -> list[int]:
    if isinstance(values, str):
        values = [v for v in values.split(",") if v.strip()]
    try:
        return sorted({int(v) for v in values})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: expected a list of integers") from exc


def normalize(cfg: dict) -> dict:
    """Validate cross-stage consistency and resolve shorthands in place."""
    coll = cfg["collection"]
    dt = int(coll["interval_min"])
    if dt <= 0:
        raise ConfigError("collection.interval_min must be positive")
    coll["interval_min"] = dt
    coll["duration_min"] = int(coll["duration_min"])
    coll["requests_per_cycle"] = int(coll["requests_per_cycle"])
    if coll["duration_min"] <= 0 or coll["duration_min"] % dt:
        raise ConfigError(f"duration {coll['duration_min']} min is not a positive multiple of {dt}")
    if coll["requests_per_cycle"] < 1:
        raise ConfigError("collection.requests_per_cycle must be >= 1")
    RateLimit.parse(str(coll["rate_limit"]))

    feats = cfg["features"]
    feats["windows"] = _int_list(feats["windows"], "features.windows")
    feats["horizons"] = _int_list(feats["horizons"], "features.horizons")
    for W in feats["windows"]:
        if W <= 0 or W % dt:
            raise ConfigError(f"window {W} min is not a positive multiple of the {dt}-min interval")
    for h in feats["horizons"]:
        if h < 0 or h % dt:
            raise ConfigError(f"horizon {h} min is not a non-negative multiple of the {dt}-min interval")

    pred = cfg["predictor"]
    bad = [m for m in pred["models"] if m not in MODEL_KINDS]
    if bad:
        raise ConfigError(f"unknown model kinds {bad}")
    fsets = pred["feature_sets"]
    if fsets == "all":
        pred["feature_sets"] = ["+".join(f) for f in all_feature_sets()]
    else:
        pred["feature_sets"] = ["+".join(parse_feature_set(f)) for f in fsets]
    if pred["split"] not in ("pool", "row"):
        raise ConfigError("predictor.split must be 'pool' or 'row'")
    if pred["replay_model"] not in MODEL_KINDS:
        raise ConfigError(f"unknown predictor.replay_model {pred['replay_model']!r}")
    if int(pred["selection_horizon"]) not in feats["horizons"]:
        raise ConfigError("predictor.selection_horizon must be one of features.horizons")

    rep = cfg["replay"]
    rep["strategies"] = [Strategy.parse(s).value for s in rep["strategies"]]
    rep["horizons"] = _int_list(rep["horizons"], "replay.horizons")
    for h in rep["horizons"]:
        if h <= 0 or h % dt:
            raise ConfigError(f"replay horizon {h} min is not a positive multiple of the {dt}-min interval")
    if int(rep["permutations"]) < 1:
        raise ConfigError("replay.permutations must be >= 1")

    try:
        CostParams(**cfg["cost"]).validate()
    except TypeError as exc:
        raise ConfigError(f"cost: {exc}") from exc

    try:
        pools = scenario_from_dict(cfg["scenario"])
        validate_scenario(pools)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    cfg["seed"] = int(cfg["seed"])
    cfg["jobs"] = max(1, int(cfg["jobs"]))
    return cfg


def check_pipeline(cfg: dict) -> None:
    """Cross-stage checks that only matter when every stage runs together."""
    if cfg["predictor"]["replay_model"] not in cfg["predictor"]["models"]:
        raise ConfigError("predictor.replay_model must be one of predictor.models")
    if "predict" in cfg["replay"]["strategies"]:
        missing = [h for h in cfg["replay"]["horizons"] if h not in cfg["features"]["horizons"]]
        if missing:
            raise ConfigError(f"replay horizons {missing} have no trained model; add them to features.horizons")


def semantic_view(cfg: dict) -> dict:
    """Config with shorthands expanded and run-location keys dropped."""
    view = {k: copy.deepcopy(v) for k, v in cfg.items() if k not in NON_SEMANTIC}
    view["scenario"] = scenario_to_dict(scenario_from_dict(cfg["scenario"]))
    view["cost"] = CostParams(**cfg["cost"]).__dict__
    return view


def config_hash(cfg: dict) -> str:
    blob = json.dumps(semantic_view(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
