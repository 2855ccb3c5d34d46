"""End-to-end pipeline: simulate, featurize, evaluate, train, replay, analyze.

Every artifact lands under the run's output directory together with a
``manifest.json`` that records the config hash, the seed and a SHA-256 of
each file.  Nothing time-dependent is written, so identical configs give
byte-identical directories.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import traceback
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .analysis import (
    CostParams,
    co_interrupt_cdf_records,
    compare_records,
    cost_model,
    feature_fidelity_records,
    write_fidelity_csv,
)
from .collector import RateLimit, SimulatedProvider, collect_run
from .config import check_pipeline, config_hash, semantic_view
from .core import export_csv, write_trace
from .features import featurize, running_as_cycles
from .predictor import (
    ModelSpec,
    PredictorError,
    best_windows,
    evaluate_matrix,
    train_split_model,
    write_results_csv,
)
from .replay import gen_workload, load_queries_csv, run_experiment, summarize
from .simulator import run_scenario, scenario_from_dict

log = logging.getLogger(__name__)

STAGES = ("simulate", "features", "evaluate", "train", "replay", "analyze")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class PipelineResult:
    out_dir: Path
    manifest: dict
    summary: dict


def simulate_stage(cfg: dict, bundle_dir: Path):
    coll = cfg["collection"]
    pools = scenario_from_dict(cfg["scenario"])
    if coll["use_collector"]:
        port = SimulatedProvider(pools, coll["interval_min"], cfg["seed"])
        return collect_run(port, [p.pool for p in pools], coll["duration_min"], coll["interval_min"],
                           coll["requests_per_cycle"], RateLimit.parse(str(coll["rate_limit"])),
                           out=bundle_dir)
    bundle = run_scenario(pools, coll["duration_min"], coll["interval_min"],
                          coll["requests_per_cycle"], cfg["seed"])
    bundle.write(bundle_dir)
    return bundle


def run_pipeline(cfg: dict, out_dir: str | Path | None = None) -> PipelineResult:
    """Run every stage; on failure keep partial output and write ``failed/``."""
    check_pipeline(cfg)
    out = Path(out_dir or cfg["out_dir"])
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    seed = cfg["seed"]
    dt = cfg["collection"]["interval_min"]
    summary: dict = {}
    state: dict = {}

    def stage_simulate():
        state["bundle"] = simulate_stage(cfg, out / "bundle")

    def stage_features():
        b = state["bundle"]
        fdir = out / "features"
        fdir.mkdir()
        horizons = cfg["features"]["horizons"]
        actual_cycles = running_as_cycles(b.running, dt)
        state["vectors"] = {}
        state["actual"] = {}
        for W in cfg["features"]["windows"]:
            vecs = featurize(b.cycles, b.running, W, horizons)
            write_trace(vecs, fdir / f"ddd_W{W}.jsonl")
            export_csv(vecs, fdir / f"ddd_W{W}.csv")
            act = featurize(actual_cycles, None, W, ())
            write_trace(act, fdir / f"actual_W{W}.jsonl")
            state["vectors"][W] = vecs
            state["actual"][W] = act

    def stage_evaluate():
        pred = cfg["predictor"]
        rows = evaluate_matrix(state["vectors"], pred["models"], pred["feature_sets"],
                               cfg["features"]["horizons"], seed, pred["split"],
                               pred["hyperparams"], cfg["jobs"])
        write_results_csv(rows, out / "evaluation.csv")
        state["best_w"] = best_windows(rows, pred["selection_horizon"])
        summary["best_window"] = state["best_w"]
        summary["evaluation"] = {
            f"{r.model}:{r.features}:h{r.horizon_min}": r.f1_macro_test
            for r in rows if r.window_min == state["best_w"].get(r.model)
        }

    def stage_train():
        pred = cfg["predictor"]
        mdir = out / "models"
        mdir.mkdir()
        full = ("sr", "ur", "cut")
        state["models"] = {}
        for kind in pred["models"]:
            W = state["best_w"].get(kind, cfg["features"]["windows"][0])
            for h in cfg["features"]["horizons"]:
                spec = ModelSpec(kind=kind, feature_set=full, window_minutes=W, horizon_minutes=h,
                                 **pred["hyperparams"].get(kind, {}))
                try:
                    model = train_split_model(state["vectors"][W], spec, seed, pred["split"])
                except PredictorError as exc:
                    log.warning("no %s model for h=%d: %s", kind, h, exc)
                    summary.setdefault("skipped_models", []).append(f"{kind}:h{h}")
                    continue
                model.save(mdir / f"{kind}_W{W}_h{h}.json")
                state["models"][(kind, h)] = model

    def stage_replay():
        rep = cfg["replay"]
        wl = rep["workload"]
        if rep["queries"] == "gen":
            queries = gen_workload(int(wl["count"]), float(wl["total_minutes"]), float(wl["min_s"]),
                                   float(wl["max_s"]), seed)
        else:
            queries = load_queries_csv(rep["queries"])
        kind = cfg["predictor"]["replay_model"]
        models = {h: state["models"][(kind, h)] for h in rep["horizons"] if (kind, h) in state["models"]}
        horizons = [h for h in rep["horizons"] if h in models]
        strategies = rep["strategies"]
        if "predict" in strategies and not horizons:
            log.warning("no %s models for the replay horizons; dropping the predict strategy", kind)
            strategies = [s for s in strategies if s != "predict"]
        rows = run_experiment(out / "bundle", strategies, horizons, int(rep["permutations"]),
                              seed, models, queries, out=out / "replay.csv")
        summary["replay"] = {f"{s}:h{h}": {k: round(v, 6) for k, v in agg.items()}
                             for (s, h), agg in sorted(summarize(rows).items())}

    def stage_analyze():
        b = state["bundle"]
        adir = out / "analysis"
        adir.mkdir()
        counts = compare_records(b.cycles, b.running)
        _dump_json(counts.as_dict(), adir / "compare.json")
        cdf = co_interrupt_cdf_records(b.interruptions)
        with (adir / "proximity_cdf.csv").open("w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["proximity_s", "cdf"])
            for s, f in cdf.points(max_seconds=600):
                w.writerow([s, round(f, 9)])
        fidelity = {}
        for W in cfg["features"]["windows"]:
            fid = feature_fidelity_records(state["vectors"][W], state["actual"][W])
            write_fidelity_csv(fid, adir / f"fidelity_W{W}.csv")
            fidelity[f"W{W}"] = {f: fid.median(f) for f in ("sr", "ur", "cut")}
        cost = cost_model(CostParams(**cfg["cost"]))
        _dump_json(cost.as_dict(), adir / "cost.json")
        summary["compare"] = counts.as_dict()
        summary["proximity"] = {"events": len(b.interruptions), "qualifying": len(cdf.proximities),
                                "cdf_60s": cdf.at(60), "cdf_180s": cdf.at(180)}
        summary["fidelity_median"] = fidelity
        summary["cost"] = cost.as_dict()

    steps = dict(zip(STAGES, (stage_simulate, stage_features, stage_evaluate, stage_train,
                              stage_replay, stage_analyze)))
    for name in STAGES:
        log.info("stage %s", name)
        try:
            steps[name]()
        except Exception as exc:  # noqa: BLE001 - reported with stage context
            fdir = out / "failed"
            fdir.mkdir(exist_ok=True)
            (fdir / "stage.txt").write_text(
                f"{name}\n{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}", encoding="utf-8")
            raise StageError(name, exc) from exc

    _dump_json(summary, out / "summary.json")
    manifest = {
        "tool": "spotprobe",
        "version": __version__,
        "seed": seed,
        "config_hash": config_hash(cfg),
        "config": semantic_view(cfg),
        "stages": list(STAGES),
        "files": {str(p.relative_to(out)): _sha256(p)
                  for p in sorted(out.rglob("*")) if p.is_file()},
    }
    _dump_json(manifest, out / "manifest.json")
    return PipelineResult(out, manifest, summary)
