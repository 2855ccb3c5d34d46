"""``spotprobe`` command-line entry point.

Exit codes: 0 success, 1 invalid input or config, 2 runtime failure,
3 a ``check`` threshold was not met.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import (
    AnalysisError,
    CostParams,
    co_interrupt_cdf,
    compare,
    cost_model,
    feature_fidelity_records,
    write_fidelity_csv,
)
from .collector import CollectorConfigError, LeakError, ProviderError, RateLimit, SimulatedProvider, collect_run
from .config import ConfigError, load_config
from .core import BUNDLE_FILES, Kind, TraceError, export_csv, read_trace, write_trace
from .features import FeatureError, featurize, running_as_cycles
from .pipeline import StageError, run_pipeline
from .predictor import (
    Model,
    ModelSpec,
    PredictorError,
    evaluate_matrix,
    train_split_model,
    write_results_csv,
)
from .replay import ReplayError, gen_workload, load_queries_csv, run_experiment, summarize
from .simulator import run_scenario, scenario_from_dict

log = logging.getLogger("spotprobe")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

VALIDATION_ERRORS = (ConfigError, TraceError, FeatureError, PredictorError, ReplayError,
                     CollectorConfigError, AnalysisError, ValueError, KeyError, FileNotFoundError)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", help="JSON run config; flags override its values")
    g.add_argument("--seed", type=int, help="master seed (config: seed)")
    g.add_argument("--out", help="output file or directory (config: out_dir)")
    g.add_argument("--jobs", type=int, help="worker processes (config: jobs)")
    g.add_argument("-v", "--verbose", action="count", default=0)


def _collection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pools", help="scenario JSON file (config: scenario)")
    p.add_argument("--interval-min", type=int, help="cycle length (config: collection.interval_min)")
    p.add_argument("--requests-per-cycle", type=int, help="N (config: collection.requests_per_cycle)")
    p.add_argument("--duration-min", type=int, help="(config: collection.duration_min)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spotprobe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate pools and write a trace bundle")
    _collection_flags(p)
    _common(p)

    p = sub.add_parser("collect", help="run the probing collector against the simulated provider")
    _collection_flags(p)
    p.add_argument("--rate-limit", help="requests/window_seconds, e.g. 470/180 (config: collection.rate_limit)")
    _common(p)

    p = sub.add_parser("features", help="compute SR/UR/CUT and horizon labels")
    p.add_argument("--cycles", required=True, help="cycle JSONL (or running JSONL with --from-running)")
    p.add_argument("--running", help="running JSONL used for labels")
    p.add_argument("--window-min", type=int, help="W (config: features.windows[0])")
    p.add_argument("--horizons", help="comma list of h minutes (config: features.horizons)")
    p.add_argument("--from-running", action="store_true",
                   help="treat the --cycles file as running records (actual-availability features)")
    p.add_argument("--csv", help="also export a CSV copy")
    _common(p)

    p = sub.add_parser("evaluate", help="train/test matrix over models, feature sets, windows, horizons")
    p.add_argument("--features", action="append", required=True, help="feature JSONL (repeat per window)")
    p.add_argument("--models", help="comma list: lr,boost (config: predictor.models)")
    p.add_argument("--feature-sets", help="'all' or comma list like sr,sr+ur+cut (config: predictor.feature_sets)")
    p.add_argument("--horizons", help="comma list (config: features.horizons)")
    p.add_argument("--split", choices=("pool", "row"), help="(config: predictor.split)")
    _common(p)

    p = sub.add_parser("train", help="train one model on the training pools and save it")
    p.add_argument("--features", required=True, help="feature JSONL")
    p.add_argument("--model", dest="kind", default="boost", choices=("lr", "boost"))
    p.add_argument("--feature-set", default="sr+ur+cut")
    p.add_argument("--horizon-min", type=int, required=True)
    p.add_argument("--split", choices=("pool", "row"), help="(config: predictor.split)")
    _common(p)

    p = sub.add_parser("replay", help="replay a query workload over a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--queries", help="'gen' or a CSV of durations (config: replay.queries)")
    p.add_argument("--strategies", help="comma list of ar,sjf,predict (config: replay.strategies)")
    p.add_argument("--horizons", help="comma list (config: replay.horizons)")
    p.add_argument("--permutations", type=int, help="(config: replay.permutations)")
    p.add_argument("--model", action="append", default=[], help="model JSON file or directory (repeatable)")
    _common(p)

    p = sub.add_parser("analyze", help="comparison, co-interruption, fidelity and cost analyses")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("compare", help="probe successes vs running counts")
    a.add_argument("--cycles", required=True)
    a.add_argument("--running", required=True)
    _common(a)
    a = asub.add_parser("proximity", help="co-interruption proximity CDF")
    a.add_argument("--interruptions", required=True)
    a.add_argument("--max-seconds", type=int, default=600)
    _common(a)
    a = asub.add_parser("fidelity", help="per-pool Pearson correlation of probe vs actual features")
    a.add_argument("--bundle", required=True)
    a.add_argument("--window-min", type=int, help="(config: features.windows[0])")
    _common(a)
    a = asub.add_parser("cost", help="24-hour monitoring cost comparison")
    for name, fld in CostParams.__dataclass_fields__.items():
        a.add_argument("--" + name.replace("_", "-"), type=type(fld.default), help=f"(config: cost.{name})")
    _common(a)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    _common(p)

    p = sub.add_parser("check", help="verify a pipeline output against the reference thresholds")
    p.add_argument("run_dir")
    _common(p)
    return ap


def _overrides(args) -> dict:
    """Map flags onto config keys; unset flags leave the config untouched."""
    o: dict = {}

    def put(path: str, value):
        if value is None:
            return
        d = o
        *head, last = path.split(".")
        for k in head:
            d = d.setdefault(k, {})
        d[last] = value

    put("seed", args.seed)
    put("out_dir", args.out)
    put("jobs", args.jobs)
    g = vars(args)
    if g.get("pools"):
        put("scenario", json.loads(Path(args.pools).read_text(encoding="utf-8")))
    put("collection.interval_min", g.get("interval_min"))
    put("collection.requests_per_cycle", g.get("requests_per_cycle"))
    put("collection.duration_min", g.get("duration_min"))
    put("collection.rate_limit", g.get("rate_limit"))
    if g.get("window_min") is not None:
        put("features.windows", [g["window_min"]])
    if g.get("horizons") is not None:
        key = "replay.horizons" if args.command == "replay" else "features.horizons"
        put(key, _csv_list(g["horizons"]))
    if g.get("models"):
        put("predictor.models", _csv_list(g["models"]))
    if g.get("feature_sets"):
        fs = g["feature_sets"]
        put("predictor.feature_sets", "all" if fs == "all" else _csv_list(fs))
    put("predictor.split", g.get("split"))
    put("replay.queries", g.get("queries"))
    if g.get("strategies"):
        put("replay.strategies", _csv_list(g["strategies"]))
    put("replay.permutations", g.get("permutations"))
    if args.command == "analyze" and args.analysis == "cost":
        for name in CostParams.__dataclass_fields__:
            put(f"cost.{name}", g.get(name))
    return o


def _config(args) -> dict:
    return load_config(args.config, _overrides(args))


def _out(args, cfg: dict, default: str) -> Path:
    return Path(args.out) if args.out else Path(cfg["out_dir"]) / default


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_simulate(args, cfg) -> int:
    c = cfg["collection"]
    bundle = run_scenario(scenario_from_dict(cfg["scenario"]), c["duration_min"], c["interval_min"],
                          c["requests_per_cycle"], cfg["seed"])
    out = Path(args.out or cfg["out_dir"])
    bundle.write(out)
    log.info("wrote %d cycle records and %d interruptions to %s", len(bundle.cycles),
             len(bundle.interruptions), out)
    return EXIT_OK


def cmd_collect(args, cfg) -> int:
    c = cfg["collection"]
    pools = scenario_from_dict(cfg["scenario"])
    port = SimulatedProvider(pools, c["interval_min"], cfg["seed"])
    out = Path(args.out or cfg["out_dir"])
    bundle = collect_run(port, [p.pool for p in pools], c["duration_min"], c["interval_min"],
                         c["requests_per_cycle"], RateLimit.parse(str(c["rate_limit"])), out=out)
    log.info("collected %d probes (%d cancels) into %s", len(bundle.probes), port.cancels, out)
    return EXIT_OK


def cmd_features(args, cfg) -> int:
    W = cfg["features"]["windows"][0]
    if args.from_running:
        running = read_trace(args.cycles, Kind.RUNNING)
        dt = cfg["collection"]["interval_min"]
        vecs = featurize(running_as_cycles(running, dt), None, W, ())
    else:
        cycles = read_trace(args.cycles, Kind.CYCLE)
        running = read_trace(args.running, Kind.RUNNING) if args.running else None
        horizons = cfg["features"]["horizons"] if running is not None else ()
        vecs = featurize(cycles, running, W, horizons)
    out = _out(args, cfg, f"features_W{W}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(vecs, out)
    if args.csv:
        export_csv(vecs, args.csv)
    log.info("wrote %d feature vectors to %s", len(vecs), out)
    return EXIT_OK


def _load_features_by_window(paths) -> dict:
    by_w: dict = {}
    for path in paths:
        vecs = read_trace(path, Kind.FEATURE)
        ws = {v.window_minutes for v in vecs}
        if len(ws) != 1:
            raise FeatureError(f"{path}: expected one window, found {sorted(ws)}")
        w = ws.pop()
        if w in by_w:
            raise FeatureError(f"{path}: window {w} given twice")
        by_w[w] = vecs
    return by_w


def cmd_evaluate(args, cfg) -> int:
    pred = cfg["predictor"]
    rows = evaluate_matrix(_load_features_by_window(args.features), pred["models"], pred["feature_sets"],
                           cfg["features"]["horizons"], cfg["seed"], pred["split"], pred["hyperparams"],
                           cfg["jobs"])
    out = _out(args, cfg, "evaluation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(rows, out)
    log.info("wrote %d result rows to %s", len(rows), out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    vecs = read_trace(args.features, Kind.FEATURE)
    if not vecs:
        raise FeatureError(f"{args.features}: no feature vectors")
    W = vecs[0].window_minutes
    spec = ModelSpec(kind=args.kind, feature_set=args.feature_set, window_minutes=W,
                     horizon_minutes=args.horizon_min, **cfg["predictor"]["hyperparams"].get(args.kind, {}))
    model = train_split_model(vecs, spec, cfg["seed"], cfg["predictor"]["split"])
    out = _out(args, cfg, f"{args.kind}_W{W}_h{args.horizon_min}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    log.info("saved model to %s", out)
    return EXIT_OK


def _load_models(paths, kind: str) -> dict:
    files: list[Path] = []
    for p in map(Path, paths):
        files += sorted(p.glob("*.json")) if p.is_dir() else [p]
    models = [Model.load(f) for f in files]
    by_h: dict = {}
    for m in models:
        by_h.setdefault(m.spec.horizon_minutes, []).append(m)
    out = {}
    for h, ms in by_h.items():
        if len(ms) > 1:
            ms = [m for m in ms if m.spec.kind == kind] or ms
        if len(ms) > 1:
            raise ReplayError(f"{len(ms)} candidate models for horizon {h}; pass one file per horizon")
        out[h] = ms[0]
    return out


def cmd_replay(args, cfg) -> int:
    rep = cfg["replay"]
    models = _load_models(args.model, cfg["predictor"]["replay_model"]) if args.model else {}
    horizons = rep["horizons"]
    if args.horizons is None and models:
        horizons = sorted(models)
    if rep["queries"] == "gen":
        wl = rep["workload"]
        queries = gen_workload(int(wl["count"]), float(wl["total_minutes"]), float(wl["min_s"]),
                               float(wl["max_s"]), cfg["seed"])
    else:
        queries = load_queries_csv(rep["queries"])
    out = _out(args, cfg, "replay.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = run_experiment(args.bundle, rep["strategies"], horizons, int(rep["permutations"]), cfg["seed"],
                          models, queries, out=out)
    _print({f"{s}:h{h}": agg for (s, h), agg in sorted(summarize(rows).items())})
    return EXIT_OK


def cmd_analyze(args, cfg) -> int:
    which = args.analysis
    if which == "compare":
        res = compare(args.cycles, args.running).as_dict()
        if args.out:
            Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _print(res)
    elif which == "proximity":
        cdf = co_interrupt_cdf(args.interruptions)
        out = _out(args, cfg, "proximity_cdf.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        lines = ["proximity_s,cdf"] + [f"{s},{round(f, 9)}" for s, f in cdf.points(args.max_seconds)]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _print({"qualifying_events": len(cdf.proximities), "cdf_60s": cdf.at(60), "cdf_180s": cdf.at(180)})
    elif which == "fidelity":
        W = cfg["features"]["windows"][0]
        bundle = Path(args.bundle)
        cycles = read_trace(bundle / BUNDLE_FILES[Kind.CYCLE], Kind.CYCLE)
        running = read_trace(bundle / BUNDLE_FILES[Kind.RUNNING], Kind.RUNNING)
        dt = cycles[0].interval_minutes if cycles else cfg["collection"]["interval_min"]
        res = feature_fidelity_records(featurize(cycles, None, W, ()),
                                       featurize(running_as_cycles(running, dt), None, W, ()))
        out = _out(args, cfg, f"fidelity_W{W}.csv")
        out.parent.mkdir(parents=True, exist_ok=True)
        write_fidelity_csv(res, out)
        _print({f: res.median(f) for f in ("sr", "ur", "cut")})
    else:
        res = cost_model(CostParams(**cfg["cost"])).as_dict()
        if args.out:
            Path(args.out).write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _print(res)
    return EXIT_OK


def cmd_pipeline(args, cfg) -> int:
    res = run_pipeline(cfg)
    log.info("pipeline finished; config hash %s", res.manifest["config_hash"])
    return EXIT_OK


# thresholds on summary.json of a reference run
CHECKS = {
    "compare.actual_lt_pct <= 1": lambda s: s["compare"]["actual_lt_pct"] <= 1.0,
    "5 <= compare.actual_gt_pct <= 30": lambda s: 5.0 <= s["compare"]["actual_gt_pct"] <= 30.0,
    "proximity cdf(60s) >= 0.80": lambda s: s["proximity"]["cdf_60s"] >= 0.80,
    "proximity cdf(180s) >= 0.87": lambda s: s["proximity"]["cdf_180s"] >= 0.87,
    "continuous/ddd >= 100": lambda s: s["cost"]["continuous_over_ddd"] >= 100,
    "periodic/ddd > 1": lambda s: s["cost"]["periodic_over_ddd"] > 1,
    "boost sr+ur+cut >= lr sr at h=15,30,60": lambda s: all(
        s["evaluation"][f"boost:sr+ur+cut:h{h}"] >= s["evaluation"][f"lr:sr:h{h}"] for h in (15, 30, 60)),
    "boost f1(h=3) >= f1(h=60)": lambda s: (
        s["evaluation"]["boost:sr+ur+cut:h3"] >= s["evaluation"]["boost:sr+ur+cut:h60"]),
    "predict(h=15) lost <= 0.85 x ar lost": lambda s: (
        s["replay"]["predict:h15"]["lost_seconds"] <= 0.85 * s["replay"]["ar:h0"]["lost_seconds"]),
    "predict idle(h=15) >= idle(h=3)": lambda s: (
        s["replay"]["predict:h15"]["idle_seconds"] >= s["replay"]["predict:h3"]["idle_seconds"]),
}


def cmd_check(args, cfg) -> int:
    summary = json.loads((Path(args.run_dir) / "summary.json").read_text(encoding="utf-8"))
    failed = 0
    for name, fn in CHECKS.items():
        try:
            ok = bool(fn(summary))
        except KeyError:
            ok = False
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_CHECK if failed else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "collect": cmd_collect, "features": cmd_features,
            "evaluate": cmd_evaluate, "train": cmd_train, "replay": cmd_replay,
            "analyze": cmd_analyze, "pipeline": cmd_pipeline, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except VALIDATION_ERRORS as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LeakError, ProviderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
