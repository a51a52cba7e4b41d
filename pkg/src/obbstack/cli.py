"""Command-line pipelines: train-meta, fuse, eval, analyze, simulate.

Exit codes: 0 success, 2 usage or configuration error, 3 data or contract
error, 4 numerical failure. Outputs are byte-deterministic for a fixed
seed regardless of --threads; the effective configuration and input
hashes are serialized next to every command's outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import jsonio
from .clustering import cluster_detections
from .errors import ConfigError, DataError, NumericalError
from .evaluation import EvalResult, evaluate
from .fusion import apply_score_floor, ensemble_nms, ensemble_stacking, ensemble_wbf
from .ingest import (
    DEFAULT_MIN_SCORE,
    DetectionRun,
    group_all,
    parse_dota_detections,
    parse_ground_truth,
    read_run_json,
    write_dota_detections,
    write_dota_ground_truth,
    write_run_json,
)
from .metalearner import (
    decompose_weights,
    fit,
    label_clusters,
    read_meta_json,
    score_correlation,
    write_meta_json,
)
from .synth import DetectorProfile, ScenarioConfig, run_benchmark


def _hash_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _hash_inputs(paths) -> str:
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for f in files:
            digest.update(str(f).encode("utf-8"))
            digest.update(f.read_bytes())
    return digest.hexdigest()


def _provenance(args, fields, input_paths) -> dict:
    # --threads is an execution detail, never part of provenance.
    config = {name: getattr(args, name) for name in fields}
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    return {
        "command": args.command,
        "config": config,
        "config_hash": _hash_text(jsonio.dumps(config)),
        "inputs_hash": _hash_inputs(input_paths),
    }


def _load_runs(paths, names):
    """Load DOTA directories or run-JSON files as an indexed ensemble."""
    if names and len(names) != len(paths):
        raise ConfigError(f"{len(names)} model names for {len(paths)} detection inputs")
    runs = []
    for i, path in enumerate(paths):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"detections path does not exist: {path}")
        index = i + 1
        if path.is_dir():
            name = names[i] if names else path.name
            runs.append(parse_dota_detections(path, name, index))
        else:
            run = read_run_json(path)
            name = names[i] if names else run.model_name
            runs.append(
                DetectionRun(
                    model_name=name,
                    model_index=index,
                    detections=[replace(d, model_index=index) for d in run.detections],
                )
            )
    return runs


def _load_ground_truth(path):
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"ground-truth directory does not exist: {path}")
    return parse_ground_truth(path)


def _parallel_groups(groups, fn, threads):
    if threads <= 1:
        return [fn(item) for item in groups]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, groups))


def _cluster_all(runs, iou_thresh, threads):
    groups = list(group_all(runs).values())
    batches = _parallel_groups(groups, lambda dets: cluster_detections(dets, iou_thresh), threads)
    return [cluster for batch in batches for cluster in batch]


def _format_table(header, rows) -> str:
    table = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for r, row in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    return "\n".join(lines) + "\n"


def _eval_table(results: dict[str, EvalResult]) -> str:
    categories = sorted({cat for res in results.values() for cat in res.per_category_ap})
    header = ["Method", *categories, "mAP"]
    rows = []
    for name, res in results.items():
        rows.append(
            [name]
            + [f"{100 * res.per_category_ap.get(cat, 0.0):.2f}" for cat in categories]
            + [f"{100 * res.mean_ap:.2f}"]
        )
    return _format_table(header, rows)


def cmd_train_meta(args) -> int:
    runs = _load_runs(args.dets, args.model_name)
    gt = _load_ground_truth(args.gt)
    clusters = _cluster_all(runs, args.iou_thresh, args.threads)
    labeled = label_clusters(clusters, gt, args.iou_label_thresh, len(runs), args.z_miss)
    learner = fit(labeled, [r.model_name for r in runs], z_miss=args.z_miss, lam=args.lam)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_meta_json(learner, out)
    report = {
        "provenance": _provenance(
            args,
            ["dets", "gt", "out", "iou_thresh", "iou_label_thresh", "z_miss", "lam", "min_score"],
            [*args.dets, args.gt],
        ),
        "models": learner.models,
        "weights": learner.weights,
        "intercept": learner.intercept,
        "n_clusters": learner.training_meta["n_clusters"],
        "n_positive": sum(lc.label for lc in labeled),
        "final_nll": learner.training_meta["final_nll"],
        "iterations": learner.training_meta["iterations"],
        "converged": learner.training_meta["converged"],
    }
    if learner.n_models == 1 and learner.weights[0] > 0:
        report["equivalent_temperature"] = 1.0 / learner.weights[0]
        report["equivalent_shift"] = learner.intercept
    jsonio.dump(report, out.with_suffix(out.suffix + ".report.json"))
    print(f"fitted {learner.n_models} weights on {report['n_clusters']} clusters "
          f"({report['n_positive']} positive)")
    for name, weight in zip(learner.models, learner.weights):
        print(f"  w[{name}] = {weight:.6f}")
    print(f"  intercept = {learner.intercept:.6f}")
    if "equivalent_temperature" in report:
        print(f"  equivalent temperature T = {report['equivalent_temperature']:.6f}")
    return 0


def _write_fused(run, out_dir: Path, fmt: str, method: str) -> None:
    if fmt in ("json", "both"):
        write_run_json(run, out_dir / f"{method}.json")
    if fmt in ("dota", "both"):
        write_dota_detections(run, out_dir / f"{method}_dota")


def cmd_fuse(args) -> int:
    runs = _load_runs(args.dets, args.model_name)
    learner = None
    if args.method == "stacking":
        if not args.meta:
            raise ConfigError("--meta is required for method=stacking")
        learner = read_meta_json(args.meta)
    elif args.meta:
        print(f"warning: --meta is ignored for method={args.method}", file=sys.stderr)

    n_input = sum(len(r.detections) for r in runs)
    if args.method == "stacking":
        fused = ensemble_stacking(runs, learner, args.iou_thresh, threads=args.threads)
    elif args.method == "nms":
        fused = ensemble_nms(runs, args.iou_thresh, threads=args.threads)
    else:
        fused = ensemble_wbf(runs, args.iou_thresh, threads=args.threads)
    n_clusters = len(fused.detections)
    fused = apply_score_floor(fused, args.min_score)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_fused(fused, out, args.format, args.method)
    inputs = [*args.dets] + ([args.meta] if args.meta else [])
    jsonio.dump(
        _provenance(
            args,
            ["dets", "meta", "out", "method", "iou_thresh", "min_score", "format"],
            inputs,
        ),
        out / "pipeline_config.json",
    )
    mean_size = n_input / n_clusters if n_clusters else 0.0
    print(f"{n_input} detections from {len(runs)} models -> {n_clusters} clusters "
          f"(mean size {mean_size:.2f}); {len(fused.detections)} kept after score floor")
    return 0


def cmd_eval(args) -> int:
    runs = _load_runs([args.run], [args.name] if args.name else None)
    gt = _load_ground_truth(args.gt)
    result = evaluate(runs[0], gt, args.match_iou, args.ap_mode, threads=args.threads)
    table = _eval_table({runs[0].model_name: result})
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "provenance": _provenance(
                args, ["run", "gt", "out", "match_iou", "ap_mode"], [args.run, args.gt]
            ),
            "ap_mode": result.ap_mode,
            "matching_iou": result.matching_iou,
            "per_category_ap": result.per_category_ap,
            "n_positive": result.n_positive,
            "map": result.mean_ap,
        }
        jsonio.dump(payload, out.with_suffix(".json") if out.suffix != ".json" else out)
        out_txt = out.with_suffix(".txt")
        out_txt.write_text(table, encoding="utf-8")
    return 0


def _corr_text(corr, names) -> str:
    header = ["model", *names]
    rows = []
    for i, name in enumerate(names):
        cells = [name]
        for j in range(len(names)):
            v = corr[i, j]
            cells.append("–" if math.isnan(v) else f"{v:+.3f}")
        rows.append(cells)
    return _format_table(header, rows)


def cmd_analyze(args) -> int:
    runs = _load_runs(args.dets, args.model_name)
    names = [r.model_name for r in runs]
    clusters = _cluster_all(runs, args.iou_thresh, args.threads)
    corr = score_correlation(runs, clusters)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "correlation.csv", "w", encoding="utf-8") as fh:
        fh.write("model," + ",".join(names) + "\n")
        for i, name in enumerate(names):
            cells = ["nan" if math.isnan(v) else jsonio.format_float(float(v)) for v in corr[i]]
            fh.write(name + "," + ",".join(cells) + "\n")
    corr_text = _corr_text(corr, names)
    (out / "correlation.txt").write_text(corr_text, encoding="utf-8")
    print(corr_text, end="")

    if args.meta:
        learner = read_meta_json(args.meta)
        if list(learner.models) != names:
            raise ConfigError(f"meta models {learner.models} do not match runs {names}")
        if not args.temperatures:
            raise ConfigError("--temperatures is required with --meta for the decomposition")
        temps = [float(t) for t in args.temperatures.split(",")]
        if len(temps) != len(names):
            raise ConfigError(f"{len(temps)} temperatures for {len(names)} models")
        r = [float(v) for v in args.redundancy.split(",")] if args.redundancy else [1.0] * len(names)
        if len(r) != len(names):
            raise ConfigError(f"{len(r)} redundancy factors for {len(names)} models")
        p = [1.0 / t for t in temps]
        g = decompose_weights(learner.weights, p, r)
        rows = [
            ["w", *[f"{v:.4f}" for v in learner.weights]],
            ["r", *[f"{v:.4f}" for v in r]],
            ["p", *[f"{v:.4f}" for v in p]],
            ["g", *[f"{v:.4f}" for v in g]],
        ]
        table = _format_table(["factor", *names], rows)
        (out / "decomposition.txt").write_text(table, encoding="utf-8")
        jsonio.dump(
            {"models": names, "w": learner.weights, "r": r, "p": p, "g": g},
            out / "decomposition.json",
        )
        print(table, end="")

    jsonio.dump(
        _provenance(
            args,
            ["dets", "meta", "out", "iou_thresh", "temperatures", "redundancy"],
            [*args.dets] + ([args.meta] if args.meta else []),
        ),
        out / "pipeline_config.json",
    )
    return 0


def _profile_from_dict(entry: dict, defaults: dict | None = None) -> DetectorProfile:
    known = {f for f in DetectorProfile.__dataclass_fields__}
    unknown = set(entry) - known
    if unknown:
        raise ConfigError(f"unknown profile fields: {sorted(unknown)}")
    merged = dict(defaults or {})
    merged.update(entry)
    if "name" not in merged:
        raise ConfigError("every profile needs a name")
    return DetectorProfile(**merged)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario config from JSON (or TOML when available)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario config does not exist: {path}")
    if path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            raise ConfigError("TOML configs need Python >= 3.11; use JSON") from None
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        data = jsonio.load(path)
    if not isinstance(data, dict):
        raise ConfigError("scenario config must be a mapping")

    if not data.get("profiles"):
        raise ConfigError("scenario config needs a 'profiles' list")

    registry: dict[str, DetectorProfile] = {}

    def build(entry):
        base = registry.get(entry.get("clone_of", ""))
        defaults = None
        if base is not None:
            defaults = {
                "recall": base.recall,
                "fp_rate": base.fp_rate,
                "loc_sigma": base.loc_sigma,
                "angle_sigma": base.angle_sigma,
                "skill": base.skill,
                "temperature": base.temperature,
                "export_threshold": base.export_threshold,
            }
        profile = _profile_from_dict(entry, defaults)
        registry[profile.name] = profile
        return profile

    base_profiles = [build(e) for e in data.get("base_profiles", [])]
    profiles = [build(e) for e in data["profiles"]]

    objects = data.get("objects_per_image", {"kind": "poisson", "mean": 6})
    if isinstance(objects, int):
        objects = {"kind": "fixed", "value": objects}
    config = ScenarioConfig(
        profiles=profiles,
        base_profiles=base_profiles,
        n_images=int(data.get("n_images", 200)),
        objects_per_image=objects,
        field_size=tuple(data.get("field_size", (1024.0, 1024.0))),
        categories=tuple(data.get("categories", ("vehicle", "vessel", "aircraft"))),
        val_fraction=float(data.get("val_fraction", 0.5)),
        seeds=[int(s) for s in data.get("seeds", [0])],
        clutter_rate=float(data.get("clutter_rate", 4.0)),
        iou_thresh=float(data.get("iou_thresh", 0.5)),
        iou_label_thresh=float(data.get("iou_label_thresh", 0.5)),
        z_miss=float(data.get("z_miss", -8.0)),
        lam=float(data.get("lambda", 1e-6)),
        min_score=float(data.get("min_score", DEFAULT_MIN_SCORE)),
        ap_mode=str(data.get("ap_mode", "voc12")),
        match_iou=float(data.get("match_iou", 0.5)),
    )
    config.validate()
    return config


def _benchmark_table(report) -> str:
    names = report["models"]
    header = ["run", *[f"seed {s['seed']}" for s in report["seeds"]], "mean"]
    rows = []
    for name in names:
        rows.append(
            [name]
            + [f"{100 * s['member_map'][name]:.2f}" for s in report["seeds"]]
            + [f"{100 * report['mean']['member_map'][name]:.2f}"]
        )
    for method in ("nms", "wbf", "stacking"):
        rows.append(
            [method]
            + [f"{100 * s['ensemble_map'][method]:.2f}" for s in report["seeds"]]
            + [f"{100 * report['mean']['ensemble_map'][method]:.2f}"]
        )
    weight_rows = [
        [f"w[{name}]"]
        + [f"{s['weights'][name]:.4f}" for s in report["seeds"]]
        + [f"{report['mean']['weights'][name]:.4f}"]
        for name in names
    ]
    return _format_table(header, rows + weight_rows)


def cmd_simulate(args) -> int:
    config = load_scenario(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
        config.validate()
    report, artifacts = run_benchmark(config, keep_artifacts=True, threads=args.threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for art in artifacts:
        seed_dir = out / f"seed_{art.scene.seed}"
        write_dota_ground_truth(art.gt_val, seed_dir / "gt_val")
        write_dota_ground_truth(art.gt_test, seed_dir / "gt_test")
        for split, runs in (("val", art.runs_val), ("test", art.runs_test)):
            for run in runs:
                if args.format in ("json", "both"):
                    (seed_dir / f"runs_{split}").mkdir(parents=True, exist_ok=True)
                    write_run_json(run, seed_dir / f"runs_{split}" / f"{run.model_name}.json")
                if args.format in ("dota", "both"):
                    write_dota_detections(run, seed_dir / f"runs_{split}_dota" / run.model_name)
        write_meta_json(art.learner, seed_dir / "meta.json")
        for method, run in art.fused.items():
            floored = apply_score_floor(run, config.min_score)
            _write_fused(floored, seed_dir, args.format, f"fused_{method}")

    table = _benchmark_table(report)
    (out / "report.txt").write_text(table, encoding="utf-8")
    jsonio.dump(
        {
            "provenance": _provenance(args, ["config", "out", "seed", "format"], [args.config]),
            **report,
        },
        out / "report.json",
    )
    jsonio.dump(
        _provenance(args, ["config", "out", "seed", "format"], [args.config]),
        out / "pipeline_config.json",
    )
    print(table, end="")
    return 0


def _add_threads_flag(sub):
    sub.add_argument("--threads", type=int, default=1,
                     help="worker threads for per-image stages (output is identical for any value)")


def _add_ensemble_flags(sub, with_label=False):
    sub.add_argument("--dets", action="append", required=True,
                     help="detection input (DOTA dir or run JSON); repeat per model")
    sub.add_argument("--model-name", action="append",
                     help="model name per --dets input (defaults to the path stem)")
    sub.add_argument("--iou-thresh", type=float, default=0.5)
    sub.add_argument("--min-score", type=float, default=DEFAULT_MIN_SCORE)
    _add_threads_flag(sub)
    if with_label:
        sub.add_argument("--iou-label-thresh", type=float, default=0.5)
        sub.add_argument("--z-miss", type=float, default=-8.0)
        sub.add_argument("--lambda", dest="lam", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obbstack",
        description="Stacking ensemble, NMS/WBF baselines, and mAP evaluation "
                    "for oriented-bounding-box detections.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train-meta", help="fit the stacking meta-learner on a validation split")
    _add_ensemble_flags(p, with_label=True)
    p.add_argument("--gt", required=True, help="validation ground-truth label directory")
    p.add_argument("--out", required=True, help="output meta-learner JSON path")
    p.set_defaults(func=cmd_train_meta)

    p = commands.add_parser("fuse", help="fuse detection runs into one ensemble run")
    _add_ensemble_flags(p)
    p.add_argument("--method", choices=("stacking", "nms", "wbf"), default="stacking")
    p.add_argument("--meta", help="meta-learner JSON (required for stacking)")
    p.add_argument("--format", choices=("dota", "json", "both"), default="both")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fuse)

    p = commands.add_parser("eval", help="score a detection run against ground truth")
    p.add_argument("--run", required=True, help="detection input (DOTA dir or run JSON)")
    p.add_argument("--name", help="name of the run for the report")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--match-iou", type=float, default=0.5)
    p.add_argument("--ap-mode", choices=("voc07", "voc12"), default="voc12")
    p.add_argument("--out", help="output path prefix for the JSON/text reports")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("analyze", help="score correlations and weight decomposition")
    _add_ensemble_flags(p)
    p.add_argument("--meta", help="meta-learner JSON for the weight decomposition")
    p.add_argument("--temperatures", help="comma-separated per-model temperatures (p = 1/T)")
    p.add_argument("--redundancy", help="comma-separated per-model redundancy factors (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = commands.add_parser("simulate", help="run the synthetic detector benchmark")
    p.add_argument("--config", required=True, help="scenario config (JSON, or TOML on 3.11+)")
    p.add_argument("--seed", type=int, help="override the scenario's seed list with one seed")
    p.add_argument("--format", choices=("dota", "json", "both"), default="both")
    p.add_argument("--out", required=True, help="output directory")
    _add_threads_flag(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
