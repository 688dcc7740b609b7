"""``si-forge`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error. Failures
print one line ``si-forge: error[<category>]: <message>`` to stderr.

Options are resolved flags > ``--config`` JSON file > defaults. The seed falls
back to ``$SI_FORGE_SEED`` and then to 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._io import sha256_file, write_json, write_jsonl
from .assets import (
    DEFAULT_ALPHA_THRESHOLD,
    AssetManifest,
    ingest_backgrounds,
    ingest_foregrounds,
    read_class_map,
    validate_manifest,
)
from .errors import DataError
from .sweep import DEFAULT_SEED, PRESETS, DatasetManifest, generate, preset_config, refilter

log = logging.getLogger("si_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
SEED_ENV = "SI_FORGE_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _provenance(seed: int | None, inputs: dict[str, str | os.PathLike | None]) -> dict:
    digests = {}
    for role, path in sorted(inputs.items()):
        if path is None:
            continue
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.jsonl"
        digests[role] = sha256_file(p)
    return {"tool": "si-forge", "version": __version__, "seed": seed, "inputs": digests}


def _emit(result: dict, out_dir: Path | None, name: str) -> None:
    if out_dir is not None:
        write_json(out_dir / name, result)
    print(json.dumps(result, sort_keys=True, indent=2))


# -- commands ---------------------------------------------------------------------

def cmd_ingest(args) -> int:
    out = Path(args.out)
    class_map = read_class_map(args.class_map)
    fgs, fg_errors = ingest_foregrounds(args.foregrounds, class_map, args.alpha_threshold, args.include_flagged)
    bgs, bg_errors = ingest_backgrounds(args.backgrounds, args.min_side)
    manifest = AssetManifest(fgs, bgs, args.alpha_threshold)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "assets.jsonl")
    errors = [{"source": "foreground", **e} for e in fg_errors] + [{"source": "background", **e} for e in bg_errors]
    write_jsonl(out / "ingest_errors.jsonl", errors)
    print(json.dumps({"foregrounds": len(fgs), "backgrounds": len(bgs), "errors": len(errors)}, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    findings = validate_manifest(AssetManifest.load(args.assets), args.min_side)
    for f in findings:
        print(json.dumps(f, sort_keys=True))
    return EXIT_OK if not findings else EXIT_DATA


def cmd_generate(args) -> int:
    manifest = AssetManifest.load(args.assets)
    config = preset_config(args.preset, seed=args.seed, canvas_px=args.canvas)
    overrides = {}
    if args.threshold is not None:
        overrides["in_image_threshold"] = None if args.threshold < 0 else args.threshold
    if args.backgrounds_per_object is not None:
        overrides["backgrounds_per_object"] = args.backgrounds_per_object
    if overrides:
        config = replace(config, **overrides)
    dataset = generate(manifest, config, args.out, jobs=args.jobs,
                       provenance=_provenance(args.seed, {"assets": args.assets}))
    print(json.dumps(dataset.counts, sort_keys=True))
    return EXIT_OK


def cmd_refilter(args) -> int:
    src = Path(args.manifest)
    src_dir = src if src.is_dir() else src.parent
    dataset = DatasetManifest.load(src)
    out = Path(args.out) if args.out else src_dir / f"refilter_{args.threshold:g}"
    filtered = refilter(dataset, args.threshold).rebase(src_dir.resolve(), out.resolve())
    filtered.save(out, _provenance(None, {"manifest": src}))
    print(json.dumps(filtered.counts, sort_keys=True))
    return EXIT_OK


def _number_or_matrix(value: str):
    from .report import read_matrix_csv

    try:
        return float(value), None
    except ValueError:
        m, rows, cols = read_matrix_csv(value)
        return m, (rows, cols)


def cmd_evaluate(args) -> int:
    from . import metrics as M
    from . import report as R

    out = R.ensure_dir(args.out) if args.out else None
    preds = M.read_predictions(args.predictions) if args.predictions else None
    inputs = {"predictions": args.predictions, "manifest": args.manifest, "groups": args.groups,
              "model_errors": args.model_errors, "baseline_errors": args.baseline_errors}
    result = {"metric": args.metric, "provenance": _provenance(None, inputs)}

    def need(value, flag):
        if value is None:
            raise UsageError(f"--metric {args.metric} requires {flag}")
        return value

    if args.metric == "top1":
        need(preds, "--predictions")
        if args.manifest:
            result["value"] = M.top1_accuracy(preds, DatasetManifest.load(args.manifest))
        else:
            result["value"] = M.anchor_accuracy(preds, M.read_frame_groups(need(args.groups, "--manifest or --groups")))
    elif args.metric == "pm-k":
        groups = M.read_frame_groups(need(args.groups, "--groups"))
        result["k"] = args.k
        result["value"] = M.pm_k_accuracy(need(preds, "--predictions"), groups, args.k)
        result["anchor_accuracy"] = M.anchor_accuracy(preds, groups)
    elif args.metric == "mce":
        model = M.read_corruption_errors(need(args.model_errors, "--model-errors"))
        base = M.read_corruption_errors(need(args.baseline_errors, "--baseline-errors"))
        result["value"] = M.mean_corruption_error(model, base)
    elif args.metric == "rer":
        base, labels = _number_or_matrix(need(args.err_base, "--err-base"))
        err, _ = _number_or_matrix(need(args.err, "--err"))
        value = M.relative_error_reduction(base, err)
        if labels is None:
            result["value"] = value
        else:
            path = need(out, "--out") / "relative_error_reduction.csv"
            R.write_matrix_csv(path, value, labels[0], labels[1])
            result["matrix"] = path.name
    elif args.metric == "location":
        dataset = DatasetManifest.load(need(args.manifest, "--manifest"))
        grid = M.location_heatmap(need(preds, "--predictions"), dataset)
        out = need(out, "--out")
        R.write_grid_csv(out / "location_grid.csv", grid)
        R.write_matrix_csv(out / "location_support.csv", grid.support, corner="fy\\fx")
        result["mean_accuracy"] = M.top1_accuracy(preds, dataset)
        result["grid"] = "location_grid.csv"
        if args.render:
            result["heatmap"] = R.render_heatmap(grid.grid, out / "location_grid.png", vmin=0.0, vmax=1.0)
    else:  # size / rotation profiles
        factor = {"size": "size_fraction", "rotation": "rotation_deg"}[args.metric]
        dataset = DatasetManifest.load(need(args.manifest, "--manifest"))
        profile = M.factor_profile(need(preds, "--predictions"), dataset, factor)
        out = need(out, "--out")
        R.write_profile_csv(out / f"{args.metric}_profile.csv", profile)
        result["profile"] = f"{args.metric}_profile.csv"
        if args.render:
            R.profile_figure([profile], [preds.model_id], out / f"{args.metric}_profile.png")
    _emit(result, out, f"evaluate_{args.metric}.json")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from . import meta
    from . import report as R

    table = meta.read_metrics_table(args.table, args.reference)
    out = R.ensure_dir(args.out)
    selected = [args.spearman, args.discriminability, args.residual_pca, args.residual_correlation]
    run_all = not any(selected)
    result = {"reference_metric": table.reference_metric, "n_models": table.n_models,
              "provenance": _provenance(args.seed, {"table": args.table})}
    metrics_subset = args.metrics.split(",") if args.metrics else None

    if args.spearman or run_all:
        names = metrics_subset or table.metric_names
        corr = meta.spearman_matrix(table, names)
        R.write_matrix_csv(out / "spearman.csv", corr, names, names, corner="metric")
        result["spearman"] = "spearman.csv"
        if args.render:
            R.render_heatmap(corr, out / "spearman.png", diverging=True, vmin=-1.0, vmax=1.0)

    if args.residual_correlation:
        if not (args.robustness and args.transfer):
            raise UsageError("--residual-correlation requires --robustness and --transfer")
        robust = args.robustness.split(",")
        result["residual_robustness_correlation"] = {
            "robustness_metrics": robust, "transfer_metric": args.transfer,
            "pearson": meta.residual_robustness_correlation(table, robust, args.transfer),
            "pearson_mean_robustness_vs_transfer": meta.pearson(
                table.columns(robust).mean(axis=1), table.column(args.transfer)),
        }

    if args.discriminability or run_all:
        entries = meta.discriminability_all(table, args.max_extras, args.bootstrap, args.seed,
                                            metrics=metrics_subset, jobs=args.jobs)
        entries.sort(key=lambda e: (-e.mean, e.feature_set))
        result["discriminability"] = {"bootstrap_n": args.bootstrap, "max_extras": args.max_extras,
                                      "entries": [e.to_dict() for e in entries]}
        rows = [[" + ".join(e.feature_set)] for e in entries]
        R.write_matrix_csv(out / "discriminability.csv", [[e.mean, e.sd] for e in entries] or np.empty((0, 2)),
                           [r[0] for r in rows], ["delta_mean", "delta_sd"], corner="feature_set")

    if args.residual_pca or run_all:
        res = meta.residual_pca(table, metrics_subset, args.components, args.permutations,
                                args.bootstrap, args.seed)
        result["residual_pca"] = res.to_dict()

    write_json(out / "analysis.json", result)
    done = [k for k in ("spearman", "residual_robustness_correlation", "discriminability", "residual_pca")
            if k in result]
    print(json.dumps({"analyses": done, "out": str(out / "analysis.json")}))
    return EXIT_OK


def cmd_report(args) -> int:
    from . import metrics as M
    from . import report as R

    out = R.ensure_dir(args.out)
    titles = args.labels.split(",") if args.labels else [Path(p).stem for p in args.inputs]
    if len(titles) != len(args.inputs):
        raise UsageError("--labels must name every input")
    doc = {"kind": args.kind, "labels": titles, "provenance": _provenance(
        None, {f"input_{i}": p for i, p in enumerate(args.inputs)}), "artifacts": {}}

    if args.kind == "location":
        grids = [R.read_grid_csv(p) for p in args.inputs]
        normalized = [M.normalize_p95(g) for g in grids]
        deltas = [M.delta_map(normalized[0], g) for g in normalized[1:]]
        for i, (t, g) in enumerate(zip(titles, normalized)):
            R.write_grid_csv(out / f"normalized_{i}_{t}.csv", g)
            doc["artifacts"][f"normalized_{i}_{t}.csv"] = R.render_heatmap(
                g.grid, out / f"normalized_{i}_{t}.png")
        for i, (t, d) in enumerate(zip(titles[1:], deltas), 1):
            R.write_grid_csv(out / f"delta_{i}_{t}.csv", d)
            doc["artifacts"][f"delta_{i}_{t}.csv"] = R.render_heatmap(
                d.grid, out / f"delta_{i}_{t}.png", diverging=True)
        R.location_figure([g.grid for g in normalized], [d.grid for d in deltas], titles, out / "location_report.png")
    else:
        profiles = [R.read_profile_csv(p) for p in args.inputs]
        normalized = [M.normalize_best(p) for p in profiles]
        deltas = [M.delta_map(normalized[0], p) for p in normalized[1:]]
        for i, (t, p) in enumerate(zip(titles, normalized)):
            R.write_profile_csv(out / f"normalized_{i}_{t}.csv", p)
        for i, (t, d) in enumerate(zip(titles[1:], deltas), 1):
            R.write_profile_csv(out / f"delta_{i}_{t}.csv", d)
        R.profile_figure(normalized, titles, out / "profile_report.png")
        doc["artifacts"]["profile_report.png"] = {}
    write_json(out / "report.json", doc)
    print(json.dumps({"kind": args.kind, "inputs": len(args.inputs), "out": str(out)}))
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="si-forge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"si-forge {__version__}")
    p.add_argument("--config", help="JSON file with option defaults (top-level and per command)")
    p.add_argument("--log-file", help="append timestamped log lines here")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True, jobs=False):
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if jobs:
            sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")

    sp = sub.add_parser("ingest", help="catalog foregrounds and backgrounds into assets.jsonl")
    sp.add_argument("--foregrounds", required=True)
    sp.add_argument("--backgrounds", required=True)
    sp.add_argument("--class-map", required=True)
    sp.add_argument("--alpha-threshold", type=int, default=DEFAULT_ALPHA_THRESHOLD)
    sp.add_argument("--min-side", type=int, default=224)
    sp.add_argument("--include-flagged", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("validate", help="check an asset manifest against its rasters")
    sp.add_argument("--assets", required=True)
    sp.add_argument("--min-side", type=int, default=None)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("generate", help="render a preset sweep")
    sp.add_argument("--assets", required=True)
    sp.add_argument("--preset", required=True, choices=PRESETS)
    sp.add_argument("--threshold", type=float, default=None,
                    help="in-image threshold override; negative disables filtering")
    sp.add_argument("--canvas", type=int, default=224)
    sp.add_argument("--backgrounds-per-object", type=int, default=None)
    sp.add_argument("--out", required=True)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("refilter", help="apply a stricter in-image threshold to a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--threshold", type=float, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_refilter)

    sp = sub.add_parser("evaluate", help="score one model's predictions")
    sp.add_argument("--metric", required=True, choices=["top1", "pm-k", "mce", "rer", "location", "size", "rotation"])
    sp.add_argument("--predictions")
    sp.add_argument("--manifest")
    sp.add_argument("--groups")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--model-errors")
    sp.add_argument("--baseline-errors")
    sp.add_argument("--err-base", help="number or matrix CSV")
    sp.add_argument("--err", help="number or matrix CSV")
    sp.add_argument("--render", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="meta-analysis of a models x metrics table")
    sp.add_argument("--table", required=True)
    sp.add_argument("--reference", help="reference metric column (default: first metric)")
    sp.add_argument("--metrics", help="comma-separated subset of metrics to analyze")
    sp.add_argument("--spearman", action="store_true")
    sp.add_argument("--discriminability", action="store_true")
    sp.add_argument("--max-extras", type=int, default=1, choices=[1, 2])
    sp.add_argument("--residual-pca", action="store_true")
    sp.add_argument("--components", type=int, default=4)
    sp.add_argument("--residual-correlation", action="store_true")
    sp.add_argument("--robustness", help="comma-separated robustness metrics")
    sp.add_argument("--transfer", help="transfer score column")
    sp.add_argument("--bootstrap", type=int, default=1000)
    sp.add_argument("--permutations", type=int, default=1000)
    sp.add_argument("--render", action="store_true")
    sp.add_argument("--out", required=True)
    common(sp, jobs=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="normalize grids/profiles, compute deltas, render figures")
    sp.add_argument("--kind", required=True, choices=["location", "profile"])
    sp.add_argument("--inputs", nargs="+", required=True, help="grid or profile CSVs; the first is the reference")
    sp.add_argument("--labels", help="comma-separated names for the inputs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def _apply_config(parser: _Parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        defaults = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
        defaults.update(cfg.get(args.command, {}))
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(k.replace("-", "_") for k in defaults if k.replace("-", "_") not in known)
        if unknown:
            raise UsageError(f"config sets unknown option(s) for {args.command}: {', '.join(unknown)}")
        subparser.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})
        args = parser.parse_args(argv)
    if hasattr(args, "seed") and args.seed is None:
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else DEFAULT_SEED
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if hasattr(args, "jobs") and args.jobs is None:
        args.jobs = os.cpu_count() or 1
    return args


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"si-forge: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    handler = None
    if args.log_file:
        handler = logging.FileHandler(args.log_file)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
        log.info("run %s", " ".join(sys.argv[1:] if argv is None else argv))
    try:
        return _dispatch(args)
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


def _dispatch(args) -> int:
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"si-forge: error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, KeyError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"si-forge: error[data]: {msg}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"si-forge: error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
