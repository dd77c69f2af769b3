"""Command line: ``provsight <subcommand> ...`` (also ``python -m provsight``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

from .pipeline import (
    OUTPUT_ROOT_ENV,
    RunConfig,
    StageError,
    analyze_distance,
    distance_point,
    divergence_ensemble,
    load_graph,
    run_pipeline,
    sweep_idmap,
    write_rows,
    write_timing,
)
from .tracegen import ATTACKS, FP_ARCHETYPES, PROFILES, ScenarioSpec, generate

log = logging.getLogger("provsight")


def _threshold(text: str) -> float | str:
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threshold must be 'auto' or a number, got {text!r}") from None


def _csv_list(choices):
    def parse(text: str) -> tuple[str, ...]:
        items = tuple(x for x in text.split(",") if x)
        for x in items:
            if x not in choices:
                raise argparse.ArgumentTypeError(f"{x!r} is not one of {', '.join(choices)}")
        return items
    return parse


def _cap(text: str) -> int | None:
    if text in ("none", "inf"):
        return None
    return int(text)


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--days", type=int, default=1, help="test days")
    p.add_argument("--train-days", type=int, default=1)
    p.add_argument("--host-profile", choices=PROFILES, default="stable")
    p.add_argument("--attacks", type=_csv_list(ATTACKS), default=("mining",), help="comma separated")
    p.add_argument("--fp-archetypes", type=_csv_list(FP_ARCHETYPES), default=(), help="comma separated")
    p.add_argument("--scale", type=int, default=20_000, help="approximate events per day")
    p.add_argument("--divergence", type=float, default=1.0)
    p.add_argument("--pre-deployment", action="store_true")
    p.add_argument("--imbalance", type=float, default=0.0)


def _spec_from(args) -> ScenarioSpec:
    return ScenarioSpec(seed=args.seed, days=args.days, train_days=args.train_days, host_profile=args.host_profile,
                        attacks=args.attacks, fp_archetypes=args.fp_archetypes, scale=args.scale,
                        divergence=args.divergence, pre_deployment=args.pre_deployment, imbalance=args.imbalance)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--idmap", choices=["default", "1", "2", "3", "4", "5"], default="default")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--cap", type=_cap, default=100, help="per-node edge cap, or 'none'")


def _out(args) -> str:
    return args.out or os.environ.get(OUTPUT_ROOT_ENV, "runs")


# --- subcommands -------------------------------------------------------------------------


def cmd_gen_traces(args) -> int:
    spec = ScenarioSpec.from_json(json.load(open(args.config))) if args.config else _spec_from(args)
    out = _out(args)
    gen = generate(spec, out, compress=args.gzip)
    for name, path in sorted(gen.paths.items()):
        print(f"{name}\t{path}")
    print(f"manifest\t{gen.manifest_path}")
    return 0


def cmd_build_graph(args) -> int:
    from .graph import export_csv, graph_stats

    g = load_graph(args.trace, args.idmap)
    stats = graph_stats(g)
    print(json.dumps({"nodes": stats.node_count, "edges": stats.edge_count, "entities": stats.entity_count,
                      "per_kind": stats.per_kind, "collisions": len(g.collisions)}, sort_keys=True))
    if args.out:
        nodes, edges = export_csv(g, args.out)
        print(f"nodes\t{nodes}\nedges\t{edges}")
    return 0


def cmd_detect(args) -> int:
    from .detector import detect, train, write_verdicts
    from .features import Universe, type_vectors

    timings = []
    t = time.perf_counter()
    g_train = load_graph(args.train, args.idmap)
    timings.append(("build-graph:train", time.perf_counter() - t))
    t = time.perf_counter()
    model = train(g_train, args.k, args.cap)
    timings.append(("train", time.perf_counter() - t))
    t = time.perf_counter()
    g_test = load_graph(args.test, args.idmap)
    timings.append(("build-graph:test", time.perf_counter() - t))
    threshold = model.auto_threshold(args.percentile) if args.threshold == "auto" else args.threshold
    t = time.perf_counter()
    verdicts = detect(model, g_test, threshold)
    timings.append(("detect", time.perf_counter() - t))
    write_verdicts(args.out, verdicts, g_test.entity_of)
    alerts = sum(v.alerted for v in verdicts)
    print(f"threshold\t{threshold:.6g}\nnodes\t{len(verdicts)}\nalerts\t{alerts}\nverdicts\t{args.out}")
    if args.features:
        universe = Universe.from_graphs(g_test).extended(model.universe)
        mat = type_vectors(g_test, universe, args.k, args.cap)
        with open(args.features, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["uuid", *universe.names()])
            for uuid, row in zip(g_test.uuids.tolist(), mat):
                w.writerow([f"{uuid:016x}", *row.tolist()])
    if args.timing:
        write_timing(args.timing, timings, {"events": g_test.edge_count})
    return 0


def cmd_reduce_fp(args) -> int:
    from .detector import read_verdicts, write_verdicts
    from .events import iter_trace_file
    from .fp_reduction import reduce_false_positives, write_reduction

    verdicts, entity_of = read_verdicts(args.alerts)
    g = load_graph([args.trace], args.idmap)
    red = reduce_false_positives(verdicts, g, iter_trace_file(args.trace), args.threshold, args.knn, args.key)
    write_reduction(args.out, red)
    if args.verdicts_out:
        write_verdicts(args.verdicts_out, red.verdicts, entity_of)
    before = sum(v.alerted for v in verdicts)
    after = sum(v.alerted for v in red.verdicts)
    print(f"alerted_processes\t{len(red.alerted)}\ncommunities\t{red.result.community_count}\n"
          f"flagged_processes\t{len(red.result.fp_processes)}\nalerts_before\t{before}\nalerts_after\t{after}")
    return 0


def cmd_evaluate(args) -> int:
    from .detector import read_verdicts
    from .metrics import evaluate

    verdicts, entity_of = read_verdicts(args.verdicts)
    report = evaluate(verdicts, entity_of, args.method)
    text = report.to_json() if args.format == "json" else report.csv_row()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    if args.figures:
        from . import plotting

        print(plotting.plot_roc([report], args.figures))
    return 0


def cmd_analyze_distance(args) -> int:
    from .events import iter_trace_file

    if args.ensemble:
        specs = divergence_ensemble(seed=args.seed, scale=args.scale)
        points, result = analyze_distance(specs, args.jobs, args.drop_outlier)
        rows = [{"scenario": p.label, "distance_ratio": p.ratio.ratio, "mean_malicious": p.ratio.mean_malicious,
                 "mean_benign": p.ratio.mean_benign, "auc": p.auc} for p in points]
        w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        print(f"# pearson r={result.r:.4f} p={result.p_value:.4g} n={result.n}")
        if args.out:
            write_rows(args.out, rows)
        if args.figures:
            from . import plotting

            print(plotting.plot_distance_auc(points, args.figures))
        return 0
    if not (args.train and args.test):
        raise SystemExit("analyze-distance needs --train and --test, or --ensemble")
    train_events = (e for p in args.train for e in iter_trace_file(p))
    test_events = (e for p in args.test for e in iter_trace_file(p))
    point = distance_point("traces", train_events, test_events, args.idmap, args.k, args.cap, args.statistic)
    print(json.dumps({"distance_ratio": point.ratio.ratio, "malicious": point.ratio.mean_malicious,
                      "benign": point.ratio.mean_benign, "statistic": point.ratio.statistic, "auc": point.auc},
                     sort_keys=True))
    return 0


def _config_from(args) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    else:
        config = RunConfig(scenario=_spec_from(args))
    overrides = {}
    for name in ("idmap", "k", "cap", "threshold", "jobs"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "out", None):
        overrides["output"] = args.out
    if getattr(args, "figures", False):
        overrides["figures"] = True
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def cmd_sweep_idmap(args) -> int:
    config = _config_from(args)
    workdir = config.run_dir()
    rows = sweep_idmap(config, workdir)
    path = os.path.join(workdir, "sweep_idmap.csv")
    write_rows(path, rows)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    if config.figures:
        from . import plotting

        print(plotting.plot_idmap(rows, os.path.join(workdir, "figures", "idmap.png")))
    return 0


def cmd_run(args) -> int:
    config = _config_from(args)
    if args.no_reduction:
        config.fp_reduction.enabled = False
    result = run_pipeline(config)
    sys.stdout.write(result.report.csv_row())
    if result.report_reduced is not None:
        sys.stdout.write(result.report_reduced.csv_row().split("\n", 1)[1])
    print(f"run_dir\t{result.run_dir}")
    return 0


# --- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="provsight", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="write a seeded synthetic scenario")
    _add_scenario_flags(p)
    p.add_argument("--config", help="ScenarioSpec JSON (overrides the flags)")
    p.add_argument("--gzip", action="store_true")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./runs)")
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("build-graph", help="build a provenance graph and export it as CSV")
    p.add_argument("--trace", nargs="+", required=True)
    _add_model_flags(p)
    p.add_argument("--out", help="directory for nodes.csv and edges.csv")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("detect", help="train on benign traces and score a test trace")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--test", nargs="+", required=True)
    _add_model_flags(p)
    p.add_argument("--threshold", type=_threshold, default="auto")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--out", default="verdicts.csv")
    p.add_argument("--features", help="also dump test-node type vectors to this CSV")
    p.add_argument("--timing", help="write per-stage seconds to this CSV")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("reduce-fp", help="cluster alerted processes and clear routine alerts")
    p.add_argument("--alerts", required=True, help="verdicts CSV from detect")
    p.add_argument("--trace", required=True)
    p.add_argument("--idmap", choices=["default", "1", "2", "3", "4", "5"], default="default")
    p.add_argument("--threshold", type=int, default=20, help="community size above which members are FPs")
    p.add_argument("--knn", type=int, default=10)
    p.add_argument("--key", choices=["node", "entity"], default="node")
    p.add_argument("--out", default="reduction.csv")
    p.add_argument("--verdicts-out", help="write the reduced verdicts here")
    p.set_defaults(func=cmd_reduce_fp)

    p = sub.add_parser("evaluate", help="confusion counts, AUC and entity counts for a verdict CSV")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--method", default="type-distance")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.add_argument("--figures", help="render the ROC curve to this image path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-distance", help="malicious/benign distance ratio, or the divergence ensemble")
    p.add_argument("--train", nargs="+")
    p.add_argument("--test", nargs="+")
    _add_model_flags(p)
    p.add_argument("--statistic", choices=["mean", "median"], default="mean")
    p.add_argument("--ensemble", action="store_true", help="generate the divergence ensemble and correlate")
    p.add_argument("--seed", type=int, default=300)
    p.add_argument("--scale", type=int, default=20_000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--drop-outlier", type=int, action="append", default=[], metavar="INDEX",
                   help="leave this ensemble row out of the correlation (repeatable)")
    p.add_argument("--out", help="CSV of ensemble rows")
    p.add_argument("--figures", help="render the ratio/AUC scatter to this image path")
    p.set_defaults(func=cmd_analyze_distance)

    for name, func, helptext in (("sweep-idmap", cmd_sweep_idmap, "detector under all six uuid strategies"),
                                 ("run", cmd_run, "full pipeline into a run directory")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="RunConfig JSON")
        _add_scenario_flags(p)
        p.add_argument("--idmap", choices=["default", "1", "2", "3", "4", "5"])
        p.add_argument("--k", type=int)
        p.add_argument("--cap", type=_cap)
        p.add_argument("--threshold", type=_threshold)
        p.add_argument("--jobs", type=int)
        p.add_argument("--out", help=f"run directory (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        p.add_argument("--figures", action="store_true", help="render PNG figures next to the data files")
        if name == "run":
            p.add_argument("--no-reduction", action="store_true")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"provsight: error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"provsight: error in stage {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
