"""Reproducible end-to-end runs: generate, build, detect, reduce, evaluate.

A run directory holds everything needed to replay it::

    config.json          the RunConfig, verbatim
    run.json             package versions and trace checksums
    traces/              generated day files and manifest (scenario runs only)
    graphs/<day>/        nodes.csv and edges.csv per trace
    verdicts.csv         detector output over all test days
    report.json          evaluation before false-positive reduction
    verdicts_reduced.csv, reduction.csv, report_reduced.json
    days.csv             per-day rows of the report table
    timing.csv           wall-clock seconds per stage (excluded from reports)
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .detector import DetectorModel, Verdict, detect, train, write_verdicts
from .events import Event, iter_trace_file
from .features import DEFAULT_CAP, DEFAULT_K, DistanceRatio, distance_ratio
from .fp_reduction import DEFAULT_KNN, DEFAULT_SIZE_THRESHOLD, reduce_false_positives
from .graph import PRESETS, ProvGraph, build, export_csv, strategy_for
from .metrics import EvalReport, confusion, evaluate, pearson
from .tracegen import ScenarioSpec, generate

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PROVSIGHT_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class FpConfig:
    enabled: bool = True
    threshold: int = DEFAULT_SIZE_THRESHOLD
    knn: int = DEFAULT_KNN
    key: str = "node"


@dataclass
class RunConfig:
    scenario: ScenarioSpec | None = None
    train_traces: list[str] = field(default_factory=list)
    test_traces: list[str] = field(default_factory=list)
    idmap: str = "default"
    k: int = DEFAULT_K
    cap: int | None = DEFAULT_CAP
    threshold: float | str = "auto"
    percentile: float = 95.0
    fp_reduction: FpConfig = field(default_factory=FpConfig)
    output: str | None = None
    export_graphs: bool = True
    figures: bool = False
    jobs: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.scenario, dict):
            self.scenario = ScenarioSpec.from_json(self.scenario)
        if isinstance(self.fp_reduction, dict):
            self.fp_reduction = FpConfig(**self.fp_reduction)
        if self.scenario is None and not (self.train_traces and self.test_traces):
            raise ValueError("a run needs a scenario or both train_traces and test_traces")
        strategy_for(self.idmap)
        if self.threshold != "auto":
            self.threshold = float(self.threshold)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def digest(self) -> str:
        data = asdict(self)
        data.pop("output")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self) -> str:
        if self.output:
            return self.output
        root = os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
        return os.path.join(root, f"run-{self.digest()}")


@dataclass
class RunResult:
    run_dir: str
    report: EvalReport
    report_reduced: EvalReport | None
    threshold: float
    timings: list[tuple[str, float]]
    day_rows: list[dict]


# --- helpers -------------------------------------------------------------------------


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import matplotlib
    import networkx
    import scipy

    return {"provsight": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "networkx": networkx.__version__, "matplotlib": matplotlib.__version__}


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map; a process pool when ``jobs`` > 1, results in input order either way."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _name(path: str) -> str:
    base = os.path.basename(path)
    for ext in (".gz", ".jsonl", ".json"):
        if base.endswith(ext):
            base = base[: -len(ext)]
    return base


def load_graph(paths: Iterable[str], idmap: str = "default") -> ProvGraph:
    """One graph over the concatenation of day files (already in time order)."""
    return build(itertools.chain.from_iterable(iter_trace_file(p) for p in paths), strategy_for(idmap))


class _Stages:
    def __init__(self) -> None:
        self.timings: list[tuple[str, float]] = []

    def run(self, name: str, fn: Callable, *args, **kwargs):
        start = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:   # every stage failure is reported with its stage name
            raise StageError(name, exc) from exc
        self.timings.append((name, time.perf_counter() - start))
        return out


def _write_report(path: str, report: EvalReport) -> None:
    with open(path, "w") as fh:
        fh.write(report.to_json())


def write_timing(path: str, timings: Sequence[tuple[str, float]], extra: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = sorted(extra) if extra else []
        w.writerow(["stage", "seconds", *cols])
        for stage, secs in timings:
            w.writerow([stage, f"{secs:.6f}", *(extra[c] for c in cols)])


# --- the run --------------------------------------------------------------------------


def _test_day(args: tuple) -> tuple[str, list[Verdict], dict, list | None]:
    path, model, threshold, idmap, fp, export_dir = args
    g = load_graph([path], idmap)
    if export_dir:
        export_csv(g, os.path.join(export_dir, _name(path)))
    verdicts = detect(model, g, threshold)
    reduced = None
    if fp.enabled:
        red = reduce_false_positives(verdicts, g, iter_trace_file(path), fp.threshold, fp.knn, fp.key)
        reduced = (red.verdicts, red)
    return _name(path), verdicts, g.entity_of, reduced


def run_pipeline(config: RunConfig) -> RunResult:
    run_dir = config.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        fh.write(config.to_json())
    stages = _Stages()

    train_paths, test_paths = list(config.train_traces), list(config.test_traces)
    if config.scenario is not None:
        gen = stages.run("gen-traces", generate, config.scenario, os.path.join(run_dir, "traces"))
        train_paths = [p for n, p in sorted(gen.paths.items()) if n.startswith("train_")]
        test_paths = [p for n, p in sorted(gen.paths.items()) if n.startswith("test_")]
    for p in train_paths + test_paths:
        if not os.path.exists(p):
            raise StageError("inputs", FileNotFoundError(p))
    run_info = {"versions": _versions(), "seed": config.scenario.seed if config.scenario else None,
                "traces": {os.path.basename(p): _sha256(p) for p in train_paths + test_paths}}
    with open(os.path.join(run_dir, "run.json"), "w") as fh:
        json.dump(run_info, fh, indent=2, sort_keys=True)
        fh.write("\n")

    graphs_dir = os.path.join(run_dir, "graphs") if config.export_graphs else None
    g_train = stages.run("build-graph:train", load_graph, train_paths, config.idmap)
    if graphs_dir:
        stages.run("export:train", export_csv, g_train, os.path.join(graphs_dir, "train"))
    model: DetectorModel = stages.run("train", train, g_train, config.k, config.cap)
    del g_train
    threshold = model.auto_threshold(config.percentile) if config.threshold == "auto" else float(config.threshold)

    jobs = [(p, model, threshold, config.idmap, config.fp_reduction, graphs_dir) for p in test_paths]
    days = stages.run("detect", _map, _test_day, jobs, config.jobs)

    verdicts: list[Verdict] = []
    reduced: list[Verdict] = []
    entity_of: dict[int, str] = {}
    day_rows = []
    reductions = []
    for name, v, ents, red in days:
        verdicts.extend(v)
        entity_of.update(ents)
        c = confusion(v)
        row = {"day": name, "tp": c.tp, "tn": c.tn, "fp": c.fp, "fn": c.fn, "fpr": c.fpr, "tpr": c.tpr}
        if red is not None:
            rv, reduction = red
            reduced.extend(rv)
            reductions.append((name, reduction))
            c2 = confusion(rv)
            row.update(fp_reduced=c2.fp, fpr_reduced=c2.fpr, tpr_reduced=c2.tpr,
                       communities=reduction.result.community_count,
                       flagged_processes=len(reduction.result.fp_processes))
        day_rows.append(row)

    write_verdicts(os.path.join(run_dir, "verdicts.csv"), verdicts, entity_of)
    report = stages.run("evaluate", evaluate, verdicts, entity_of, "type-distance", threshold)
    _write_report(os.path.join(run_dir, "report.json"), report)
    report_reduced = None
    if config.fp_reduction.enabled:
        write_verdicts(os.path.join(run_dir, "verdicts_reduced.csv"), reduced, entity_of)
        report_reduced = evaluate(reduced, entity_of, "type-distance+fp-reduction", threshold)
        _write_report(os.path.join(run_dir, "report_reduced.json"), report_reduced)
        with open(os.path.join(run_dir, "reduction.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "process_key", "community_id", "community_size", "flagged", "representative"])
            for name, reduction in reductions:
                res = reduction.result
                for c in res.communities:
                    for m in sorted(c.members):
                        w.writerow([name, m, c.id, c.size, int(m in res.fp_processes), int(m == res.representatives[c.id])])
    _write_days(os.path.join(run_dir, "days.csv"), day_rows)
    write_timing(os.path.join(run_dir, "timing.csv"), stages.timings)

    if config.figures:
        from . import plotting

        fig_dir = os.path.join(run_dir, "figures")
        plotting.render_run(fig_dir, report, report_reduced, day_rows)
    return RunResult(run_dir, report, report_reduced, threshold, stages.timings, day_rows)


def _write_days(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})


# --- sweeps and analyses ------------------------------------------------------------------


def _scenario_paths(config: RunConfig, workdir: str) -> tuple[list[str], list[str]]:
    if config.scenario is None:
        return list(config.train_traces), list(config.test_traces)
    gen = generate(config.scenario, os.path.join(workdir, "traces"))
    return ([p for n, p in sorted(gen.paths.items()) if n.startswith("train_")],
            [p for n, p in sorted(gen.paths.items()) if n.startswith("test_")])


def sweep_idmap(config: RunConfig, workdir: str | None = None) -> list[dict]:
    """Node/edge counts and AUC of the detector under each uuid strategy."""
    workdir = workdir or config.run_dir()
    os.makedirs(workdir, exist_ok=True)
    train_paths, test_paths = _scenario_paths(config, workdir)
    rows = []
    for name in PRESETS:
        start = time.perf_counter()
        model = train(load_graph(train_paths, name), config.k, config.cap)
        train_time = time.perf_counter() - start
        start = time.perf_counter()
        threshold = model.auto_threshold(config.percentile) if config.threshold == "auto" else float(config.threshold)
        verdicts: list[Verdict] = []
        entity_of: dict[int, str] = {}
        nodes = edges = 0
        for p in test_paths:
            g = load_graph([p], name)
            nodes += g.node_count
            edges += g.edge_count
            verdicts.extend(detect(model, g, threshold))
            entity_of.update(g.entity_of)
        report = evaluate(verdicts, entity_of, f"idmap-{name}", threshold)
        rows.append({"strategy": name, "node_count": nodes, "edge_count": edges, "auc": report.auc,
                     "tpr": report.tpr, "fpr": report.fpr, "tp": report.tp, "tp_entity": report.tp_entity,
                     "expansion_ratio": report.expansion_ratio,
                     "train_time": train_time, "test_time": time.perf_counter() - start})
    return rows


def write_rows(path: str, rows: Sequence[dict], timing_cols: Iterable[str] = ()) -> None:
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


@dataclass(frozen=True)
class DistancePoint:
    label: str
    ratio: DistanceRatio
    auc: float


def distance_point(label: str, train_events: Iterable[Event], test_events: Iterable[Event], idmap: str = "default",
                   k: int = DEFAULT_K, cap: int | None = DEFAULT_CAP, statistic: str = "mean") -> DistancePoint:
    strategy = strategy_for(idmap)
    g_train = build(train_events, strategy)
    g_test = build(test_events, strategy)
    ratio = distance_ratio(g_train, g_test, k, cap, statistic)
    model = train(g_train, k, cap)
    report = evaluate(detect(model, g_test), g_test.entity_of)
    if report.auc is None:
        raise ValueError(f"{label}: AUC undefined (single-class test set)")
    return DistancePoint(label, ratio, report.auc)


def divergence_ensemble(seed: int = 300, divergences: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
                        scale: int = 20_000) -> list[ScenarioSpec]:
    """Attack templates on both host profiles across the divergence knob."""
    from .tracegen import ATTACK_HOSTS

    specs = []
    combos = itertools.product(("mining", "backdoor", "info_stealing"), ("stable", "ever_changing"), divergences)
    for i, (attack, host, d) in enumerate(combos):
        if host in ATTACK_HOSTS[attack]:
            specs.append(ScenarioSpec(seed=seed + i, days=1, host_profile=host, attacks=(attack,),
                                      scale=scale, divergence=d))
    return specs


def _ensemble_point(spec: ScenarioSpec) -> DistancePoint:
    from .tracegen import simulate

    sc = simulate(spec)
    label = f"{spec.attacks[0]}/{spec.host_profile}/d={spec.divergence:g}"
    return distance_point(label, sc.train[0].events, sc.test[0].events)


def analyze_distance(specs: Sequence[ScenarioSpec], jobs: int = 1,
                     drop: Sequence[int] = ()) -> tuple[list[DistancePoint], object]:
    """Distance ratio and AUC per scenario plus their Pearson correlation.

    ``drop`` lists ensemble indices to leave out of the correlation (never automatic).
    """
    points = _map(_ensemble_point, list(specs), jobs)
    result = pearson([p.ratio.ratio for p in points], [p.auc for p in points], drop=drop)
    return points, result


def replay(run_dir: str, output: str | None = None) -> RunResult:
    """Re-run a saved run directory's config, optionally into another directory."""
    config = RunConfig.load(os.path.join(run_dir, "config.json"))
    return run_pipeline(replace(config, output=output or config.output))
