"""Detection metrics: confusion counts, ROC/AUC, Pearson correlation, entity counts."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .detector import DetectorModel, Verdict, detect
from .events import Event
from .graph import build


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0


def confusion(verdicts: Sequence[Verdict]) -> Confusion:
    if not verdicts:
        raise MetricsError("empty verdict set")
    tp = tn = fp = fn = 0
    for v in verdicts:
        bad = v.truth.value == "malicious"
        if v.alerted:
            if bad:
                tp += 1
            else:
                fp += 1
        elif bad:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, tn, fp, fn)


def _split(pairs: Iterable[tuple[float, bool]]) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(pairs)
    scores = np.array([float(s) for s, _ in pairs], dtype=np.float64)
    truth = np.array([bool(t) for _, t in pairs], dtype=bool)
    return scores, truth


def auc(pairs: Iterable[tuple[float, bool]]) -> float:
    """P(score_pos > score_neg) + 0.5 * P(tie), by one sorted sweep over tied groups."""
    scores, truth = _split(pairs)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    s, t = scores[order], truth[order]
    bounds = np.flatnonzero(np.diff(s)) + 1
    starts = np.concatenate([[0], bounds])
    pos = np.add.reduceat(t.astype(np.int64), starts)
    size = np.diff(np.concatenate([starts, [len(s)]]))
    neg = size - pos
    neg_below = np.concatenate([[0], np.cumsum(neg)[:-1]])
    wins = float(np.sum(pos * neg_below)) + 0.5 * float(np.sum(pos * neg))
    return wins / (n_pos * n_neg)


def roc_curve(pairs: Iterable[tuple[float, bool]]) -> list[tuple[float, float]]:
    """(fpr, tpr) points for thresholds from +inf down through every distinct score."""
    scores, truth = _split(pairs)
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC needs at least one positive and one negative")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    last = np.concatenate([np.flatnonzero(np.diff(s)), [len(s) - 1]])
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    return [(0.0, 0.0)] + [(float(f) / n_neg, float(p) / n_pos) for f, p in zip(fps, tps)]


@dataclass(frozen=True)
class PearsonResult:
    r: float
    p_value: float
    n: int


def pearson(xs: Sequence[float], ys: Sequence[float], permutations: int | None = None,
            drop: Sequence[int] = ()) -> PearsonResult:
    """Sample correlation with a two-sided p-value.

    The p-value comes from Student's t with n - 2 degrees of freedom, or from an
    exact permutation test when ``permutations`` is 0 (all orderings, n < 10) or a
    positive Monte-Carlo count. ``drop`` removes points by index first.
    """
    if len(xs) != len(ys):
        raise MetricsError("xs and ys differ in length")
    skip = set(drop)
    x = np.array([v for i, v in enumerate(xs) if i not in skip], dtype=np.float64)
    y = np.array([v for i, v in enumerate(ys) if i not in skip], dtype=np.float64)
    n = len(x)
    if n < 3:
        raise MetricsError("pearson needs at least 3 points")
    r = _r(x, y)
    if permutations is None:
        if abs(r) >= 1.0:
            p = 0.0
        else:
            t = r * math.sqrt((n - 2) / (1.0 - r * r))
            p = float(2.0 * stats.t.sf(abs(t), n - 2))
    elif permutations == 0:
        if n >= 10:
            raise MetricsError("exact permutation p-value is limited to n < 10")
        rs = [_r(x, y[list(perm)]) for perm in itertools.permutations(range(n))]
        p = sum(abs(v) >= abs(r) - 1e-12 for v in rs) / len(rs)
    else:
        rng = np.random.default_rng(0)
        hits = sum(abs(_r(x, rng.permutation(y))) >= abs(r) - 1e-12 for _ in range(permutations))
        p = (hits + 1) / (permutations + 1)
    return PearsonResult(r, p, n)


def _r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricsError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class EntityCounts:
    tp_entity: int
    fp_entity: int
    expansion_ratio: float


def entity_dedup(verdicts: Sequence[Verdict], entity_of: Mapping[int, str]) -> EntityCounts:
    tp_ent, fp_ent = set(), set()
    tp = 0
    for v in verdicts:
        if v.uuid not in entity_of:
            raise MetricsError(f"verdict uuid {v.uuid:016x} has no entity mapping")
        if not v.alerted:
            continue
        if v.truth.value == "malicious":
            tp += 1
            tp_ent.add(entity_of[v.uuid])
        else:
            fp_ent.add(entity_of[v.uuid])
    ratio = tp / len(tp_ent) if tp_ent else math.inf
    return EntityCounts(len(tp_ent), len(fp_ent), ratio)


@dataclass(frozen=True)
class FprSeries:
    fpr: list[float]
    slope: float

    @property
    def non_decreasing_trend(self) -> bool:
        return self.slope >= 0.0


def fpr_series(model: DetectorModel, daily_traces: Sequence[Sequence[Event]],
               threshold: float | None = None) -> FprSeries:
    """FPR per day at one fixed threshold (auto-calibrated on training when None)."""
    if threshold is None:
        threshold = model.auto_threshold()
    values = []
    for events in daily_traces:
        g = build(events, model.strategy)
        values.append(confusion(detect(model, g, threshold)).fpr)
    slope = float(np.polyfit(np.arange(len(values)), values, 1)[0]) if len(values) >= 2 else 0.0
    return FprSeries(values, slope)


# --- report ------------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    tp: int
    tn: int
    fp: int
    fn: int
    tpr: float
    fpr: float
    auc: float | None
    tp_entity: int
    fp_entity: int
    expansion_ratio: float | None
    threshold: float | None = None
    roc: list[tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> str:
        data = asdict(self)
        if data["expansion_ratio"] is not None and math.isinf(data["expansion_ratio"]):
            data["expansion_ratio"] = None
        data["roc"] = [list(p) for p in self.roc]
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Method", "TPR", "FPR", "AUC", "TP", "TN", "FN", "FP"])
        auc_text = "" if self.auc is None else f"{self.auc:.4f}"
        w.writerow([self.method, f"{self.tpr:.4f}", f"{self.fpr:.4f}", auc_text,
                    self.tp, self.tn, self.fn, self.fp])
        return buf.getvalue()


def evaluate(verdicts: Sequence[Verdict], entity_of: Mapping[int, str], method: str = "type-distance",
             threshold: float | None = None) -> EvalReport:
    c = confusion(verdicts)
    pairs = [(v.score, v.truth.value == "malicious") for v in verdicts]
    has_both = 0 < c.tp + c.fn < len(verdicts)
    area = auc(pairs) if has_both else None
    roc = roc_curve(pairs) if has_both else []
    ents = entity_dedup(verdicts, entity_of)
    ratio = ents.expansion_ratio if c.tp else None
    return EvalReport(method, c.tp, c.tn, c.fp, c.fn, c.tpr, c.fpr, area,
                      ents.tp_entity, ents.fp_entity, ratio, threshold, roc)
