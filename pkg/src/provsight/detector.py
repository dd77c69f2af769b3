"""Node-level anomaly detector: score = distance to the nearest training vector."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .events import Label
from .features import (
    DEFAULT_CAP,
    DEFAULT_K,
    FeatureError,
    Universe,
    align,
    nearest_distances,
    type_vectors,
    unique_rows,
)
from .graph import DEFAULT, ProvGraph, UuidStrategy, format_uuid

DEFAULT_PERCENTILE = 95.0


class DetectorError(ValueError):
    pass


@dataclass
class DetectorModel:
    universe: Universe
    vectors: np.ndarray          # distinct training vectors
    multiplicity: np.ndarray     # training nodes per distinct vector
    k: int = DEFAULT_K
    cap: int | None = DEFAULT_CAP
    strategy: UuidStrategy = DEFAULT
    loo_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def vector_count(self) -> int:
        return len(self.vectors)

    def auto_threshold(self, percentile: float = DEFAULT_PERCENTILE) -> float:
        """Percentile of leave-one-out training scores, one sample per training node."""
        if len(self.loo_scores) == 0:
            return 0.0
        per_node = np.repeat(self.loo_scores, self.multiplicity)
        return float(np.percentile(per_node, percentile))


def _leave_one_out(vectors: np.ndarray, multiplicity: np.ndarray) -> np.ndarray:
    n = len(vectors)
    scores = np.zeros(n)
    single = multiplicity == 1
    if n < 2 or not single.any():
        return scores
    if vectors.shape[1] == 0:
        return scores
    tree = cKDTree(vectors.astype(np.float64))
    d, _ = tree.query(vectors[single].astype(np.float64), k=2)
    scores[single] = d[:, 1]
    return scores


def train(g_train: ProvGraph, k: int = DEFAULT_K, cap: int | None = DEFAULT_CAP) -> DetectorModel:
    if g_train.node_count == 0:
        raise DetectorError("empty training graph")
    universe = Universe.from_graphs(g_train)
    mat = type_vectors(g_train, universe, k, cap)
    uniq, _, counts = unique_rows(mat)
    model = DetectorModel(universe, uniq, counts, k, cap, g_train.strategy)
    model.loo_scores = _leave_one_out(uniq, counts)
    return model


def score_all(model: DetectorModel, g_test: ProvGraph) -> list[tuple[int, float]]:
    scores = score_array(model, g_test)
    return [(int(u), float(s)) for u, s in zip(g_test.uuids, scores)]


def score_array(model: DetectorModel, g_test: ProvGraph) -> np.ndarray:
    if g_test.node_count == 0:
        return np.zeros(0)
    universe = model.universe.extended(Universe.from_graphs(g_test))
    test = type_vectors(g_test, universe, model.k, model.cap)
    train_vecs = align(model.vectors, model.universe, universe)
    try:
        return nearest_distances(test, train_vecs)
    except FeatureError as exc:
        raise DetectorError(str(exc)) from None


@dataclass(frozen=True)
class Verdict:
    uuid: int
    score: float
    predicted: Label
    truth: Label

    @property
    def alerted(self) -> bool:
        return self.predicted is Label.MALICIOUS


def apply_threshold(scores: Iterable[tuple[int, float]], threshold: float,
                    truth: Mapping[int, bool] | None = None) -> list[Verdict]:
    """Flag every score strictly above ``threshold``."""
    if threshold < 0:
        raise DetectorError("threshold must be >= 0")
    truth = truth or {}
    out = []
    for uuid, score in scores:
        pred = Label.MALICIOUS if score > threshold else Label.BENIGN
        real = Label.MALICIOUS if truth.get(uuid, False) else Label.BENIGN
        out.append(Verdict(uuid, score, pred, real))
    return out


def truth_of(g: ProvGraph) -> dict[int, bool]:
    return {int(u): bool(m) for u, m in zip(g.uuids, g.node_malicious)}


def detect(model: DetectorModel, g_test: ProvGraph, threshold: float | None = None) -> list[Verdict]:
    """Score, threshold (auto when None) and attach ground truth from node labels."""
    if threshold is None:
        threshold = model.auto_threshold()
    return apply_threshold(score_all(model, g_test), threshold, truth_of(g_test))


def write_verdicts(path: str | os.PathLike, verdicts: Sequence[Verdict], entity_of: Mapping[int, str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["uuid", "entity", "score", "predicted", "truth"])
        for v in verdicts:
            w.writerow([format_uuid(v.uuid), entity_of[v.uuid], repr(v.score), v.predicted.value, v.truth.value])


def read_verdicts(path: str | os.PathLike) -> tuple[list[Verdict], dict[int, str]]:
    verdicts, entity_of = [], {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            uuid = int(row["uuid"], 16)
            verdicts.append(Verdict(uuid, float(row["score"]), Label(row["predicted"]), Label(row["truth"])))
            entity_of[uuid] = row["entity"]
    return verdicts, entity_of
