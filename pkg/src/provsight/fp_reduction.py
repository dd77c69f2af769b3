"""Process-level false-positive filtering of detector alerts.

Alerted processes are described by TF-IDF weights over the objects they touch,
linked to their nearest neighbours, and grouped with Louvain. Members of
communities larger than a size threshold are treated as false positives: a
behavior shared by many processes is routine, an attack is rare.
"""

from __future__ import annotations

import csv
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np
import scipy.sparse as sp

from .community import Community, louvain
from .detector import Verdict
from .events import KIND_INDEX, ActionKind, EntityKind, Event, Label
from .graph import DEFAULT, ProvGraph, UuidStrategy, entity_key, format_uuid, make_uuid

DEFAULT_SIZE_THRESHOLD = 20
DEFAULT_KNN = 10
KEY_MODES = ("node", "entity")


class ReductionError(ValueError):
    pass


@dataclass(frozen=True)
class ProcessProfile:
    process_key: str
    behaviors: tuple[tuple[ActionKind, str, int], ...]


@dataclass(frozen=True)
class TfIdfVector:
    process_key: str
    weights: dict[str, float]


def process_key(attrs, key: str = "node", strategy: UuidStrategy = DEFAULT) -> str:
    """Identity of a process for profiling.

    ``node`` keys each graph node (one running instance under a pid-aware
    strategy); ``entity`` keys the executable path.
    """
    if key == "node":
        return format_uuid(make_uuid(attrs, strategy))
    if key == "entity":
        return entity_key(attrs)
    raise ReductionError(f"unknown key mode {key!r}; expected one of {KEY_MODES}")


def profile(events: Iterable[Event], alerted: Iterable[str], key: str = "entity",
            strategy: UuidStrategy = DEFAULT) -> list[ProcessProfile]:
    wanted = set(alerted)
    if not wanted:
        return []
    behaviors: dict[str, list] = defaultdict(list)
    cache: dict = {}

    def key_of(attrs) -> str:
        pk = cache.get(attrs)
        if pk is None:
            pk = cache[attrs] = process_key(attrs, key, strategy)
        return pk

    for e in events:
        pk = key_of(e.subject)
        if pk in wanted:
            behaviors[pk].append((e.action, entity_key(e.object), e.timestamp))
        # a process that is only ever acted on (spawned, signalled) is profiled by who acted on it
        if e.object.kind is EntityKind.PROCESS:
            ok = key_of(e.object)
            if ok in wanted and ok != pk:
                behaviors[ok].append((e.action, entity_key(e.subject), e.timestamp))
    missing = sorted(wanted - behaviors.keys())
    if missing:
        raise ReductionError(f"alerted process {missing[0]} has no events")
    return [ProcessProfile(pk, tuple(behaviors[pk])) for pk in sorted(wanted)]


def tfidf(profiles: Sequence[ProcessProfile]) -> list[TfIdfVector]:
    """weight(p, o) = freq(p, o) * ln(N / n_o), N profiled processes, n_o of them touching o."""
    n_p = len(profiles)
    freqs = [Counter(obj for _, obj, _ in p.behaviors) for p in profiles]
    doc_freq: Counter = Counter()
    for f in freqs:
        doc_freq.update(f.keys())
    idf = {o: math.log(n_p / n) for o, n in doc_freq.items()}
    out = []
    for p, f in zip(profiles, freqs):
        out.append(TfIdfVector(p.process_key, {o: c * idf[o] for o, c in sorted(f.items())}))
    return out


def _matrix(vectors: Sequence[TfIdfVector]) -> sp.csr_matrix:
    vocab: dict[str, int] = {}
    rows, cols, vals = [], [], []
    for i, v in enumerate(vectors):
        for o, w in v.weights.items():
            if w == 0.0:
                continue
            rows.append(i)
            cols.append(vocab.setdefault(o, len(vocab)))
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(vectors), max(len(vocab), 1)))


def pairwise_distances(vectors: Sequence[TfIdfVector]) -> np.ndarray:
    x = _matrix(vectors)
    sq = np.asarray(x.multiply(x).sum(axis=1)).reshape(-1)
    gram = (x @ x.T).toarray()
    d2 = sq[:, None] + sq[None, :] - 2 * gram
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _exact(a: TfIdfVector, b: TfIdfVector) -> float:
    keys = a.weights.keys() | b.weights.keys()
    return math.sqrt(sum((a.weights.get(o, 0.0) - b.weights.get(o, 0.0)) ** 2 for o in keys))


def similarity_graph(vectors: Sequence[TfIdfVector], knn: int = DEFAULT_KNN) -> nx.Graph:
    """Union of each process's ``knn`` nearest neighbours, weight 1 / (1 + distance)."""
    if len(vectors) < 2:
        raise ReductionError("need at least two process vectors")
    if knn < 1:
        raise ReductionError("knn must be >= 1")
    vectors = sorted(vectors, key=lambda v: v.process_key)
    dist = pairwise_distances(vectors)
    np.fill_diagonal(dist, np.inf)
    g = nx.Graph()
    g.add_nodes_from(v.process_key for v in vectors)
    take = min(knn, len(vectors) - 1)
    for i, row in enumerate(dist):
        for j in np.argsort(row, kind="stable")[:take].tolist():
            a, b = vectors[i], vectors[j]
            if not g.has_edge(a.process_key, b.process_key):
                g.add_edge(a.process_key, b.process_key, weight=1.0 / (1.0 + _exact(a, b)))
    return g


@dataclass(frozen=True)
class FpResult:
    fp_processes: frozenset[str]
    community_count: int
    representatives: dict[int, str]
    communities: tuple[Community, ...] = field(default=())


def flag_false_positives(communities: Sequence[Community], threshold: int = DEFAULT_SIZE_THRESHOLD) -> FpResult:
    if threshold < 1:
        raise ReductionError("size threshold must be >= 1")
    flagged: set[str] = set()
    reps = {}
    for c in communities:
        reps[c.id] = min(c.members)
        if c.size > threshold:
            flagged.update(c.members)
    return FpResult(frozenset(flagged), len(communities), reps, tuple(communities))


def cluster(profiles: Sequence[ProcessProfile], knn: int = DEFAULT_KNN, seed: int | None = None) -> list[Community]:
    if not profiles:
        return []
    if len(profiles) == 1:
        return [Community(0, frozenset([profiles[0].process_key]))]
    return louvain(similarity_graph(tfidf(profiles), knn), seed=seed)


# --- applying a reduction to verdicts --------------------------------------------


def node_process_keys(g: ProvGraph, key: str = "node") -> list[str | None]:
    """Profiling key of every process node, None for other kinds."""
    proc = g.kinds == KIND_INDEX[EntityKind.PROCESS]
    out: list[str | None] = [None] * g.node_count
    for i in np.flatnonzero(proc).tolist():
        out[i] = format_uuid(int(g.uuids[i])) if key == "node" else g.entities[i]
    return out


def alerted_processes(verdicts: Sequence[Verdict], g: ProvGraph, key: str = "node") -> set[str]:
    keys = node_process_keys(g, key)
    out = set()
    for v in verdicts:
        if v.alerted:
            pk = keys[g.index[v.uuid]]
            if pk is not None:
                out.add(pk)
    return out


def suppress(verdicts: Sequence[Verdict], g: ProvGraph, flagged: Iterable[str], key: str = "node") -> list[Verdict]:
    """Clear alerts owned by flagged processes.

    A process node is owned by itself; any other node by every process that
    acted on it, and is cleared only when all of them are flagged.
    """
    flagged = set(flagged)
    keys = node_process_keys(g, key)
    actors: dict[int, set] = defaultdict(set)
    alerted_idx = {g.index[v.uuid] for v in verdicts if v.alerted}
    hit = np.isin(g.dst, np.fromiter(alerted_idx, dtype=np.int64, count=len(alerted_idx)))
    for s, d in zip(g.src[hit].tolist(), g.dst[hit].tolist()):
        actors[d].add(keys[s])
    out = []
    for v in verdicts:
        if v.alerted:
            i = g.index[v.uuid]
            owners = {keys[i]} if keys[i] is not None else actors.get(i, set())
            if owners and owners <= flagged:
                v = Verdict(v.uuid, v.score, Label.BENIGN, v.truth)
        out.append(v)
    return out


@dataclass
class Reduction:
    verdicts: list[Verdict]
    result: FpResult
    alerted: set[str]
    sizes: dict[str, int]


def reduce_false_positives(verdicts: Sequence[Verdict], g: ProvGraph, events: Iterable[Event],
                           threshold: int = DEFAULT_SIZE_THRESHOLD, knn: int = DEFAULT_KNN,
                           key: str = "node") -> Reduction:
    alerted = alerted_processes(verdicts, g, key)
    profiles = profile(events, alerted, key, g.strategy)
    communities = cluster(profiles, knn)
    result = flag_false_positives(communities, threshold)
    sizes = {m: c.size for c in communities for m in c.members}
    return Reduction(suppress(verdicts, g, result.fp_processes, key), result, alerted, sizes)


def write_reduction(path: str | os.PathLike, reduction: Reduction) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["process_key", "community_id", "community_size", "flagged", "representative"])
        for c in reduction.result.communities:
            rep = reduction.result.representatives[c.id]
            for m in sorted(c.members):
                w.writerow([m, c.id, c.size, int(m in reduction.result.fp_processes), int(m == rep)])
