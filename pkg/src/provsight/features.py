"""Neighbor type-tuple count vectors and the distances between them.

A node is described by the multiset of ``(src kind, action, dst kind)`` tuples
of the edges met while walking ``k`` hops out from it, expanding at most
``cap`` incident edges per node (earliest first). Reachability ignores edge
direction; the recorded tuple keeps it.
"""

from __future__ import annotations

import logging
import math
from collections import Counter, deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .events import ACTION_KINDS, ENTITY_KINDS, ActionKind, EntityKind
from .graph import ProvGraph

log = logging.getLogger(__name__)

DEFAULT_K = 2
DEFAULT_CAP = 100

_NA = len(ACTION_KINDS)
_NK = len(ENTITY_KINDS)
N_CODES = _NK * _NA * _NK


class TypeTuple(NamedTuple):
    src_kind: EntityKind
    action: ActionKind
    dst_kind: EntityKind

    @property
    def code(self) -> int:
        return (ENTITY_KINDS.index(self.src_kind) * _NA + ACTION_KINDS.index(self.action)) * _NK + ENTITY_KINDS.index(self.dst_kind)

    @classmethod
    def from_code(cls, code: int) -> "TypeTuple":
        rest, d = divmod(int(code), _NK)
        s, a = divmod(rest, _NA)
        return cls(ENTITY_KINDS[s], ACTION_KINDS[a], ENTITY_KINDS[d])

    def __str__(self) -> str:
        return f"{self.src_kind.value}-{self.action.value}-{self.dst_kind.value}"


def edge_codes(g: ProvGraph) -> np.ndarray:
    k = g.kinds.astype(np.int64)
    return (k[g.src] * _NA + g.actions.astype(np.int64)) * _NK + k[g.dst]


class Universe:
    """Ordered set of type tuples; position ``i`` is the vector coordinate."""

    def __init__(self, tuples: Iterable[TypeTuple]):
        self.tuples: list[TypeTuple] = sorted(set(tuples), key=lambda t: t.code)
        self.index: dict[TypeTuple, int] = {t: i for i, t in enumerate(self.tuples)}
        self._codes = np.array([t.code for t in self.tuples], dtype=np.int64)

    @classmethod
    def from_graphs(cls, *graphs: ProvGraph) -> "Universe":
        codes: set[int] = set()
        for g in graphs:
            if g.edge_count:
                codes.update(np.unique(edge_codes(g)).tolist())
        return cls(TypeTuple.from_code(c) for c in codes)

    def extended(self, other: "Universe") -> "Universe":
        return Universe([*self.tuples, *other.tuples])

    def __len__(self) -> int:
        return len(self.tuples)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Universe) and self.tuples == other.tuples

    def column_of_code(self) -> np.ndarray:
        """Lookup table code -> column, -1 when absent."""
        table = np.full(N_CODES, -1, dtype=np.int64)
        table[self._codes] = np.arange(len(self._codes))
        return table

    def names(self) -> list[str]:
        return [str(t) for t in self.tuples]


@dataclass(frozen=True)
class TypeVector:
    owner: int | None
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.counts)


class FeatureError(ValueError):
    pass


# --- adjacency ----------------------------------------------------------------


@dataclass(frozen=True)
class Adjacency:
    """Incident edges per node in (timestamp, seq) order, CSR style."""

    indptr: np.ndarray
    edge: np.ndarray
    other: np.ndarray

    def capped(self, cap: int | None) -> "Adjacency":
        if cap is None:
            return self
        counts = np.diff(self.indptr)
        starts = np.repeat(self.indptr[:-1], counts)
        pos = np.arange(len(self.edge)) - starts
        keep = pos < cap
        new_counts = np.minimum(counts, cap)
        indptr = np.concatenate([[0], np.cumsum(new_counts)])
        return Adjacency(indptr, self.edge[keep], self.other[keep])

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.indptr[i], self.indptr[i + 1]
        return self.edge[a:b], self.other[a:b]


def adjacency(g: ProvGraph) -> Adjacency:
    m = g.edge_count
    eids = np.arange(m, dtype=np.int64)
    loop = g.src == g.dst
    owner = np.concatenate([g.src, g.dst[~loop]])
    edge = np.concatenate([eids, eids[~loop]])
    other = np.concatenate([g.dst, g.src[~loop]])
    order = np.lexsort((g.seqs[edge], g.timestamps[edge], owner))
    owner, edge, other = owner[order], edge[order], other[order]
    indptr = np.zeros(g.node_count + 1, dtype=np.int64)
    np.add.at(indptr, owner + 1, 1)
    np.cumsum(indptr, out=indptr)
    return Adjacency(indptr, edge, other)


# --- reference route: one node at a time --------------------------------------


def info(g: ProvGraph, v: int, k: int = DEFAULT_K, cap: int | None = DEFAULT_CAP,
         adj: Adjacency | None = None) -> Counter:
    """Multiset of type tuples of the edges traversed within ``k`` hops of node uuid ``v``.

    Nodes at hop distance < k expand their first ``cap`` incident edges; every
    expanded edge is counted once, however many endpoints reach it.
    """
    if k < 1:
        raise FeatureError("k must be >= 1")
    if cap is not None and cap < 1:
        raise FeatureError("cap must be >= 1")
    try:
        start = g.index[int(v)]
    except KeyError:
        raise FeatureError(f"node {v} is not in the graph") from None
    adj = (adj or adjacency(g)).capped(cap)
    dist = {start: 0}
    queue = deque([start])
    seen_edges: set[int] = set()
    while queue:
        u = queue.popleft()
        if dist[u] >= k:
            continue
        edges, others = adj.row(u)
        for e, w in zip(edges.tolist(), others.tolist()):
            seen_edges.add(e)
            if w not in dist:
                dist[w] = dist[u] + 1
                queue.append(w)
    codes = edge_codes(g)
    return Counter(TypeTuple.from_code(codes[e]) for e in seen_edges)


def vectorize(info_multiset: Counter, universe: Universe, owner: int | None = None) -> TypeVector:
    counts = np.zeros(len(universe), dtype=np.int64)
    for t, c in info_multiset.items():
        i = universe.index.get(t)
        if i is None:
            raise FeatureError(f"type tuple {t} is outside the universe")
        counts[i] += c
    return TypeVector(owner, counts)


def distance(a: TypeVector | np.ndarray, b: TypeVector | np.ndarray) -> float:
    x = a.counts if isinstance(a, TypeVector) else np.asarray(a)
    y = b.counts if isinstance(b, TypeVector) else np.asarray(b)
    if x.shape != y.shape:
        raise FeatureError(f"vector length mismatch: {x.shape[0]} vs {y.shape[0]}")
    diff = x.astype(np.float64) - y.astype(np.float64)
    return math.sqrt(float(diff @ diff))


def nearest_train_distance(test_vec: TypeVector, train_vecs: Iterable[TypeVector]) -> float:
    best = None
    for t in train_vecs:
        d = distance(test_vec, t)
        if best is None or d < best:
            best = d
    if best is None:
        raise FeatureError("empty training vector set")
    return best


# --- batch route: all nodes at once -------------------------------------------


def type_vectors(g: ProvGraph, universe: Universe, k: int = DEFAULT_K,
                 cap: int | None = DEFAULT_CAP, chunk: int = 2048) -> np.ndarray:
    """Count matrix ``[node_count, len(universe)]`` equal row-wise to :func:`info`."""
    if k < 1:
        raise FeatureError("k must be >= 1")
    n, m = g.node_count, g.edge_count
    out = np.zeros((n, len(universe)), dtype=np.int64)
    if n == 0 or m == 0:
        return out
    cols = universe.column_of_code()[edge_codes(g)]
    if (cols < 0).any():
        raise FeatureError("graph contains type tuples outside the universe")
    adj = adjacency(g).capped(cap)
    owner = np.repeat(np.arange(n), np.diff(adj.indptr))
    ones = np.ones(len(adj.edge), dtype=np.int32)
    inc = sp.csr_matrix((ones, (owner, adj.edge)), shape=(n, m))
    step = sp.csr_matrix((ones, (owner, adj.other)), shape=(n, n))
    step.data[:] = 1
    onehot = sp.csr_matrix((np.ones(m, dtype=np.int64), (np.arange(m), cols)), shape=(m, len(universe)))
    eye = sp.identity(n, dtype=np.int32, format="csr")
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        reach = eye[lo:hi]
        for _ in range(k - 1):
            reach = reach + reach @ step
            reach.data[:] = 1
        touched = reach @ inc
        touched.data[:] = 1
        out[lo:hi] = (touched @ onehot).toarray()
    return out


def unique_rows(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct rows, the row -> distinct index map, and multiplicities."""
    if len(mat) == 0:
        return mat, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    uniq, inverse, counts = np.unique(mat, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


def nearest_distances(test: np.ndarray, train: np.ndarray) -> np.ndarray:
    """Euclidean distance from every test row to its nearest train row."""
    if len(train) == 0:
        raise FeatureError("empty training vector set")
    if len(test) == 0:
        return np.zeros(0)
    if test.shape[1] != train.shape[1]:
        raise FeatureError(f"vector length mismatch: {test.shape[1]} vs {train.shape[1]}")
    if test.shape[1] == 0:
        return np.zeros(len(test))
    tu, tinv, _ = unique_rows(test)
    ru, _, _ = unique_rows(train)
    tree = cKDTree(ru.astype(np.float64))
    d, _ = tree.query(tu.astype(np.float64), k=1)
    return np.asarray(d, dtype=np.float64)[tinv]


def align(mat: np.ndarray, src: Universe, dst: Universe) -> np.ndarray:
    """Re-index columns of ``mat`` from ``src`` to the superset universe ``dst``."""
    out = np.zeros((mat.shape[0], len(dst)), dtype=mat.dtype)
    for i, t in enumerate(src.tuples):
        j = dst.index.get(t)
        if j is None:
            raise FeatureError(f"type tuple {t} is outside the target universe")
        out[:, j] = mat[:, i]
    return out


# --- distance ratio -------------------------------------------------------------

RATIO_EPS = 1e-9


@dataclass(frozen=True)
class DistanceRatio:
    ratio: float
    mean_malicious: float
    mean_benign: float
    statistic: str = "mean"


def ratio_of(mal: Sequence[float], ben: Sequence[float], statistic: str = "mean") -> DistanceRatio:
    if len(mal) == 0:
        raise FeatureError("no malicious test nodes")
    if len(ben) == 0:
        raise FeatureError("no benign test nodes")
    agg = {"mean": np.mean, "median": np.median}.get(statistic)
    if agg is None:
        raise FeatureError(f"unknown statistic {statistic!r}")
    m, b = float(agg(mal)), float(agg(ben))
    if b == 0.0:
        if m == 0.0:
            log.warning("distance ratio is 0/0; reporting 1.0")
            return DistanceRatio(1.0, m, b, statistic)
        log.warning("benign mean distance is 0; guarding denominator with %g", RATIO_EPS)
        return DistanceRatio(m / RATIO_EPS, m, b, statistic)
    return DistanceRatio(m / b, m, b, statistic)


def distance_ratio(g_train: ProvGraph, g_test: ProvGraph, k: int = DEFAULT_K,
                   cap: int | None = DEFAULT_CAP, statistic: str = "mean") -> DistanceRatio:
    """Central nearest-train distance of malicious test nodes over that of benign ones."""
    labels = g_test.node_malicious
    if not labels.any():
        raise FeatureError("no malicious test nodes")
    if labels.all():
        raise FeatureError("no benign test nodes")
    if g_train.node_count == 0:
        raise FeatureError("empty training graph")
    universe = Universe.from_graphs(g_train, g_test)
    train = type_vectors(g_train, universe, k, cap)
    test = type_vectors(g_test, universe, k, cap)
    d = nearest_distances(test, train)
    return ratio_of(d[labels], d[~labels], statistic)
