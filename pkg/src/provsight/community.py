"""Louvain modularity maximisation on weighted undirected graphs."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Hashable, Iterable

import networkx as nx


@dataclass(frozen=True)
class Community:
    id: int
    members: frozenset

    @property
    def size(self) -> int:
        return len(self.members)


def modularity(graph: nx.Graph, communities: Iterable[Iterable[Hashable]],
               resolution: float = 1.0, weight: str = "weight") -> float:
    """Q = sum_c [ L_c / m - resolution * (d_c / 2m)^2 ]; self-loops count once in L_c, twice in d_c."""
    where = {}
    for i, members in enumerate(communities):
        for node in members:
            where[node] = i
    internal: dict[int, float] = {}
    degree: dict[int, float] = {}
    m = 0.0
    for u, v, data in graph.edges(data=True):
        w = data.get(weight, 1.0)
        m += w
        cu, cv = where[u], where[v]
        degree[cu] = degree.get(cu, 0.0) + w
        degree[cv] = degree.get(cv, 0.0) + w
        if cu == cv:
            internal[cu] = internal.get(cu, 0.0) + w
    if m == 0:
        return 0.0
    return sum(internal.values()) / m - resolution * sum((d / (2 * m)) ** 2 for d in degree.values())


def _one_level(adj: list[dict[int, float]], loops: list[float], order: list[int],
               resolution: float, comm: list[int] | None = None) -> tuple[list[int], bool]:
    """Greedy single-node moves until none improves modularity."""
    n = len(adj)
    k = [2 * loops[i] + sum(adj[i].values()) for i in range(n)]
    m2 = sum(k)
    comm = list(range(n)) if comm is None else list(comm)
    tot = [0.0] * n
    for i in range(n):
        tot[comm[i]] += k[i]
    moved_any = False
    while True:
        moved = False
        for i in order:
            ci = comm[i]
            links: dict[int, float] = {}
            for j, w in adj[i].items():
                cj = comm[j]
                links[cj] = links.get(cj, 0.0) + w
            tot[ci] -= k[i]
            best_c = ci
            best_gain = links.get(ci, 0.0) - resolution * tot[ci] * k[i] / m2
            for c, w in links.items():
                gain = w - resolution * tot[c] * k[i] / m2
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            tot[best_c] += k[i]
            if best_c != ci:
                comm[i] = best_c
                moved = True
                moved_any = True
        if not moved:
            break
    return comm, moved_any


def _aggregate(adj: list[dict[int, float]], loops: list[float],
               comm: list[int]) -> tuple[list[int], list[dict[int, float]], list[float]]:
    """Collapse each community into one super node; returns the relabelled membership too."""
    relabel: dict[int, int] = {}
    for c in comm:
        relabel.setdefault(c, len(relabel))
    comm = [relabel[c] for c in comm]
    new_adj: list[dict[int, float]] = [dict() for _ in relabel]
    new_loops = [0.0] * len(relabel)
    for i, row in enumerate(adj):
        ci = comm[i]
        new_loops[ci] += loops[i]
        for j, w in row.items():
            cj = comm[j]
            if ci == cj:
                if i < j:
                    new_loops[ci] += w
            else:
                new_adj[ci][cj] = new_adj[ci].get(cj, 0.0) + w
    return comm, new_adj, new_loops


def _shuffled(n: int, rng: random.Random | None) -> list[int]:
    order = list(range(n))
    if rng is not None:
        rng.shuffle(order)
    return order


def _run(adj: list[dict[int, float]], loops: list[float], resolution: float,
         rng: random.Random | None) -> list[int]:
    n = len(adj)
    membership = list(range(n))
    while True:
        # multilevel ascent from the current partition
        level_of, level_adj, level_loops = _aggregate(adj, loops, membership)
        while True:
            comm, moved = _one_level(level_adj, level_loops, _shuffled(len(level_adj), rng), resolution)
            if not moved:
                break
            comm, level_adj, level_loops = _aggregate(level_adj, level_loops, comm)
            level_of = [comm[s] for s in level_of]
        membership = level_of
        # coarse levels never revisit single nodes; give them one more chance
        membership, moved = _one_level(adj, loops, _shuffled(n, rng), resolution, membership)
        if not moved:
            return membership


def louvain(graph: nx.Graph, resolution: float = 1.0, seed: int | None = None,
            weight: str = "weight", restarts: int = 4) -> list[Community]:
    """Partition ``graph`` into communities by greedy modularity ascent.

    The first start visits nodes in sorted order; each further start uses an
    order shuffled from ``seed`` (0 when None). The partition with the highest
    modularity wins, the earliest start on ties, so the result is deterministic.
    """
    nodes = sorted(graph.nodes)
    if not nodes:
        return []
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    pos = {node: i for i, node in enumerate(nodes)}
    adj: list[dict[int, float]] = [dict() for _ in nodes]
    loops = [0.0] * len(nodes)
    for u, v, data in graph.edges(data=True):
        w = float(data.get(weight, 1.0))
        a, b = pos[u], pos[v]
        if a == b:
            loops[a] += w
        else:
            adj[a][b] = adj[a].get(b, 0.0) + w
            adj[b][a] = adj[b].get(a, 0.0) + w
    for row in adj:
        for j in sorted(row):
            row[j] = row.pop(j)

    if sum(loops) + sum(sum(r.values()) for r in adj) == 0:
        best = list(range(len(nodes)))
    else:
        rng = random.Random(0 if seed is None else seed)
        best, best_q = None, -math.inf
        for attempt in range(restarts):
            membership = _run(adj, loops, resolution, rng if attempt else None)
            q = _quality(adj, loops, membership, resolution)
            if q > best_q + 1e-12:
                best, best_q = membership, q

    groups: dict[int, list] = {}
    for node, s in zip(nodes, best):
        groups.setdefault(s, []).append(node)
    ordered = sorted(groups.values(), key=lambda g: g[0])
    return [Community(i, frozenset(g)) for i, g in enumerate(ordered)]


def _quality(adj: list[dict[int, float]], loops: list[float], comm: list[int], resolution: float) -> float:
    internal: dict[int, float] = {}
    degree: dict[int, float] = {}
    m = sum(loops) + sum(sum(r.values()) for r in adj) / 2
    for i, row in enumerate(adj):
        c = comm[i]
        degree[c] = degree.get(c, 0.0) + 2 * loops[i] + sum(row.values())
        internal[c] = internal.get(c, 0.0) + loops[i]
        for j, w in row.items():
            if i < j and comm[j] == c:
                internal[c] += w
    return sum(internal.values()) / m - resolution * sum((d / (2 * m)) ** 2 for d in degree.values())
