"""Provenance graph construction under configurable UUID assignment.

Nodes are identified by a 64-bit hash of the fields a :class:`UuidStrategy`
selects for the entity's kind. Edges are kept one per event in columnar
numpy arrays so multi-million event traces stay compact.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .events import (
    ACTION_KINDS,
    ACTION_INDEX,
    ENTITY_KINDS,
    KIND_INDEX,
    EntityAttrs,
    EntityKind,
    Event,
    Label,
)

log = logging.getLogger(__name__)


class ProcessFields(str, Enum):
    PATH_ONLY = "path_only"
    PID_AND_PATH = "pid_and_path"


class NetworkFields(str, Enum):
    DOMAIN_THEN_URL_THEN_5TUPLE = "domain_then_url_then_5tuple"
    URL_THEN_5TUPLE = "url_then_5tuple"
    FIVE_TUPLE = "five_tuple"
    SRC_DST_IP = "src_dst_ip"
    DST_IP_ONLY = "dst_ip_only"


@dataclass(frozen=True)
class UuidStrategy:
    process_fields: ProcessFields = ProcessFields.PID_AND_PATH
    network_fields: NetworkFields = NetworkFields.DOMAIN_THEN_URL_THEN_5TUPLE
    name: str = "custom"


DEFAULT = UuidStrategy(ProcessFields.PID_AND_PATH, NetworkFields.DOMAIN_THEN_URL_THEN_5TUPLE, "default")
IDMAP1 = UuidStrategy(ProcessFields.PID_AND_PATH, NetworkFields.FIVE_TUPLE, "idmap1")
IDMAP2 = UuidStrategy(ProcessFields.PID_AND_PATH, NetworkFields.SRC_DST_IP, "idmap2")
IDMAP3 = UuidStrategy(ProcessFields.PATH_ONLY, NetworkFields.DOMAIN_THEN_URL_THEN_5TUPLE, "idmap3")
IDMAP4 = UuidStrategy(ProcessFields.PID_AND_PATH, NetworkFields.DST_IP_ONLY, "idmap4")
IDMAP5 = UuidStrategy(ProcessFields.PATH_ONLY, NetworkFields.DST_IP_ONLY, "idmap5")

PRESETS: dict[str, UuidStrategy] = {
    "default": DEFAULT,
    "1": IDMAP1,
    "2": IDMAP2,
    "3": IDMAP3,
    "4": IDMAP4,
    "5": IDMAP5,
}

# (finer, coarser) preset pairs. The network steps out of domain/url keys assume
# every domain and url resolves to one destination IP within a trace.
COARSENING_STEPS: tuple[tuple[str, str], ...] = (
    ("default", "3"),
    ("default", "4"),
    ("1", "2"),
    ("1", "4"),
    ("2", "4"),
    ("3", "5"),
    ("4", "5"),
)


def strategy_for(name: str) -> UuidStrategy:
    key = str(name).lower().removeprefix("idmap")
    try:
        return PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown idmap preset {name!r}; expected one of {sorted(PRESETS)}") from None


class UuidError(ValueError):
    pass


def _require(attrs: EntityAttrs, strategy: UuidStrategy, *names: str) -> list:
    values = []
    for name in names:
        value = getattr(attrs, name)
        if value is None:
            raise UuidError(
                f"{attrs.kind.value} entity is missing field {name!r} required by strategy {strategy.name}"
            )
        values.append(value)
    return values


_FIVE = ("src_ip", "src_port", "dst_ip", "dst_port")


def uuid_fields(attrs: EntityAttrs, strategy: UuidStrategy) -> str:
    """Canonical ``kind|tag|f1|f2...`` string hashed into the node uuid."""
    kind = attrs.kind
    if kind is EntityKind.PROCESS:
        if strategy.process_fields is ProcessFields.PID_AND_PATH:
            parts = ["pid"] + _require(attrs, strategy, "pid", "file_path")
        else:
            parts = ["path"] + _require(attrs, strategy, "file_path")
    elif kind is EntityKind.FILE or kind is EntityKind.REGISTRY_KEY:
        parts = ["path"] + _require(attrs, strategy, "file_path")
    elif kind is EntityKind.SCRIPT:
        parts = ["content"] + _require(attrs, strategy, "script_content")
    else:
        nf = strategy.network_fields
        if nf is NetworkFields.DOMAIN_THEN_URL_THEN_5TUPLE and attrs.domain is not None:
            parts = ["domain", attrs.domain]
        elif nf in (NetworkFields.DOMAIN_THEN_URL_THEN_5TUPLE, NetworkFields.URL_THEN_5TUPLE) and attrs.url is not None:
            parts = ["url", attrs.url]
        elif nf is NetworkFields.SRC_DST_IP:
            parts = ["ips"] + _require(attrs, strategy, "src_ip", "dst_ip")
        elif nf is NetworkFields.DST_IP_ONLY:
            parts = ["dst"] + _require(attrs, strategy, "dst_ip")
        else:
            parts = ["5t"] + _require(attrs, strategy, *_FIVE)
    return "|".join([kind.value, *map(str, parts)])


def hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def make_uuid(attrs: EntityAttrs, strategy: UuidStrategy = DEFAULT) -> int:
    return hash64(uuid_fields(attrs, strategy))


def entity_key(attrs: EntityAttrs) -> str:
    """Strategy-independent identity of the real-world object behind a node."""
    kind = attrs.kind
    if kind is EntityKind.NETWORK:
        ident = attrs.dst_ip or attrs.domain or attrs.url
    elif kind is EntityKind.SCRIPT:
        content = attrs.script_content
        ident = None if content is None else hashlib.sha256(content.encode("utf-8")).hexdigest()[:16]
    else:
        ident = attrs.file_path
    if ident is None:
        raise UuidError(f"{kind.value} entity has no field usable as an entity key")
    return f"{kind.value}:{ident}"


def format_uuid(uuid: int) -> str:
    return f"{uuid:016x}"


# --- graph ------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    uuid: int
    kind: EntityKind
    attrs: EntityAttrs
    entity: str
    label: Label


@dataclass(frozen=True)
class Edge:
    src_uuid: int
    dst_uuid: int
    action: str
    timestamp: int
    label: Label
    seq: int


@dataclass(frozen=True)
class Collision:
    uuid: int
    first: str
    second: str


@dataclass
class ProvGraph:
    """Immutable after :func:`build`. Node ``i`` is the i-th distinct uuid seen."""

    strategy: UuidStrategy
    uuids: np.ndarray                 # uint64 [n]
    kinds: np.ndarray                 # int8 [n], index into ENTITY_KINDS
    attrs: list[EntityAttrs]          # first-seen attributes per node
    entities: list[str]               # entity key per node
    entity_set: frozenset[str]        # every entity referenced by any event
    src: np.ndarray                   # int64 [m], node index
    dst: np.ndarray                   # int64 [m]
    actions: np.ndarray               # int8 [m], index into ACTION_KINDS
    timestamps: np.ndarray            # int64 [m]
    edge_malicious: np.ndarray        # bool [m]
    seqs: np.ndarray                  # int64 [m]
    collisions: list[Collision] = field(default_factory=list)
    _index: dict[int, int] | None = field(default=None, repr=False)
    _node_malicious: np.ndarray | None = field(default=None, repr=False)

    @property
    def node_count(self) -> int:
        return len(self.uuids)

    @property
    def edge_count(self) -> int:
        return len(self.src)

    @property
    def index(self) -> dict[int, int]:
        if self._index is None:
            self._index = {int(u): i for i, u in enumerate(self.uuids)}
        return self._index

    @property
    def node_malicious(self) -> np.ndarray:
        if self._node_malicious is None:
            flags = np.zeros(self.node_count, dtype=bool)
            bad = self.edge_malicious
            flags[self.src[bad]] = True
            flags[self.dst[bad]] = True
            self._node_malicious = flags
        return self._node_malicious

    @property
    def entity_of(self) -> dict[int, str]:
        return {int(u): e for u, e in zip(self.uuids, self.entities)}

    def __contains__(self, uuid: int) -> bool:
        return int(uuid) in self.index

    def node(self, uuid: int) -> Node:
        i = self.index[int(uuid)]
        return self.node_at(i)

    def node_at(self, i: int) -> Node:
        label = Label.MALICIOUS if self.node_malicious[i] else Label.BENIGN
        return Node(int(self.uuids[i]), ENTITY_KINDS[self.kinds[i]], self.attrs[i], self.entities[i], label)

    @property
    def nodes(self) -> list[Node]:
        return [self.node_at(i) for i in range(self.node_count)]

    @property
    def edges(self) -> list[Edge]:
        out = []
        for j in range(self.edge_count):
            label = Label.MALICIOUS if self.edge_malicious[j] else Label.BENIGN
            out.append(
                Edge(
                    int(self.uuids[self.src[j]]),
                    int(self.uuids[self.dst[j]]),
                    ACTION_KINDS[self.actions[j]].value,
                    int(self.timestamps[j]),
                    label,
                    int(self.seqs[j]),
                )
            )
        return out

    def process_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_INDEX[EntityKind.PROCESS])


def build(events: Iterable[Event], strategy: UuidStrategy = DEFAULT) -> ProvGraph:
    """One node per distinct uuid, one edge per event."""
    node_of: dict[int, int] = {}       # uuid -> node index
    key_of_uuid: dict[int, str] = {}   # uuid -> canonical field string (collision check)
    attr_cache: dict[EntityAttrs, tuple[int, str]] = {}
    uuids: list[int] = []
    kinds: list[int] = []
    attrs_list: list[EntityAttrs] = []
    entities: list[str] = []
    entity_set: set[str] = set()
    collisions: list[Collision] = []
    src: list[int] = []
    dst: list[int] = []
    actions: list[int] = []
    stamps: list[int] = []
    bad: list[bool] = []
    seqs: list[int] = []

    def resolve(attrs: EntityAttrs, seq: int) -> int:
        hit = attr_cache.get(attrs)
        if hit is None:
            try:
                fields = uuid_fields(attrs, strategy)
                ent = entity_key(attrs)
            except UuidError as exc:
                raise UuidError(f"event seq {seq}: {exc}") from None
            uid = hash64(fields)
            prev = key_of_uuid.get(uid)
            if prev is None:
                key_of_uuid[uid] = fields
            elif prev != fields:
                collisions.append(Collision(uid, prev, fields))
                log.warning("uuid collision %s: %r vs %r", format_uuid(uid), prev, fields)
            entity_set.add(ent)
            hit = attr_cache[attrs] = (uid, ent)
        uid, ent = hit
        idx = node_of.get(uid)
        if idx is None:
            idx = node_of[uid] = len(uuids)
            uuids.append(uid)
            kinds.append(KIND_INDEX[attrs.kind])
            attrs_list.append(attrs)
            entities.append(ent)
        return idx

    for e in events:
        src.append(resolve(e.subject, e.seq))
        dst.append(resolve(e.object, e.seq))
        actions.append(ACTION_INDEX[e.action])
        stamps.append(e.timestamp)
        bad.append(e.label is Label.MALICIOUS)
        seqs.append(e.seq)
        if len(attr_cache) > 1_000_000:
            attr_cache.clear()

    return ProvGraph(
        strategy=strategy,
        uuids=np.array(uuids, dtype=np.uint64),
        kinds=np.array(kinds, dtype=np.int8),
        attrs=attrs_list,
        entities=entities,
        entity_set=frozenset(entity_set),
        src=np.array(src, dtype=np.int64),
        dst=np.array(dst, dtype=np.int64),
        actions=np.array(actions, dtype=np.int8),
        timestamps=np.array(stamps, dtype=np.int64),
        edge_malicious=np.array(bad, dtype=bool),
        seqs=np.array(seqs, dtype=np.int64),
        collisions=collisions,
    )


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    entity_count: int
    per_kind: dict[str, int]


def graph_stats(g: ProvGraph) -> GraphStats:
    counts = np.bincount(g.kinds.astype(np.int64), minlength=len(ENTITY_KINDS)) if g.node_count else np.zeros(len(ENTITY_KINDS), dtype=np.int64)
    per_kind = {k.value: int(c) for k, c in zip(ENTITY_KINDS, counts)}
    return GraphStats(g.node_count, g.edge_count, len(g.entity_set), per_kind)


def export_csv(g: ProvGraph, directory: str | os.PathLike) -> tuple[str, str]:
    """Write ``nodes.csv`` and ``edges.csv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    nodes_path = os.path.join(directory, "nodes.csv")
    edges_path = os.path.join(directory, "edges.csv")
    labels = g.node_malicious
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["uuid", "kind", "entity", "label"])
        for i in range(g.node_count):
            w.writerow([
                format_uuid(int(g.uuids[i])),
                ENTITY_KINDS[g.kinds[i]].value,
                g.entities[i],
                "malicious" if labels[i] else "benign",
            ])
    hexes = [format_uuid(int(u)) for u in g.uuids]
    action_names = [a.value for a in ACTION_KINDS]
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "action", "ts", "label"])
        for s, d, a, t, m in zip(g.src.tolist(), g.dst.tolist(), g.actions.tolist(),
                                 g.timestamps.tolist(), g.edge_malicious.tolist()):
            w.writerow([hexes[s], hexes[d], action_names[a], t, "malicious" if m else "benign"])
    return nodes_path, edges_path

