"""Canonical event records and the JSON Lines trace format.

One line per event::

    {"ts": 10, "action": "exec",
     "subject": {"kind": "process", "pid": 7, "path": "/bin/sh", "cmdline": "sh -c ls"},
     "object": {"kind": "file", "path": "/bin/ls"},
     "label": "benign"}

Files ending in ``.gz`` are read and written through gzip.
"""

from __future__ import annotations

import gzip
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Iterator, Sequence


class EntityKind(str, Enum):
    PROCESS = "process"
    FILE = "file"
    NETWORK = "network"
    REGISTRY_KEY = "registry_key"
    SCRIPT = "script"


class ActionKind(str, Enum):
    EXEC = "exec"
    FORK = "fork"
    READ = "read"
    WRITE = "write"
    OPEN = "open"
    CLOSE = "close"
    CONNECT = "connect"
    SEND = "send"
    RECV = "recv"
    LOAD = "load"
    MODIFY_REGISTRY = "modify_registry"
    RUN_SCRIPT = "run_script"
    DELETE = "delete"


class Label(str, Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"


ENTITY_KINDS: tuple[EntityKind, ...] = tuple(EntityKind)
ACTION_KINDS: tuple[ActionKind, ...] = tuple(ActionKind)
KIND_INDEX = {k: i for i, k in enumerate(ENTITY_KINDS)}
ACTION_INDEX = {a: i for i, a in enumerate(ACTION_KINDS)}

_KINDS_BY_VALUE = {k.value: k for k in EntityKind}
_ACTIONS_BY_VALUE = {a.value: a for a in ActionKind}
_LABELS_BY_VALUE = {l.value: l for l in Label}

# JSON key -> EntityAttrs attribute; order fixes the serialized layout.
_ATTR_FIELDS = (
    ("pid", "pid"),
    ("path", "file_path"),
    ("cmdline", "cmdline"),
    ("domain", "domain"),
    ("url", "url"),
    ("src_ip", "src_ip"),
    ("src_port", "src_port"),
    ("dst_ip", "dst_ip"),
    ("dst_port", "dst_port"),
    ("content", "script_content"),
)
_INT_FIELDS = {"pid", "src_port", "dst_port"}


class TraceError(ValueError):
    """Raised for malformed or inconsistent trace input."""


@dataclass(frozen=True, slots=True)
class EntityAttrs:
    kind: EntityKind
    pid: int | None = None
    file_path: str | None = None
    cmdline: str | None = None
    domain: str | None = None
    url: str | None = None
    src_ip: str | None = None
    src_port: int | None = None
    dst_ip: str | None = None
    dst_port: int | None = None
    script_content: str | None = None

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind.value}
        for key, attr in _ATTR_FIELDS:
            value = getattr(self, attr)
            if value is not None:
                out[key] = value
        return out

    @classmethod
    def from_json(cls, obj: dict, where: str) -> "EntityAttrs":
        if not isinstance(obj, dict):
            raise TraceError(f"{where}: expected an object, got {type(obj).__name__}")
        raw_kind = obj.get("kind")
        kind = _KINDS_BY_VALUE.get(raw_kind)
        if kind is None:
            raise TraceError(f"{where}: unknown entity kind {raw_kind!r}")
        values = {}
        for key, attr in _ATTR_FIELDS:
            value = obj.get(key)
            if value is None:
                continue
            if key in _INT_FIELDS:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise TraceError(f"{where}: field {key!r} must be an integer, got {value!r}")
            elif not isinstance(value, str):
                raise TraceError(f"{where}: field {key!r} must be a string, got {value!r}")
            values[attr] = value
        return cls(kind, **values)


@dataclass(frozen=True, slots=True)
class Event:
    seq: int
    timestamp: int
    subject: EntityAttrs
    action: ActionKind
    object: EntityAttrs
    label: Label = Label.BENIGN

    @property
    def malicious(self) -> bool:
        return self.label is Label.MALICIOUS

    def to_json(self) -> dict:
        return {
            "ts": self.timestamp,
            "action": self.action.value,
            "subject": self.subject.to_json(),
            "object": self.object.to_json(),
            "label": self.label.value,
        }


def _decode_line(line: str, seq: int, lineno: int) -> Event:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TraceError(f"line {lineno}: expected a JSON object")
    where = f"line {lineno}"
    ts = obj.get("ts")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise TraceError(f"{where}: 'ts' must be an integer, got {ts!r}")
    raw_action = obj.get("action")
    action = _ACTIONS_BY_VALUE.get(raw_action)
    if action is None:
        raise TraceError(f"{where}: unknown action {raw_action!r}")
    if "subject" not in obj or "object" not in obj:
        raise TraceError(f"{where}: 'subject' and 'object' are required")
    subject = EntityAttrs.from_json(obj["subject"], f"{where} subject")
    if subject.kind is not EntityKind.PROCESS:
        raise TraceError(f"{where}: subject kind must be 'process', got {subject.kind.value!r}")
    target = EntityAttrs.from_json(obj["object"], f"{where} object")
    raw_label = obj.get("label", Label.BENIGN.value)
    label = _LABELS_BY_VALUE.get(raw_label)
    if label is None:
        raise TraceError(f"{where}: unknown label {raw_label!r}")
    return Event(seq, ts, subject, action, target, label)


def _text_lines(stream: IO) -> Iterable[str]:
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8")


def iter_trace(stream: IO) -> Iterator[Event]:
    """Stream events from an open byte or text stream, validating as it goes."""
    seq = 0
    last_ts = None
    for lineno, line in enumerate(_text_lines(stream), start=1):
        if not line.strip():
            continue
        event = _decode_line(line, seq, lineno)
        if last_ts is not None and event.timestamp < last_ts:
            raise TraceError(
                f"line {lineno}: timestamp regression between seq {seq - 1} "
                f"(ts={last_ts}) and seq {seq} (ts={event.timestamp})"
            )
        last_ts = event.timestamp
        yield event
        seq += 1


def parse_trace(stream: IO) -> list[Event]:
    return list(iter_trace(stream))


def open_trace(path: str | os.PathLike, mode: str = "rb") -> IO:
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def iter_trace_file(path: str | os.PathLike) -> Iterator[Event]:
    with open_trace(path) as fh:
        yield from iter_trace(fh)


def read_trace(path: str | os.PathLike) -> list[Event]:
    return list(iter_trace_file(path))


def dumps_event(event: Event) -> str:
    return json.dumps(event.to_json(), separators=(",", ":"))


def serialize(events: Iterable[Event]) -> bytes:
    return "".join(dumps_event(e) + "\n" for e in events).encode("utf-8")


def write_trace(path: str | os.PathLike, events: Iterable[Event]) -> int:
    """Write events as JSON Lines; gzip when the name ends in ``.gz``. Returns the count."""
    path = os.fspath(path)
    n = 0
    if path.endswith(".gz"):
        # mtime=0 keeps gzip output byte-identical across runs
        raw = open(path, "wb")
        fh = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
    else:
        raw = None
        fh = open(path, "wb")
    try:
        for event in events:
            fh.write((dumps_event(event) + "\n").encode("utf-8"))
            n += 1
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return n


# --- unknown-behavior statistic -------------------------------------------


@dataclass(frozen=True)
class UnknownStats:
    ratios: dict[str, float]           # process path -> unknown fraction of its test events
    cdf: list[tuple[float, float]]     # (ratio, fraction of processes with ratio <= it)


def unknown_behavior_stats(train: Sequence[Event], test: Sequence[Event], strategy=None) -> UnknownStats:
    """Per-process share of test events whose (action, object) pair was never seen in training.

    Objects are identified by their node uuid under ``strategy`` (default preset when
    omitted), so "unknown" agrees with how the graph merges entities.
    """
    from .graph import DEFAULT, make_uuid

    if not test:
        raise TraceError("no test events")
    strategy = strategy or DEFAULT
    cache: dict[EntityAttrs, int] = {}

    def ident(attrs: EntityAttrs) -> int:
        uid = cache.get(attrs)
        if uid is None:
            uid = cache[attrs] = make_uuid(attrs, strategy)
        return uid

    seen: dict[str, set] = defaultdict(set)
    for e in train:
        seen[e.subject.file_path].add((e.action, ident(e.object)))
    total: dict[str, int] = defaultdict(int)
    unknown: dict[str, int] = defaultdict(int)
    for e in test:
        proc = e.subject.file_path
        total[proc] += 1
        if (e.action, ident(e.object)) not in seen.get(proc, ()):
            unknown[proc] += 1
    ratios = {p: unknown[p] / total[p] for p in sorted(total)}
    values = sorted(ratios.values())
    n = len(values)
    cdf = []
    for i, v in enumerate(values):
        if i + 1 < n and values[i + 1] == v:
            continue
        cdf.append((v, (i + 1) / n))
    return UnknownStats(ratios, cdf)
