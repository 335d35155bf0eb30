"""Membership and deterministic partition placement.

Every node derives the same placement from the member list alone: each
category is split into one partition per member, partitions go round-robin
over the sorted members, and a Ketama ring picks the member that takes
partition 0.

Ring parameters: 160 points per member; point ``i`` of member ``m`` sits at
the first 8 bytes (little-endian) of ``MD5(f"{m}-{i}")``.  A category hashes
to the same digest of its decimal id.  A key is owned by the first point at
or after its position, wrapping past the end.
"""

from __future__ import annotations

import bisect
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import ClusterUnavailable, CorruptionError, RejectedInput
from .wire import Reader, pack_text

log = logging.getLogger(__name__)

VNODES = 160
MISS_LIMIT = 3

NodeId = str


def ring_digest(key: str) -> int:
    return int.from_bytes(hashlib.md5(key.encode("utf-8")).digest()[:8], "little")


def category_ring_key(category_id: int) -> int:
    return ring_digest(str(int(category_id)))


class KetamaRing:
    def __init__(self, members: Iterable[NodeId], vnodes: int = VNODES):
        self.vnodes = vnodes
        points = sorted((ring_digest(f"{m}-{i}"), m) for m in set(members) for i in range(vnodes))
        self.positions = [p for p, _ in points]
        self.owners = [m for _, m in points]

    @property
    def points(self) -> list[tuple[int, NodeId]]:
        return list(zip(self.positions, self.owners))

    def lookup(self, position: int) -> NodeId:
        if not self.positions:
            raise ClusterUnavailable("ring has no members")
        i = bisect.bisect_left(self.positions, position)
        return self.owners[i % len(self.owners)]


@dataclass(frozen=True)
class ClusterView:
    members: tuple[NodeId, ...]
    epoch: int = 0

    def __post_init__(self):
        ordered = tuple(sorted(set(self.members)))
        if len(ordered) != len(self.members):
            raise RejectedInput(f"duplicate members in {self.members!r}")
        object.__setattr__(self, "members", ordered)

    @classmethod
    def of(cls, members: Iterable[NodeId], epoch: int = 0) -> "ClusterView":
        return cls(tuple(sorted(set(members))), epoch)

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True, order=True)
class PartitionKey:
    """Slice ``index`` of ``count`` equal pieces of one category."""

    category_id: int
    index: int
    count: int


@dataclass(frozen=True)
class Assignment:
    owners: Mapping[PartitionKey, NodeId]

    def owner(self, category_id: int, index: int) -> NodeId:
        for key, node in self.owners.items():
            if key.category_id == category_id and key.index == index:
                return node
        raise KeyError((category_id, index))

    def held_by(self, node: NodeId) -> list[PartitionKey]:
        return sorted(k for k, n in self.owners.items() if n == node)

    def serialize(self) -> bytes:
        out = bytearray()
        for key in sorted(self.owners):
            out += struct.pack("<III", key.category_id, key.index, key.count)
            out += pack_text(self.owners[key])
        return bytes(out)


def start_index(view: ClusterView, category_id: int, ring: KetamaRing | None = None) -> int:
    ring = ring or KetamaRing(view.members)
    return view.members.index(ring.lookup(category_ring_key(category_id)))


def compute_assignment(view: ClusterView, categories: Sequence[int]) -> Assignment:
    if not view.members:
        raise ClusterUnavailable("no cluster members")
    ring = KetamaRing(view.members)
    n = len(view.members)
    owners = {}
    for cat in sorted(set(int(c) for c in categories)):
        s = start_index(view, cat, ring)
        for p in range(n):
            owners[PartitionKey(cat, p, n)] = view.members[(s + p) % n]
    return Assignment(owners)


@dataclass(frozen=True)
class RedistributionPlan:
    node: NodeId
    load: tuple[PartitionKey, ...] = ()
    drop: tuple[PartitionKey, ...] = ()

    def __bool__(self):
        return bool(self.load or self.drop)


def on_membership_change(
    old: ClusterView | None, new: ClusterView, categories: Sequence[int], node: NodeId
) -> RedistributionPlan:
    """What ``node`` must load and drop to move from ``old``'s placement to ``new``'s."""
    if old is not None and new.epoch <= old.epoch:
        raise RejectedInput(f"epoch must advance ({old.epoch} -> {new.epoch})")
    before = set(compute_assignment(old, categories).held_by(node)) if old and old.members else set()
    after = set(compute_assignment(new, categories).held_by(node)) if new.members else set()
    return RedistributionPlan(node, tuple(sorted(after - before)), tuple(sorted(before - after)))


Discovery = Callable[[], Iterable[NodeId]]
Probe = Callable[[NodeId], bool]
Listener = Callable[[ClusterView, ClusterView], None]


class Membership:
    """One node's view of the cluster.

    Members join once discovery lists them and they answer a probe; they
    leave after ``miss_limit`` consecutive failed probes.  Each change to the
    member set bumps the epoch once and notifies listeners.  Calls are
    expected from a single event loop.
    """

    def __init__(self, self_id: NodeId, initial: Iterable[NodeId] = (), miss_limit: int = MISS_LIMIT):
        self.self_id = self_id
        self.view = ClusterView.of(set(initial) | {self_id}, 0)
        self.miss_limit = miss_limit
        self.misses: dict[NodeId, int] = {}
        self.listeners: list[Listener] = []
        self.warnings = 0

    def subscribe(self, fn: Listener) -> None:
        self.listeners.append(fn)

    def _install(self, members: set[NodeId]) -> bool:
        if set(self.view.members) == members:
            return False
        old = self.view
        self.view = ClusterView.of(members, old.epoch + 1)
        log.info("%s: epoch %d members %s", self.self_id, self.view.epoch, ",".join(self.view.members))
        for fn in self.listeners:
            fn(old, self.view)
        return True

    def _probe_members(self, probe: Probe) -> set[NodeId]:
        members = set(self.view.members)
        for m in sorted(members - {self.self_id}):
            if probe(m):
                self.misses[m] = 0
            else:
                self.misses[m] = self.misses.get(m, 0) + 1
                if self.misses[m] >= self.miss_limit:
                    members.discard(m)
                    del self.misses[m]
        return members

    def heartbeat(self, probe: Probe) -> bool:
        """Probe current members; drop those past the miss limit."""
        return self._install(self._probe_members(probe))

    def resolve_members(self, discovery: Discovery, probe: Probe) -> ClusterView:
        members = set(self.view.members)
        try:
            found = set(discovery())
        except (OSError, ConnectionError, CorruptionError) as exc:
            self.warnings += 1
            log.warning("%s: discovery failed (%s); keeping epoch %d", self.self_id, exc, self.view.epoch)
            return self.view
        joined = {m for m in sorted(found - members) if probe(m)}
        members = self._probe_members(probe)
        for m in joined:
            self.misses[m] = 0
        self._install(members | joined)
        return self.view


class SimulatedBus:
    """In-process stand-in for discovery plus heartbeats, fully scripted by tests."""

    def __init__(self, members: Iterable[NodeId] = ()):
        self.registered: set[NodeId] = set(members)
        self.down: set[NodeId] = set()
        self.unreachable = False

    def join(self, node: NodeId):
        self.registered.add(node)
        self.down.discard(node)

    def leave(self, node: NodeId):
        self.registered.discard(node)

    def kill(self, node: NodeId):
        self.down.add(node)

    def revive(self, node: NodeId):
        self.down.discard(node)

    def discover(self) -> list[NodeId]:
        if self.unreachable:
            raise ConnectionError("discovery source unreachable")
        return sorted(self.registered)

    def probe(self, node: NodeId) -> bool:
        return node in self.registered and node not in self.down


# membership wire messages
MEMBER_MAGIC = b"EBVSMBR1"
MEMBER_VERSION = 1
PING, PONG, MEMBERS = 1, 2, 3


@dataclass(frozen=True)
class MemberMessage:
    kind: int
    sender: NodeId
    epoch: int = 0
    members: tuple[NodeId, ...] = field(default=())

    def encode(self) -> bytes:
        out = MEMBER_MAGIC + struct.pack("<HBQ", MEMBER_VERSION, self.kind, self.epoch) + pack_text(self.sender)
        out += struct.pack("<H", len(self.members)) + b"".join(pack_text(m) for m in self.members)
        return out

    @classmethod
    def decode(cls, raw: bytes) -> "MemberMessage":
        r = Reader(raw)
        if r.bytes(8) != MEMBER_MAGIC:
            raise CorruptionError("bad membership message magic")
        version, kind, epoch = r.take("HBQ")
        if version != MEMBER_VERSION:
            raise CorruptionError(f"unsupported membership message version {version}")
        sender = r.text()
        members = tuple(r.text() for _ in range(r.take("H")))
        r.done()
        return cls(kind, sender, epoch, members)


def read_member_file(path) -> dict[NodeId, tuple[str, int]]:
    """Static member list: one ``node_id host:port`` per line; ``#`` comments."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            node, addr = line.split()
            host, port = addr.rsplit(":", 1)
            out[node] = (host, int(port))
        except ValueError as exc:
            raise CorruptionError(f"member file line {lineno}: expected 'node_id host:port'", path) from exc
    return out
