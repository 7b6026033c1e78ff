"""In-memory result store with TTL, fetch-once purge and async replication.

:class:`DbStore` is the state of one database instance.  It never talks
to peers directly: replication copies and purge hints are queued in
:attr:`DbStore.outbox` and the caller (the simulator, or a test) decides
whether and when they are delivered.

Store messages travel over ring buffers as ordinary workflow messages
whose ``stage`` is :data:`STORE_STAGE`; ``app_id`` carries the kind and
the payload starts with ``stored_at`` and ``ttl`` (two little-endian u64).
"""
from __future__ import annotations

import struct
import uuid
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

from .message import MalformedMessage, WorkflowMessage

DEFAULT_TTL = 600
STORE_STAGE = 0xFFFF
_STORE_HEAD = struct.Struct("<QQ")


class PutConflict(ValueError):
    """A uid was stored again with a different payload."""


class StoreKind(IntEnum):
    PUT = 1
    REPLICATE = 2
    PURGE_HINT = 3


@dataclass(frozen=True)
class StoreMessage:
    kind: StoreKind
    uid: uuid.UUID
    stored_at: int = 0
    ttl: int = 0
    payload: bytes = b""
    replicas: tuple[int, ...] = ()

    def to_workflow(self) -> WorkflowMessage:
        return WorkflowMessage(self.uid, self.stored_at, int(self.kind), STORE_STAGE,
                               _STORE_HEAD.pack(self.stored_at, self.ttl) + self.payload)

    @classmethod
    def from_workflow(cls, msg: WorkflowMessage) -> "StoreMessage":
        if msg.stage != STORE_STAGE:
            raise MalformedMessage(f"stage {msg.stage} is not a store message")
        try:
            kind = StoreKind(msg.app_id)
        except ValueError as exc:
            raise MalformedMessage(f"unknown store message kind {msg.app_id}") from exc
        if len(msg.payload) < _STORE_HEAD.size:
            raise MalformedMessage("store message shorter than its fixed fields")
        stored_at, ttl = _STORE_HEAD.unpack_from(msg.payload)
        return cls(kind, msg.uid, stored_at, ttl, msg.payload[_STORE_HEAD.size:])


@dataclass
class StoredResult:
    uid: uuid.UUID
    payload: bytes
    stored_at: int
    ttl: int
    replicas: tuple[int, ...] = ()

    def expired(self, now: int) -> bool:
        return now - self.stored_at > self.ttl


@dataclass
class StoreStats:
    puts: int = 0
    replicas_stored: int = 0
    hits: int = 0
    misses: int = 0
    expired: int = 0
    fetch_purges: int = 0
    hint_purges: int = 0


@dataclass
class DbStore:
    instance_id: int
    ttl: int = DEFAULT_TTL
    alive: bool = True
    entries: dict[uuid.UUID, StoredResult] = field(default_factory=dict)
    outbox: list[tuple[int, StoreMessage]] = field(default_factory=list)
    stats: StoreStats = field(default_factory=StoreStats)
    # uids this instance has already handed to a client; late copies are ignored
    _served: set[uuid.UUID] = field(default_factory=set)

    def put(self, uid: uuid.UUID, payload: bytes, now: int, peers: Sequence[int] = (),
            ttl: int | None = None) -> StoredResult:
        """Store locally and queue one replication message per peer."""
        ttl = self.ttl if ttl is None else ttl
        current = self.entries.get(uid)
        if current is not None and not current.expired(now):
            if current.payload != payload:
                raise PutConflict(f"uid {uid} already stored with a different payload")
            return current
        rec = StoredResult(uid, bytes(payload), now, ttl, (self.instance_id, *peers))
        self.entries[uid] = rec
        self.stats.puts += 1
        for peer in peers:
            self.outbox.append((peer, StoreMessage(StoreKind.REPLICATE, uid, now, ttl, rec.payload,
                                                   rec.replicas)))
        return rec

    def replicate(self, msg: StoreMessage, now: int) -> bool:
        """Accept a peer's copy; returns whether it was stored."""
        if msg.uid in self._served or msg.uid in self.entries:
            return False
        rec = StoredResult(msg.uid, msg.payload, msg.stored_at, msg.ttl, msg.replicas)
        if rec.expired(now):
            return False
        self.entries[msg.uid] = rec
        self.stats.replicas_stored += 1
        return True

    def get(self, uid: uuid.UUID, now: int) -> bytes | None:
        """Payload on a hit (then purged here, with hints queued); ``None`` on a miss."""
        if not self.alive:
            return None
        rec = self.entries.get(uid)
        if rec is None:
            self.stats.misses += 1
            return None
        if rec.expired(now):
            del self.entries[uid]
            self.stats.expired += 1
            self.stats.misses += 1
            return None
        del self.entries[uid]
        self._served.add(uid)
        self.stats.hits += 1
        self.stats.fetch_purges += 1
        for peer in rec.replicas:
            if peer != self.instance_id:
                self.outbox.append((peer, StoreMessage(StoreKind.PURGE_HINT, uid)))
        return rec.payload

    def purge_hint(self, uid: uuid.UUID) -> bool:
        self._served.add(uid)
        if self.entries.pop(uid, None) is not None:
            self.stats.hint_purges += 1
            return True
        return False

    def receive(self, msg: StoreMessage, now: int) -> None:
        if msg.kind is StoreKind.REPLICATE:
            self.replicate(msg, now)
        elif msg.kind is StoreKind.PURGE_HINT:
            self.purge_hint(msg.uid)
        else:
            self.put(msg.uid, msg.payload, now, ttl=msg.ttl or None)

    def maintenance(self, now: int) -> int:
        """Drop every expired entry; returns how many went."""
        dead = [uid for uid, rec in self.entries.items() if rec.expired(now)]
        for uid in dead:
            del self.entries[uid]
        self.stats.expired += len(dead)
        return len(dead)

    def live_count(self, now: int) -> int:
        return sum(1 for rec in self.entries.values() if not rec.expired(now))

    def crash(self) -> None:
        self.alive = False
        self.entries.clear()
        self.outbox.clear()

    def take_outbox(self) -> list[tuple[int, StoreMessage]]:
        out, self.outbox = self.outbox, []
        return out

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class FetchResult:
    payload: bytes | None
    attempts: int
    instance_id: int | None = None

    @property
    def found(self) -> bool:
        return self.payload is not None


def client_fetch(instances: Sequence[DbStore], uid: uuid.UUID, now: int) -> FetchResult:
    """Ask one instance at a time, in order, until one has the result."""
    if not instances:
        raise ValueError("client_fetch needs at least one database instance")
    for attempt, db in enumerate(instances, start=1):
        payload = db.get(uid, now)
        if payload is not None:
            return FetchResult(payload, attempt, db.instance_id)
    return FetchResult(None, len(instances))


def replica_peers(origin_index: int, instance_ids: Sequence[int], replicas: int) -> list[int]:
    """The ``replicas - 1`` instances after ``origin_index`` in ring order."""
    n = len(instance_ids)
    count = min(max(replicas - 1, 0), n - 1)
    return [instance_ids[(origin_index + i) % n] for i in range(1, count + 1)]
