"""Multi-producer / single-consumer ring buffer for variable-size entries.

Everything lives in one registered region owned by the consumer's node::

    offset          size            contents
    0               8               lock word   (owner:16 | acquired_at:48)
    8               8               tail word   (P_b:32  | tail_seq:32)
    16              8               head word   (H_b:32  | head_seq:32)
    24              buffer_size     buffer region (entries, never straddling the end)
    24+buffer_size  8*slot_count    size region (busy:1 | size:63 per slot)

Producers are remote and touch the region only through fabric operations;
the consumer reads and writes it locally.  Slot positions are kept as
32-bit sequence counters: ``P_size = tail_seq % slot_count`` and
``H_size = head_seq % slot_count``.  The counters let a producer tell "the
tail is behind the consumer" apart from "the ring is full", which matters
once stale header writes land late.

A producer append is the sequence of atomic steps ``Lock, GH, [UH fix],
WB, WL, UH, Unlock``.  Each step is a generator method so that a replay
can interleave producers one step at a time, while a simulation can run
:meth:`Producer.append` as a single process.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Generator

from .fabric import Completion, Fabric, RegionHandle
from .message import ENTRY_OVERHEAD, MalformedMessage, WorkflowMessage, unframe_entry

LOCK_OFFSET = 0
TAIL_OFFSET = 8
HEAD_OFFSET = 16
BUFFER_OFFSET = 24
SLOT_BYTES = 8

BUSY_BIT = 1 << 63
SIZE_MASK = BUSY_BIT - 1
OWNER_BITS = 16
TICK_BITS = 48
TICK_MASK = (1 << TICK_BITS) - 1
SEQ_MOD = 1 << 32

_U64 = struct.Struct("<Q")
_TWO_WORDS = struct.Struct("<QQ")

DEFAULT_BUFFER_SIZE = 1 << 20
DEFAULT_SLOT_COUNT = 1024
DEFAULT_LOCK_TIMEOUT = 50


def pack_lock(owner: int, tick: int) -> int:
    if not 0 < owner < 1 << OWNER_BITS:
        raise ValueError(f"lock owner id must be in [1, {1 << OWNER_BITS}), got {owner}")
    return (owner << TICK_BITS) | (tick & TICK_MASK)


def unpack_lock(word: int) -> tuple[int, int]:
    return word >> TICK_BITS, word & TICK_MASK


def pack_pointer(byte_pos: int, seq: int) -> int:
    return (byte_pos << 32) | (seq % SEQ_MOD)


def unpack_pointer(word: int) -> tuple[int, int]:
    return word >> 32, word & 0xFFFFFFFF


def seq_diff(a: int, b: int) -> int:
    """Signed distance a - b between two 32-bit sequence counters."""
    d = (a - b) % SEQ_MOD
    return d - SEQ_MOD if d >= SEQ_MOD // 2 else d


def place(tail: int, size: int, region_size: int) -> int:
    """Where an entry of ``size`` bytes goes when the tail is at ``tail``.

    Entries never straddle the end; if the gap to the end is too small the
    entry starts at 0 and the gap is dead space.
    """
    return tail if tail + size <= region_size else 0


def after(pos: int, size: int, region_size: int) -> int:
    """Tail after an entry placed at ``pos``: ``pos+size``, or 0 at the end."""
    nxt = pos + size
    return nxt if nxt < region_size else 0


def free_position(tail: int, head: int, nonempty: bool, size: int, region_size: int) -> int | None:
    """Offset for a new entry, or ``None`` if it would run into unconsumed data.

    ``[head, tail)`` (circularly) is occupied when ``nonempty``.
    """
    if size > region_size:
        return None
    pos = place(tail, size, region_size)
    if not nonempty:
        return pos
    if tail > head:
        # free space is [tail, end) and [0, head)
        if pos == tail or pos + size <= head:
            return pos
        return None
    if tail < head:
        return pos if pos == tail and pos + size <= head else None
    return None


@dataclass(frozen=True)
class RingConfig:
    buffer_size: int = DEFAULT_BUFFER_SIZE
    slot_count: int = DEFAULT_SLOT_COUNT
    lock_timeout: int = DEFAULT_LOCK_TIMEOUT
    retry_budget: int | None = None

    def __post_init__(self) -> None:
        if not ENTRY_OVERHEAD <= self.buffer_size < 1 << 32:
            raise ValueError(f"buffer_size {self.buffer_size} out of range")
        if self.slot_count < 1 or self.slot_count & (self.slot_count - 1):
            raise ValueError(f"slot_count must be a power of two, got {self.slot_count}")
        if self.lock_timeout < 1:
            raise ValueError("lock_timeout must be at least one tick")

    @property
    def spin_budget(self) -> int:
        return 3 * self.lock_timeout if self.retry_budget is None else self.retry_budget


@dataclass(frozen=True)
class RingLayout:
    region: RegionHandle
    buffer_size: int
    slot_count: int

    @property
    def size_region_offset(self) -> int:
        return BUFFER_OFFSET + self.buffer_size

    def slot_offset(self, seq: int) -> int:
        return self.size_region_offset + SLOT_BYTES * (seq % self.slot_count)

    @staticmethod
    def region_length(buffer_size: int, slot_count: int) -> int:
        return BUFFER_OFFSET + buffer_size + SLOT_BYTES * slot_count


def create_ring(fabric: Fabric, owner: int, config: RingConfig | None = None) -> RingLayout:
    config = config or RingConfig()
    length = RingLayout.region_length(config.buffer_size, config.slot_count)
    region = fabric.register_region(owner, length)
    return RingLayout(region, config.buffer_size, config.slot_count)


@dataclass(frozen=True)
class SizeSlot:
    busy: bool
    size: int

    @classmethod
    def from_word(cls, word: int) -> "SizeSlot":
        return cls(bool(word & BUSY_BIT), word & SIZE_MASK)

    def to_word(self) -> int:
        return (BUSY_BIT if self.busy else 0) | self.size


@dataclass(frozen=True)
class RingState:
    """Omniscient snapshot of the control words (tests and reports only)."""

    lock_owner: int
    lock_tick: int
    tail_b: int
    tail_seq: int
    head_b: int
    head_seq: int
    slot_count: int

    @property
    def locked(self) -> bool:
        return self.lock_owner != 0 or self.lock_tick != 0

    @property
    def tail_slot(self) -> int:
        return self.tail_seq % self.slot_count

    @property
    def head_slot(self) -> int:
        return self.head_seq % self.slot_count


def ring_state(fabric: Fabric, ring: RingLayout) -> RingState:
    lock = fabric.peek_word(ring.region, LOCK_OFFSET)
    tail_b, tail_seq = unpack_pointer(fabric.peek_word(ring.region, TAIL_OFFSET))
    head_b, head_seq = unpack_pointer(fabric.peek_word(ring.region, HEAD_OFFSET))
    owner, tick = unpack_lock(lock)
    return RingState(owner, tick, tail_b, tail_seq, head_b, head_seq, ring.slot_count)


def read_slot(fabric: Fabric, ring: RingLayout, index: int) -> SizeSlot:
    return SizeSlot.from_word(fabric.peek_word(ring.region, ring.slot_offset(index)))


class LockStatus(str, Enum):
    ACQUIRED = "acquired"
    STOLEN = "stolen_then_acquired"
    BUSY = "busy"


class GhStatus(str, Enum):
    CLEAN = "clean"
    STALE_SLOT_ADVANCED = "stale_slot_advanced"
    FULL = "full"


class AppendStatus(str, Enum):
    COMMITTED = "committed"
    FULL = "full"
    LOCK_BUSY = "lock_timeout_steal_failed"
    RACE_LOST = "race_lost"
    LOST = "lost"


class SenderLost(Exception):
    """One of the producer's operations was dropped; it issues nothing more."""


class ProtocolError(RuntimeError):
    """A producer step was invoked out of order."""


Step = Generator[Completion, Completion, object]


class Producer:
    """A remote sender appending entries through one-sided operations."""

    def __init__(self, fabric: Fabric, ring: RingLayout, node_id: int,
                 config: RingConfig | None = None, name: str | None = None) -> None:
        self.fabric = fabric
        self.ring = ring
        self.node = node_id
        self.config = config or RingConfig(ring.buffer_size, ring.slot_count)
        self.name = name or str(node_id)
        self._reset()

    def _reset(self) -> None:
        self.token: int | None = None
        self.entry: bytes = b""
        self.header_tail: tuple[int, int] | None = None
        self.tail: tuple[int, int] | None = None
        self.pos: int | None = None
        self.fix_pending = False
        self.wl_ok: bool | None = None
        self.last_lock: LockStatus | None = None

    @property
    def seq(self) -> int | None:
        return None if self.tail is None else self.tail[1]

    def prepare(self, entry: bytes) -> None:
        if len(entry) > self.ring.buffer_size:
            raise ValueError(f"entry of {len(entry)} bytes exceeds buffer region of {self.ring.buffer_size}")
        if not entry:
            raise ValueError("empty entry")
        self._reset()
        self.entry = bytes(entry)

    def _op(self, comp: Completion) -> Step:
        done = yield comp
        if done.dropped:
            raise SenderLost(done.op.label)
        return done

    # -- steps ----------------------------------------------------------------

    def lock(self) -> Step:
        """CAS spin-lock step with timeout-based steal."""
        f, region = self.fabric, self.ring.region
        token = pack_lock(self.node, f.now)
        c = yield from self._op(f.cas(self.node, region, LOCK_OFFSET, 0, token, label="Lock", meta=self))
        if c.value.swapped:
            self.token = token
            self.last_lock = LockStatus.ACQUIRED
            return LockStatus.ACQUIRED
        observed = c.value.observed
        _, acquired_at = unpack_lock(observed)
        if (f.now - acquired_at) & TICK_MASK > self.config.lock_timeout:
            token = pack_lock(self.node, f.now)
            c = yield from self._op(f.cas(self.node, region, LOCK_OFFSET, observed, token,
                                          label="Lock", meta=self))
            if c.value.swapped:
                self.token = token
                self.last_lock = LockStatus.STOLEN
                return LockStatus.STOLEN
        self.last_lock = LockStatus.BUSY
        return LockStatus.BUSY

    def gh(self) -> Step:
        """Read the header, skip slots committed by lost senders, check space."""
        if self.token is None:
            raise ProtocolError("GH before Lock")
        f, ring = self.fabric, self.ring
        size_region = ring.buffer_size
        while True:
            c = yield from self._op(f.read(self.node, ring.region, TAIL_OFFSET, 16, label="GH", meta=self))
            tail_word, head_word = _TWO_WORDS.unpack(c.value)
            tail_b, tail_seq = unpack_pointer(tail_word)
            head_b, head_seq = unpack_pointer(head_word)
            self.header_tail = (tail_b, tail_seq)
            b, seq = tail_b, tail_seq
            if seq_diff(head_seq, seq) >= 0:
                # Nothing unconsumed: the consumer's position is authoritative.  A
                # late stale UH can leave the tail behind the head, or at the
                # head's slot with a different byte offset.
                b, seq = head_b, head_seq
            advanced = False
            restart = False
            while True:
                if seq_diff(seq, head_seq) >= ring.slot_count:
                    return GhStatus.FULL
                c = yield from self._op(f.read(self.node, ring.region, ring.slot_offset(seq),
                                               SLOT_BYTES, label="GH", meta=self))
                word = _U64.unpack(c.value)[0]
                if not word & BUSY_BIT:
                    break
                # The slot is only meaningful for ``seq`` if the consumer has not
                # passed it; otherwise it may hold a late WL for a later lap.
                c = yield from self._op(f.read(self.node, ring.region, HEAD_OFFSET, 8, label="GH", meta=self))
                if seq_diff(unpack_pointer(_U64.unpack(c.value)[0])[1], seq) > 0:
                    restart = True
                    break
                size = word & SIZE_MASK
                # A late WL can mark a reused slot with a size that does not fit
                # the current chain; treat it as full until the consumer passes it.
                start = free_position(b, head_b, seq != head_seq, size, size_region)
                if start is None:
                    return GhStatus.FULL
                b = after(start, size, size_region)
                seq = (seq + 1) % SEQ_MOD
                advanced = True
            if not restart:
                break
        pos = free_position(b, head_b, seq != head_seq, len(self.entry), size_region)
        if pos is None:
            return GhStatus.FULL
        self.tail = (b, seq)
        self.pos = pos
        self.fix_pending = (b, seq) != (tail_b, tail_seq)
        return GhStatus.STALE_SLOT_ADVANCED if advanced else GhStatus.CLEAN

    def fix_header(self) -> Step:
        """Publish the tail recomputed by GH before writing anything new."""
        if self.tail is None:
            raise ProtocolError("UH fix before GH")
        b, seq = self.tail
        yield from self._op(self.fabric.write(self.node, self.ring.region, TAIL_OFFSET,
                                              _U64.pack(pack_pointer(b, seq)), label="UH", meta=self))
        self.fix_pending = False

    def wb(self) -> Step:
        if self.pos is None:
            raise ProtocolError("WB before GH")
        yield from self._op(self.fabric.write(self.node, self.ring.region, BUFFER_OFFSET + self.pos,
                                              self.entry, label="WB", meta=self))

    def wl(self) -> Step:
        """Set busy|size on the tail slot; fails silently if already busy."""
        if self.tail is None:
            raise ProtocolError("WL before GH")
        c = yield from self._op(self.fabric.cas(self.node, self.ring.region, self.ring.slot_offset(self.tail[1]),
                                                0, BUSY_BIT | len(self.entry), label="WL", meta=self))
        self.wl_ok = c.value.swapped
        return self.wl_ok

    def uh(self) -> Step:
        if self.pos is None or self.tail is None:
            raise ProtocolError("UH before GH")
        nxt = after(self.pos, len(self.entry), self.ring.buffer_size)
        word = pack_pointer(nxt, self.tail[1] + 1)
        yield from self._op(self.fabric.write(self.node, self.ring.region, TAIL_OFFSET,
                                              _U64.pack(word), label="UH", meta=self))

    def unlock(self) -> Step:
        """Release only a lock we still hold (CAS token -> 0)."""
        if self.token is None:
            return False
        c = yield from self._op(self.fabric.cas(self.node, self.ring.region, LOCK_OFFSET, self.token, 0,
                                                label="Unlock", meta=self))
        released = c.value.swapped
        self.token = None
        return released

    def step(self, action: str) -> Step:
        """Run one named atomic action (``Lock``, ``GH``, ``WB``, ``WL``, ``UH``, ``Unlock``).

        ``UH`` is the stale-slot header fix when GH left one pending and no
        WL has happened yet, otherwise the commit update.
        """
        if action == "Lock":
            return (yield from self.lock())
        if action == "GH":
            return (yield from self.gh())
        if action == "WB":
            return (yield from self.wb())
        if action == "WL":
            return (yield from self.wl())
        if action == "UH":
            if self.fix_pending and self.wl_ok is None:
                return (yield from self.fix_header())
            return (yield from self.uh())
        if action == "Unlock":
            return (yield from self.unlock())
        raise ProtocolError(f"unknown producer action {action!r}")

    # -- full protocol ----------------------------------------------------------

    def append(self, entry: bytes) -> Step:
        """Append one entry; returns an :class:`AppendStatus`.

        Spins on the lock (one retry per tick) for at most the configured
        budget.  Must run as a scheduler process unless the lock is free.
        """
        self.prepare(entry)
        deadline = self.fabric.now + self.config.spin_budget
        try:
            while True:
                status = yield from self.lock()
                if status is not LockStatus.BUSY:
                    break
                if self.fabric.now >= deadline:
                    return AppendStatus.LOCK_BUSY
                yield 1
            gh = yield from self.gh()
            if gh is GhStatus.FULL:
                yield from self.unlock()
                return AppendStatus.FULL
            if self.fix_pending:
                yield from self.fix_header()
            yield from self.wb()
            if not (yield from self.wl()):
                yield from self.unlock()
                return AppendStatus.RACE_LOST
            yield from self.uh()
            yield from self.unlock()
            return AppendStatus.COMMITTED
        except SenderLost:
            return AppendStatus.LOST


class PollStatus(str, Enum):
    EMPTY = "empty"
    ENTRY = "entry"
    CORRUPT = "corrupt_skipped"


@dataclass(frozen=True)
class PollResult:
    status: PollStatus
    data: bytes | None = None
    message: WorkflowMessage | None = None
    seq: int | None = None
    pos: int | None = None
    size: int | None = None

    def __bool__(self) -> bool:
        return self.status is not PollStatus.EMPTY


EMPTY = PollResult(PollStatus.EMPTY)


class Consumer:
    """The single co-located receiver; its local accesses never fail."""

    def __init__(self, fabric: Fabric, ring: RingLayout) -> None:
        self.fabric = fabric
        self.ring = ring
        self.node = ring.region.owner

    def poll(self) -> PollResult:
        f, ring, node = self.fabric, self.ring, self.node
        head_b, head_seq = unpack_pointer(f.local_read_word(node, ring.region, HEAD_OFFSET))
        slot_off = ring.slot_offset(head_seq)
        word = f.local_read_word(node, ring.region, slot_off)
        if not word & BUSY_BIT:
            return EMPTY
        size = word & SIZE_MASK
        region_size = ring.buffer_size
        pos = place(head_b, size, region_size)
        data = f.local_read(node, ring.region, BUFFER_OFFSET + pos, min(size, region_size - pos))
        try:
            msg = unframe_entry(data) if len(data) == size else None
        except MalformedMessage:
            msg = None
        f.local_write_word(node, ring.region, slot_off, 0, label="clear")
        f.local_write_word(node, ring.region, HEAD_OFFSET,
                           pack_pointer(after(pos, size, region_size), head_seq + 1), label="head")
        if msg is None:
            return PollResult(PollStatus.CORRUPT, data, None, head_seq, pos, size)
        return PollResult(PollStatus.ENTRY, data, msg, head_seq, pos, size)

    def drain(self, limit: int | None = None) -> list[PollResult]:
        out = []
        while limit is None or len(out) < limit:
            res = self.poll()
            if not res:
                break
            out.append(res)
        return out
