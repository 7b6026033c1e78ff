"""Randomised checkers for the ring buffer.

Two harnesses drive real :class:`~aigcflow.ringbuf.Producer` and
:class:`~aigcflow.ringbuf.Consumer` objects through the scheduler:

* :func:`fifo_sequence` runs a fault-free append/poll mix from several
  producers and compares every outcome with :class:`QueueOracle`, a
  byte-occupancy model that knows nothing about header words.
* :func:`fault_run` injects drops and delays (bounded by ``4*TL``) and
  audits busy-bit transitions, reachability of every committed slot,
  confinement of checksum failures to stale writes, and that a fresh
  producer can still get an entry through at the end.

Both return plain result objects; an empty ``problems`` list means pass.
"""
from __future__ import annotations

import random
import uuid
from collections import deque
from dataclasses import dataclass, field

from .fabric import (
    Action,
    Completion,
    Fabric,
    FabricOp,
    FaultSchedule,
    OpKind,
    Rule,
    Scheduler,
    PRIO_POLL,
)
from .message import ENTRY_OVERHEAD, WorkflowMessage, frame_entry
from .ringbuf import (
    BUFFER_OFFSET,
    BUSY_BIT,
    HEAD_OFFSET,
    LOCK_OFFSET,
    SLOT_BYTES,
    TAIL_OFFSET,
    AppendStatus,
    Consumer,
    PollStatus,
    Producer,
    RingConfig,
    RingLayout,
    create_ring,
    seq_diff,
    unpack_pointer,
)

CONSUMER_NODE = 1000
_WORD = SLOT_BYTES


def random_entry(rng: random.Random, max_size: int, min_size: int = ENTRY_OVERHEAD) -> bytes:
    size = rng.randint(min_size, max_size)
    msg = WorkflowMessage(uuid.UUID(int=rng.getrandbits(128)), rng.getrandbits(32),
                          rng.randint(1, 4), rng.randint(0, 7), rng.randbytes(size - ENTRY_OVERHEAD))
    return frame_entry(msg)


# --------------------------------------------------------------------------
# fault-free oracle


@dataclass
class _Claim:
    entry: bytes
    pos: int
    ranges: list[tuple[int, int]]
    visible: bool = False


class QueueOracle:
    """Single-threaded reference queue over a byte-occupancy map.

    Entries are laid out contiguously from a running tail; an entry that
    does not fit before the end starts at 0 and also owns the skipped gap
    until it is consumed.  An append is refused when it would need a byte
    that is still owned or when ``slot_count`` entries are live.
    """

    def __init__(self, region_size: int, slot_count: int) -> None:
        self.region_size = region_size
        self.slot_count = slot_count
        self.owned = bytearray(region_size)
        self.tail = 0
        self.queue: deque[_Claim] = deque()

    def claim(self, entry: bytes) -> _Claim | None:
        size, end = len(entry), self.region_size
        if len(self.queue) >= self.slot_count or size > end:
            return None
        if self.tail + size <= end:
            pos, ranges = self.tail, [(self.tail, self.tail + size)]
        else:
            pos, ranges = 0, [(0, size), (self.tail, end)]
        if any(any(self.owned[lo:hi]) for lo, hi in ranges):
            return None
        for lo, hi in ranges:
            self.owned[lo:hi] = b"\x01" * (hi - lo)
        self.tail = (pos + size) % end
        c = _Claim(bytes(entry), pos, ranges)
        self.queue.append(c)
        return c

    def front(self) -> _Claim | None:
        return self.queue[0] if self.queue else None

    def consume(self) -> _Claim:
        c = self.queue.popleft()
        for lo, hi in c.ranges:
            self.owned[lo:hi] = bytes(hi - lo)
        return c


@dataclass
class FifoResult:
    seed: int
    producers: int
    appends: int = 0
    committed: int = 0
    full: int = 0
    polls: int = 0
    reads: int = 0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def fifo_sequence(seed: int, max_ops: int = 24) -> FifoResult:
    """One randomised fault-free append/poll sequence checked against the oracle."""
    rng = random.Random(seed)
    n_prod = rng.randint(2, 8)
    buffer_size = rng.choice((256, 384, 512, 1024))
    slot_count = rng.choice((2, 4, 8, 16))
    config = RingConfig(buffer_size, slot_count, lock_timeout=50)
    sched = Scheduler()
    fabric = Fabric(sched, latency=1, keep_log=False)
    ring = create_ring(fabric, CONSUMER_NODE, config)
    consumer = Consumer(fabric, ring)
    oracle = QueueOracle(buffer_size, slot_count)
    res = FifoResult(seed, n_prod)
    problems = res.problems
    claims: dict[int, _Claim | None] = {}   # producer node -> claim for the current append
    read_uids: set[bytes] = set()

    def observe(op: FabricOp, comp: Completion, before: bytes) -> None:
        p = op.meta
        if p is None:
            return
        if op.label == "GH" and op.offset == TAIL_OFFSET:
            claims[p.node] = oracle.claim(p.entry)
        elif op.label == "WL" and comp.value.swapped:
            c = claims.get(p.node)
            if c is None:
                problems.append(f"t={fabric.now} producer {p.node} committed but the oracle refused it")
            elif c.pos != p.pos:
                problems.append(f"t={fabric.now} producer {p.node} wrote at {p.pos}, oracle says {c.pos}")
            else:
                c.visible = True
        elif op.label == "UH":
            # pointer formulas: P_b <- place(P_b)+size (0 at the end), P_size <- P_size+1
            b0, s0 = unpack_pointer(int.from_bytes(before, "little"))
            b1, s1 = unpack_pointer(int.from_bytes(op.payload, "little"))
            size = len(p.entry)
            start = b0 if b0 + size <= buffer_size else 0
            want_b = 0 if start + size >= buffer_size else start + size
            if p.wl_ok is not True:
                problems.append(f"t={fabric.now} header fix UH in a fault-free run")
            elif (b1, s1) != (want_b, (s0 + 1) % (1 << 32)):
                problems.append(f"t={fabric.now} UH wrote ({b1},{s1}) after ({b0},{s0}), "
                                f"expected ({want_b},{s0 + 1})")

    fabric.observers.append(observe)

    def check_poll() -> None:
        out = consumer.poll()
        res.polls += 1
        c = oracle.front()
        if c is None or not c.visible:
            if out:
                problems.append(f"t={fabric.now} poll returned {out.status.value}, oracle has nothing visible")
            return
        if out.status is not PollStatus.ENTRY:
            problems.append(f"t={fabric.now} poll returned {out.status.value}, oracle expected an entry")
            return
        oracle.consume()
        res.reads += 1
        if out.data != c.entry or out.pos != c.pos:
            problems.append(f"t={fabric.now} poll read {len(out.data)}B at {out.pos}, "
                            f"oracle expected {len(c.entry)}B at {c.pos}")
        uid = out.message.uid.bytes
        if uid in read_uids:
            problems.append(f"t={fabric.now} duplicate read of {out.message.uid}")
        read_uids.add(uid)

    n_ops = rng.randint(max_ops // 2, max_ops)
    horizon = 4 * n_ops
    jobs: dict[int, list[tuple[int, bytes]]] = {}
    max_entry = min(buffer_size // 2, 220)
    for _ in range(n_ops):
        t = rng.randint(0, horizon)
        if rng.random() < 0.55:
            node = rng.randint(1, n_prod)
            jobs.setdefault(node, []).append((t, random_entry(rng, max_entry)))
        else:
            sched.call_at(t, check_poll, priority=PRIO_POLL)

    def run_jobs(p: Producer, items: list[tuple[int, bytes]]):
        for start, entry in sorted(items, key=lambda x: x[0]):
            if fabric.now < start:
                yield start - fabric.now
            claims.pop(p.node, None)
            status = yield from p.append(entry)
            res.appends += 1
            claim = claims.get(p.node, "missing")
            if status is AppendStatus.COMMITTED:
                res.committed += 1
                if claim is None or claim == "missing":
                    problems.append(f"t={fabric.now} producer {p.node} committed without an oracle claim")
            elif status is AppendStatus.FULL:
                res.full += 1
                if claim is not None:
                    problems.append(f"t={fabric.now} producer {p.node} got FULL, oracle found room")
            else:
                problems.append(f"t={fabric.now} producer {p.node} unexpected status {status.value}")

    for node, items in sorted(jobs.items()):
        sched.spawn(run_jobs(Producer(fabric, ring, node, config), items), name=f"p{node}")
    sched.run()

    while oracle.front() is not None:
        before = len(problems)
        check_poll()
        if len(problems) > before:
            break
    if consumer.poll():
        problems.append("ring still returns data after the oracle is empty")
    if fabric.peek_word(ring.region, LOCK_OFFSET) != 0:
        problems.append("lock still held at the end of a fault-free run")
    return res


# --------------------------------------------------------------------------
# fault fuzz


@dataclass
class FaultResult:
    seed: int
    lock_timeout: int
    statuses: dict[str, int] = field(default_factory=dict)
    committed_slots: int = 0
    phantoms: int = 0
    reads: int = 0
    corrupt: int = 0
    stale_ops: int = 0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def fault_schedule_for(seed: int, lock_timeout: int, rng: random.Random) -> FaultSchedule:
    """Seeded drops plus delays of 1..4*TL ticks on producer operations."""
    p_drop = rng.choice((0.0, 0.01, 0.03))
    p_delay = rng.choice((0.05, 0.15, 0.3))
    return FaultSchedule(seed=seed, rules=(
        Rule(Action.DROP, probability=p_drop),
        Rule(Action.DELAY, ticks=1, max_ticks=4 * lock_timeout, probability=p_delay),
    ))


class _StaleTracker:
    """Remembers producer writes that landed after their lock was taken over."""

    def __init__(self, ring: RingLayout) -> None:
        self.ring = ring
        self.wb: list[tuple[int, int, int]] = []      # (tick, lo, hi) buffer offsets
        self.wl: list[tuple[int, int]] = []           # (tick, slot index)

    def add(self, op: FabricOp, tick: int) -> None:
        if op.label == "WB":
            lo = op.offset - BUFFER_OFFSET
            self.wb.append((tick, lo, lo + len(op.payload)))
        elif op.label == "WL":
            index = (op.offset - self.ring.size_region_offset) // SLOT_BYTES
            self.wl.append((tick, index))

    def explains(self, lo: int, hi: int, index: int, since: int, until: int) -> bool:
        for t, a, b in self.wb:
            if since <= t <= until and a < hi and lo < b:
                return True
        return any(since <= t <= until and i == index for t, i in self.wl)


def fault_run(seed: int) -> FaultResult:
    """One seeded fault schedule with all audits."""
    rng = random.Random(seed)
    tl = rng.choice((4, 6, 8, 12, 16))
    buffer_size = rng.choice((384, 512, 1024))
    slot_count = rng.choice((4, 8, 16))
    config = RingConfig(buffer_size, slot_count, lock_timeout=tl)
    sched = Scheduler()
    fabric = Fabric(sched, fault_schedule_for(seed, tl, rng), latency=1, keep_log=False)
    ring = create_ring(fabric, CONSUMER_NODE, config)
    consumer = Consumer(fabric, ring)
    res = FaultResult(seed, tl)
    problems = res.problems
    stale = _StaleTracker(ring)
    slot_lo = ring.size_region_offset
    slot_hi = slot_lo + SLOT_BYTES * slot_count
    last_read_at = [0] * slot_count
    commits: list[tuple[int, int, int]] = []   # (seq, pos, tick) of WLs that landed on a live slot
    last_wb: dict[int, FabricOp] = {}
    last_wb_tick: dict[int, int] = {}

    def observe(op: FabricOp, comp: Completion, before: bytes) -> None:
        # busy-bit transitions: 0->1 only by a WL CAS, 1->0 only by the consumer clear
        if op.kind is not OpKind.READ and op.offset < slot_hi and op.offset + op.span > slot_lo:
            if op.kind is OpKind.CAS:
                after_word = op.new if comp.value.swapped else comp.value.observed
            else:
                after_word = int.from_bytes(op.payload[:_WORD], "little")
            was, now = bool(int.from_bytes(before[:_WORD], "little") & BUSY_BIT), bool(after_word & BUSY_BIT)
            if not was and now and not (op.kind is OpKind.CAS and op.label == "WL"):
                problems.append(f"t={fabric.now} busy bit set by {op.label}")
            if was and not now and op.label != "clear":
                problems.append(f"t={fabric.now} busy bit cleared by {op.label}")
            if op.kind is OpKind.WRITE and op.label != "clear":
                problems.append(f"t={fabric.now} {op.label} wrote into the size region")
        p = op.meta
        if p is None or op.label not in ("WB", "WL", "UH"):
            return
        if op.kind is OpKind.CAS and not comp.value.swapped:
            return
        is_stale = fabric.peek_word(ring.region, LOCK_OFFSET) != p.token
        if op.label == "WB":
            last_wb[p.node] = op
        elif op.label == "WL":
            seq = p.tail[1]
            _, head_seq = unpack_pointer(fabric.peek_word(ring.region, HEAD_OFFSET))
            if seq_diff(seq, head_seq) < 0:
                # The consumer already passed this sequence, so the slot now
                # belongs to a later lap: the whole append is stale.
                res.phantoms += 1
                if not is_stale and p.node in last_wb:
                    stale.add(last_wb[p.node], last_wb_tick[p.node])
                is_stale = True
            else:
                commits.append((seq, p.pos, fabric.now))
        if op.label == "WB":
            last_wb_tick[p.node] = fabric.now
        if is_stale:
            res.stale_ops += 1
            stale.add(op, fabric.now)

    fabric.observers.append(observe)
    reads: dict[int, tuple[int, PollStatus]] = {}

    def record(out) -> None:
        res.reads += 1
        index = out.seq % slot_count
        if out.seq in reads:
            problems.append(f"t={fabric.now} sequence {out.seq} read twice")
        reads[out.seq] = (out.pos, out.status)
        if out.status is PollStatus.CORRUPT:
            res.corrupt += 1
            lo, hi = out.pos, out.pos + out.size
            if not stale.explains(lo, hi, index, last_read_at[index], fabric.now):
                problems.append(f"t={fabric.now} checksum failure at [{lo},{hi}) seq {out.seq} "
                                f"not overlapped by any stale write")
        last_read_at[index] = fabric.now

    n_prod = rng.randint(2, 5)
    done = [0]
    horizon = 30 * tl

    def producer_proc(p: Producer, count: int):
        for _ in range(count):
            yield rng.randint(0, horizon // count)
            status = yield from p.append(random_entry(rng, min(buffer_size // 3, 200)))
            res.statuses[status.value] = res.statuses.get(status.value, 0) + 1
        done[0] += 1

    poll_every = rng.randint(1, tl)

    def consumer_proc():
        while done[0] < n_prod:
            for out in consumer.drain():
                record(out)
            yield poll_every

    for node in range(1, n_prod + 1):
        sched.spawn(producer_proc(Producer(fabric, ring, node, config), rng.randint(2, 6)), name=f"p{node}")
    sched.spawn(consumer_proc(), name="consumer")
    sched.run()
    if fabric.inflight:
        problems.append(f"{fabric.inflight} operations still in flight after quiescence")
    for out in consumer.drain():
        record(out)

    # reachability: every slot a WL filled ahead of the consumer was read at the writer's position
    res.committed_slots = len(commits)
    for seq, pos, tick in commits:
        got = reads.get(seq)
        if got is None:
            problems.append(f"WL at t={tick} for seq {seq} (pos {pos}) never reached by the consumer")
        elif got[0] != pos:
            problems.append(f"seq {seq} committed at {pos} but the consumer read at {got[0]}")

    # liveness: with faults off, a fresh producer still gets an entry through
    fabric.schedule = FaultSchedule()
    sentinel = Producer(fabric, ring, 999, config)
    entry = random_entry(rng, 120)
    proc = sched.spawn(sentinel.append(entry), name="sentinel")
    sched.run()
    if proc.result is not AppendStatus.COMMITTED:
        problems.append(f"sentinel append after quiescence returned {proc.result}")
    else:
        out = consumer.poll()
        if out.status is not PollStatus.ENTRY or out.data != entry:
            problems.append(f"sentinel entry not read back intact ({out.status.value})")
    return res


def run_fifo(count: int, seed0: int = 0) -> list[FifoResult]:
    return [fifo_sequence(seed0 + i) for i in range(count)]


def run_faults(count: int, seed0: int = 0) -> list[FaultResult]:
    return [fault_run(seed0 + i) for i in range(count)]
