import uuid
from collections import deque

import pytest
from hypothesis import given, settings, strategies as st

from aigcflow.fabric import Fabric, OpKind, run_now
from aigcflow.liveness import builtin_case, replay, replay_liveness_case
from aigcflow.message import ENTRY_OVERHEAD, WorkflowMessage, frame_entry
from aigcflow.ringbuf import (
    BUFFER_OFFSET, BUSY_BIT, AppendStatus, Consumer, GhStatus, LockStatus, PollStatus, Producer, RingConfig,
    free_position, pack_lock, pack_pointer, read_slot, ring_state, create_ring, seq_diff, unpack_lock,
    unpack_pointer, LOCK_OFFSET,
)


def entry(size, tag=0):
    assert size >= ENTRY_OVERHEAD
    msg = WorkflowMessage(uuid.UUID(int=tag + 1), tag, 1, 0, bytes([tag & 0xFF]) * (size - ENTRY_OVERHEAD))
    return frame_entry(msg)


def make_ring(buffer_size=1024, slot_count=16, lock_timeout=5):
    f = Fabric(latency=0)
    cfg = RingConfig(buffer_size, slot_count, lock_timeout)
    ring = create_ring(f, 1, cfg)
    return f, ring, cfg


# -- pointer words and helpers -------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(0, 2**40))
def test_pointer_roundtrip(pos, seq):
    assert unpack_pointer(pack_pointer(pos, seq)) == (pos, seq % 2**32)


@given(st.integers(1, 2**16 - 1), st.integers(0, 2**48 - 1))
def test_lock_roundtrip(owner, tick):
    assert unpack_lock(pack_lock(owner, tick)) == (owner, tick)


def test_lock_owner_zero_rejected():
    with pytest.raises(ValueError):
        pack_lock(0, 5)


@given(st.integers(0, 2**32 - 1), st.integers(-2**20, 2**20))
def test_seq_diff_wraps(a, d):
    assert seq_diff((a + d) % 2**32, a) == d


def test_slot_count_power_of_two():
    with pytest.raises(ValueError):
        RingConfig(1024, 12)


# -- free-space rule against a byte-occupancy oracle -----------------------------

def free_oracle(tail, head, nonempty, size, region):
    if size > region:
        return None
    pos = tail if tail + size <= region else 0
    if not nonempty:
        return pos
    if tail == head:
        return None
    occupied = set()
    i = head
    while i != tail:
        occupied.add(i)
        i = (i + 1) % region
    return pos if not occupied & set(range(pos, pos + size)) else None


def test_free_position_exhaustive_small_ring():
    region = 24
    for tail in range(region):
        for head in range(region):
            for nonempty in (False, True):
                for size in range(1, region + 2):
                    got = free_position(tail, head, nonempty, size, region)
                    assert got == free_oracle(tail, head, nonempty, size, region), (tail, head, nonempty, size)


def test_free_position_256_examples():
    # the gap [200, 256) is too small, so the entry wraps to 0 and fits below the head at 150
    assert free_position(200, 150, True, 100, 256) == 0 == free_oracle(200, 150, True, 100, 256)
    # with the head at 50 the wrapped entry would overtake it
    assert free_position(200, 50, True, 100, 256) is None
    assert free_position(100, 150, True, 100, 256) is None


# -- appends -------------------------------------------------------------------

def test_first_append_from_zero():
    f, ring, cfg = make_ring()
    p = Producer(f, ring, 2, cfg)
    e = entry(100)
    assert run_now(p.append(e)) is AppendStatus.COMMITTED
    s = ring_state(f, ring)
    assert (s.tail_b, s.tail_slot) == (100, 1)
    slot = read_slot(f, ring, 0)
    assert slot.busy and slot.size == 100
    assert not s.locked


def test_consumer_reads_committed_entry():
    f, ring, cfg = make_ring()
    e = entry(100, tag=9)
    run_now(Producer(f, ring, 2, cfg).append(e))
    res = Consumer(f, ring).poll()
    assert res.status is PollStatus.ENTRY and res.data == e
    assert not read_slot(f, ring, 0).busy
    s = ring_state(f, ring)
    assert (s.head_b, s.head_slot) == (100, 1)


def test_consumer_empty():
    f, ring, _ = make_ring()
    assert Consumer(f, ring).poll().status is PollStatus.EMPTY


def test_consumer_skips_corrupt_by_size():
    f, ring, cfg = make_ring()
    e = entry(100)
    run_now(Producer(f, ring, 2, cfg).append(e))
    # a late stale write with different bytes lands over the committed entry
    f.write(3, ring.region, BUFFER_OFFSET + 50, b"\xff" * 10)
    res = Consumer(f, ring).poll()
    assert res.status is PollStatus.CORRUPT and res.size == 100
    assert ring_state(f, ring).head_b == 100


def wrap_oracle(sizes, region):
    """Offsets each entry lands at when the consumer drains after every append."""
    q, tail, out = deque(), 0, []
    for s in sizes:
        pos = tail if tail + s <= region else 0
        out.append(pos)
        q.append((pos, s))
        q.popleft()
        tail = pos + s if pos + s < region else 0
    return out


def test_sixty_byte_appends_wrap():
    f, ring, cfg = make_ring(buffer_size=256)
    p, c = Producer(f, ring, 2, cfg), Consumer(f, ring)
    sizes = [60] * 6
    positions = []
    for i, s in enumerate(sizes):
        assert run_now(p.append(entry(s, i))) is AppendStatus.COMMITTED
        positions.append(p.pos)
        assert c.poll().data == entry(s, i)
    assert positions == wrap_oracle(sizes, 256) == [0, 60, 120, 180, 0, 60]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(ENTRY_OVERHEAD, 200), st.booleans()), min_size=1, max_size=60))
def test_appends_match_queue_oracle(ops):
    """Single producer, random partial drains: placement, FULL and FIFO order match a model."""
    region, slots = 512, 8
    f, ring, cfg = make_ring(buffer_size=region, slot_count=slots)
    p, c = Producer(f, ring, 2, cfg), Consumer(f, ring)
    q = deque()                    # (pos, size, bytes)
    tail = head = 0                # head: byte after the last consumed entry
    for i, (size, drain) in enumerate(ops):
        e = entry(size, i)
        pos = free_oracle(tail, head, bool(q), size, region)
        if len(q) >= slots:
            pos = None
        status = run_now(p.append(e))
        if pos is None:
            assert status is AppendStatus.FULL
        else:
            assert status is AppendStatus.COMMITTED and p.pos == pos
            q.append((pos, size, e))
            tail = pos + size if pos + size < region else 0
        if drain and q:
            at, n, want = q.popleft()
            head = at + n if at + n < region else 0
            assert c.poll().data == want
    while q:
        assert c.poll().data == q.popleft()[2]
    assert not c.poll()


# -- lock --------------------------------------------------------------------

def test_lock_free_acquired():
    f, ring, cfg = make_ring()
    p = Producer(f, ring, 2, cfg)
    assert run_now(p.lock()) is LockStatus.ACQUIRED


@pytest.mark.parametrize("wait,expect", [(0, LockStatus.BUSY), (5, LockStatus.BUSY), (6, LockStatus.STOLEN)])
def test_lock_timeout(wait, expect):
    f, ring, cfg = make_ring(lock_timeout=5)
    x, y = Producer(f, ring, 2, cfg), Producer(f, ring, 3, cfg)
    assert run_now(x.lock()) is LockStatus.ACQUIRED
    f.sched.run(until=f.now + wait)
    assert run_now(y.lock()) is expect
    owner, _ = unpack_lock(f.peek_word(ring.region, LOCK_OFFSET))
    assert owner == (3 if expect is LockStatus.STOLEN else 2)


def test_unlock_only_own_token():
    f, ring, cfg = make_ring(lock_timeout=1)
    x, y = Producer(f, ring, 2, cfg), Producer(f, ring, 3, cfg)
    run_now(x.lock())
    f.sched.run(until=5)
    run_now(y.lock())
    assert run_now(x.unlock()) is False
    assert unpack_lock(f.peek_word(ring.region, LOCK_OFFSET))[0] == 3
    assert run_now(y.unlock()) is True
    assert f.peek_word(ring.region, LOCK_OFFSET) == 0


def test_gh_advances_over_stale_slot():
    f, ring, cfg = make_ring(lock_timeout=1)
    x, y = Producer(f, ring, 2, cfg), Producer(f, ring, 3, cfg)
    x.prepare(entry(80, 1))
    for step in ("Lock", "GH", "WB", "WL"):
        run_now(x.step(step))
    # X is lost before its header update
    f.sched.run(until=5)
    y.prepare(entry(60, 2))
    assert run_now(y.step("Lock")) is LockStatus.STOLEN
    assert run_now(y.step("GH")) is GhStatus.STALE_SLOT_ADVANCED
    assert y.tail == (80, 1)
    for step in ("UH", "WB", "WL", "UH", "Unlock"):
        run_now(y.step(step))
    reads = Consumer(f, ring).drain()
    assert [r.data for r in reads] == [entry(80, 1), entry(60, 2)]


def test_gh_clean():
    f, ring, cfg = make_ring()
    p = Producer(f, ring, 2, cfg)
    p.prepare(entry(64))
    run_now(p.step("Lock"))
    assert run_now(p.step("GH")) is GhStatus.CLEAN


def test_busy_bit_transitions():
    """Busy bits go 0->1 only through a producer WL CAS and 1->0 only by the consumer."""
    f, ring, cfg = make_ring(buffer_size=512, slot_count=4)
    lo, hi = ring.size_region_offset, ring.size_region_offset + 8 * ring.slot_count
    bad = []

    def observe(op, comp, before):
        if not lo <= op.offset < hi or op.kind is OpKind.READ:
            return
        old = int.from_bytes(before, "little") if before else 0
        new = f.peek_word(ring.region, op.offset)
        if not old & BUSY_BIT and new & BUSY_BIT and not (op.kind is OpKind.CAS and op.label == "WL"):
            bad.append(op)
        if old & BUSY_BIT and not new & BUSY_BIT and op.label != "clear":
            bad.append(op)

    f.observers.append(observe)
    prods = [Producer(f, ring, n, cfg) for n in (2, 3)]
    c = Consumer(f, ring)
    for i in range(40):
        run_now(prods[i % 2].append(entry(44 + i % 50, i)))
        if i % 3:
            c.poll()
    assert not bad


def test_entry_larger_than_buffer():
    f, ring, cfg = make_ring(buffer_size=64)
    with pytest.raises(ValueError):
        Producer(f, ring, 2, cfg).prepare(bytes(65))


# -- liveness cases ------------------------------------------------------------

@pytest.mark.parametrize("n", range(1, 9))
def test_builtin_case_passes(n):
    v = replay_liveness_case(n)
    assert v.passed, v.render()


def test_case1_reads_y():
    assert replay_liveness_case(1).reads == ["Y"]


def test_case4_x_and_y_wl_fails():
    v = replay_liveness_case(4)
    assert v.reads == ["X"]
    assert ("WL(Y)", "false") in v.steps


def test_case5_reads_y():
    assert "Y" in replay_liveness_case(5).reads


def test_case7_summary():
    assert "consumer read 2 entries (X then Y)" in replay_liveness_case(7).summary


def test_case8_reads_x_lock_not_released():
    v = replay_liveness_case(8)
    assert v.reads[0] == "X"


def test_custom_trace_fifo():
    case = builtin_case(1).from_dict({"trace": [
        "Lock(X)", "GH(X)", "WB(X)", "WL(X)", "UH(X)", "Unlock(X)",
        "Lock(Y)", "GH(Y)", "WB(Y)", "WL(Y)", "UH(Y)", "Unlock(Y)", "RB(Z)", "RL(Z)"]})
    v = replay(case)
    assert v.passed and v.reads[:2] == ["X", "Y"]
