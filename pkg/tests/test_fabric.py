import itertools

import pytest
from hypothesis import given, strategies as st

from aigcflow.fabric import (
    AlignmentError, BoundsError, ConfigError, Fabric, FabricError, FaultSchedule, LogRecord, OpStatus,
    Rule, Action, Scheduler, read_event_log, write_event_log,
)


def test_register_zeroed_region():
    f = Fabric()
    r = f.register_region(1, 4096)
    assert r.length == 4096
    assert f.peek(r, 0, 4096) == bytes(4096)


def test_register_zero_length_fails():
    with pytest.raises(ValueError):
        Fabric().register_region(1, 0)


def test_region_ids_distinct():
    f = Fabric()
    assert f.register_region(1, 8).region_id != f.register_region(1, 8).region_id


def test_write_then_read():
    f = Fabric()
    r = f.register_region(1, 16)
    w = f.write(2, r, 0, bytes([1, 2, 3]))
    assert w.landed
    assert f.read(2, r, 0, 3).value == bytes([1, 2, 3])


def test_dropped_write_leaves_memory():
    f = Fabric(schedule=FaultSchedule(rules=(Rule(Action.DROP, kind="write"),)))
    r = f.register_region(1, 16)
    c = f.write(2, r, 0, b"abc")
    assert c.status is OpStatus.DROPPED
    assert f.read(2, r, 0, 3).value == bytes(3)


@pytest.mark.parametrize("delayed", ["first", "second"])
def test_delay_orders_landing(delayed):
    # the write that lands last wins, whichever was issued first
    rules = (Rule(Action.DELAY, tag=delayed, ticks=5),)
    f = Fabric(schedule=FaultSchedule(rules=rules), latency=1)
    r = f.register_region(1, 8)
    f.write(2, r, 0, b"AAAA", tag="first")
    f.sched.run(until=f.now)
    f.write(3, r, 0, b"BBBB", tag="second")
    f.sched.run()
    expect = b"AAAA" if delayed == "first" else b"BBBB"
    assert f.peek(r, 0, 4) == expect


def test_cas_examples():
    f = Fabric()
    r = f.register_region(1, 16)
    c = f.cas(2, r, 0, 0, 7)
    assert c.value.swapped and c.value.observed == 0
    f.local_write_word(1, r, 8, 5)
    c = f.cas(2, r, 8, 0, 7)
    assert not c.value.swapped and c.value.observed == 5


@pytest.mark.parametrize("order", list(itertools.permutations(["A", "B"])))
def test_concurrent_cas_exactly_one_swaps(order):
    # delay one of the two so every landing order is produced
    late = order[1]
    f = Fabric(schedule=FaultSchedule(rules=(Rule(Action.DELAY, tag=late, ticks=1),)), latency=1)
    r = f.register_region(1, 8)
    ca = f.cas(2, r, 0, 0, 0xA, tag="A")
    cb = f.cas(3, r, 0, 0, 0xB, tag="B")
    f.sched.run()
    swapped = [c for c in (ca, cb) if c.value.swapped]
    assert len(swapped) == 1
    assert swapped[0].op.tag == order[0]
    assert f.peek_word(r, 0) == (0xA if order[0] == "A" else 0xB)


def test_cas_alignment_and_bounds():
    f = Fabric()
    r = f.register_region(1, 16)
    with pytest.raises(AlignmentError):
        f.cas(2, r, 4, 0, 1)
    with pytest.raises(BoundsError):
        f.read(2, r, 10, 8)
    with pytest.raises(FabricError):
        f.local_write(2, r, 0, b"x")


def test_empty_trace_empty_log():
    f = Fabric()
    assert f.run_until_quiescent(FaultSchedule(step_trace=())) == []


def test_trace_logs_in_order():
    f = Fabric()
    r = f.register_region(1, 8)
    f.register_action("a", lambda: f.write(2, r, 0, b"a", label="a"))
    f.register_action("b", lambda: f.write(3, r, 1, b"b", label="b"))
    log = f.run_until_quiescent(FaultSchedule(step_trace=("b", "a", "b")))
    steps = [rec.label for rec in log if rec.op == "step"]
    writes = [rec.label for rec in log if rec.op == "write"]
    assert steps == ["b", "a", "b"] == writes


def test_trace_unknown_action():
    f = Fabric()
    with pytest.raises(ConfigError):
        f.run_until_quiescent(FaultSchedule(step_trace=("nope",)))


def _random_run(seed):
    rules = (Rule(Action.DROP, probability=0.2), Rule(Action.DELAY, probability=0.3, ticks=1, max_ticks=6))
    f = Fabric(schedule=FaultSchedule(seed=seed, rules=rules), latency=1)
    r = f.register_region(1, 64)
    for i in range(40):
        f.sched.call_at(i // 4, f.write, 2 + i % 3, r, i % 56, bytes([i]) * 8)
        f.sched.call_at(i // 4, f.cas, 5, r, 0, i, i + 1)
    f.sched.run()
    return [rec.to_json() for rec in f.log], f.peek(r, 0, 64)


@given(st.integers(0, 2**32))
def test_same_seed_same_log(seed):
    assert _random_run(seed) == _random_run(seed)


def test_reorder_after_holds_until_tag():
    f = Fabric(schedule=FaultSchedule(rules=(Rule(Action.REORDER_AFTER, tag="x", after="y"),)))
    r = f.register_region(1, 8)
    cx = f.write(2, r, 0, b"x", tag="x")
    assert not cx.done
    f.write(2, r, 0, b"y", tag="y")
    assert cx.landed and f.peek(r, 0, 1) == b"x"


def test_event_log_roundtrip(tmp_path):
    recs = [LogRecord(0, 1, "write", 1, 0, "ok", "WB", 1), LogRecord(1, None, "step", None, None, "ok", "a")]
    path = tmp_path / "log.jsonl"
    write_event_log(recs, path)
    assert read_event_log(path) == recs


def test_schedule_dict_roundtrip_and_errors():
    fs = FaultSchedule(seed=3, rules=(Rule(Action.DELAY, kind="cas", ticks=2, max_ticks=4, probability=0.5),),
                       step_trace=("Lock(X)",))
    assert FaultSchedule.from_dict(fs.to_dict()) == fs
    with pytest.raises(ConfigError):
        FaultSchedule.from_dict({"rules": [{"action": "explode"}]})
    with pytest.raises(ConfigError):
        FaultSchedule.from_dict({"rules": [{"action": "drop", "colour": "red"}]})
    with pytest.raises(ConfigError):
        FaultSchedule.from_dict({"rules": [{"action": "reorder_after"}]})


def test_rule_limit():
    f = Fabric(schedule=FaultSchedule(rules=(Rule(Action.DROP, limit=2),)))
    r = f.register_region(1, 8)
    outcomes = [f.write(2, r, 0, b"z").dropped for _ in range(4)]
    assert outcomes == [True, True, False, False]


def test_scheduler_ties_and_past():
    s = Scheduler()
    seen = []
    s.call_at(2, seen.append, "late", priority=40)
    s.call_at(2, seen.append, "early", priority=0)
    s.call_at(1, seen.append, "first")
    s.run()
    assert seen == ["first", "early", "late"]
    with pytest.raises(ValueError):
        s.call_at(0, seen.append, "x")


def test_process_sleep_and_wait():
    s = Scheduler()
    trace = []

    def proc():
        trace.append(s.now)
        yield 3
        trace.append(s.now)

    s.spawn(proc())
    s.run()
    assert trace == [0, 3]
