"""Abstract one-sided memory fabric on a deterministic discrete-event loop.

Regions are zero-initialised byte arrays owned by one node.  Any node may
read, write or compare-and-swap a region remotely; the owner may also touch
it locally (immediately, infallibly).  Remote operations pass through a
:class:`FaultSchedule` that can deliver, drop, delay or reorder them.
Receivers are never notified of arrivals; they learn about data only by
reading memory.

Simulated time is an integer tick counter owned by :class:`Scheduler`.
Processes are plain generators that yield

* an ``int`` - sleep that many ticks (``0`` re-queues at the current tick),
* a :class:`Waitable` (e.g. a :class:`Completion`) - resume once it is done.
"""
from __future__ import annotations

import heapq
import itertools
import json
import random
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Generator, Iterable

WORD = 8
_U64 = struct.Struct("<Q")

# Tie-break order for events scheduled on the same tick.
PRIO_LAND = 0
PRIO_WORK = 10
PRIO_RESUME = 20
PRIO_POLL = 30
PRIO_LATE = 40


class FabricError(Exception):
    pass


class BoundsError(FabricError):
    pass


class AlignmentError(FabricError):
    pass


class ConfigError(ValueError):
    """A schedule, trace or scenario refers to something that does not exist."""


# --------------------------------------------------------------------------
# scheduler


class Waitable:
    __slots__ = ("done", "_callbacks")

    def __init__(self) -> None:
        self.done = False
        self._callbacks: list[Callable[[Any], None]] = []

    def add_callback(self, fn: Callable[[Any], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self) -> None:
        self.done = True
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


class Signal(Waitable):
    """One-shot event a process can wait on."""

    __slots__ = ("value",)

    def __init__(self) -> None:
        super().__init__()
        self.value: Any = None

    def set(self, value: Any = None) -> None:
        if not self.done:
            self.value = value
            self._fire()


class Process(Waitable):
    __slots__ = ("name", "result", "_gen", "_sched", "cancelled")

    def __init__(self, sched: "Scheduler", gen: Generator, name: str = "") -> None:
        super().__init__()
        self._sched = sched
        self._gen = gen
        self.name = name
        self.result: Any = None
        self.cancelled = False

    def cancel(self) -> None:
        if not self.done:
            self.cancelled = True
            self._gen.close()
            self._fire()

    def _resume(self, value: Any = None) -> None:
        if self.done:
            return
        gen = self._gen
        while True:
            try:
                item = gen.send(value)
            except StopIteration as stop:
                self.result = stop.value
                self._fire()
                return
            if isinstance(item, Waitable):
                if item.done:
                    value = item
                    continue
                item.add_callback(self._wake)
                return
            delay = 0 if item is None else int(item)
            if delay < 0:
                raise ValueError(f"process {self.name!r} asked to sleep {delay} ticks")
            self._sched.call_at(self._sched.now + delay, self._resume, None, priority=PRIO_RESUME)
            return

    def _wake(self, waited: Waitable) -> None:
        self._sched.call_at(self._sched.now, self._resume, waited, priority=PRIO_RESUME)


class Scheduler:
    """Single-threaded event loop; ties broken by (priority, insertion order)."""

    def __init__(self, start: int = 0) -> None:
        self.now = start
        self._queue: list[tuple[int, int, int, Callable, tuple]] = []
        self._seq = itertools.count()

    def call_at(self, when: int, fn: Callable, *args: Any, priority: int = PRIO_LATE) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule at tick {when}, clock is already at {self.now}")
        heapq.heappush(self._queue, (when, priority, next(self._seq), fn, args))

    def call_later(self, delay: int, fn: Callable, *args: Any, priority: int = PRIO_LATE) -> None:
        self.call_at(self.now + delay, fn, *args, priority=priority)

    def spawn(self, gen: Generator, name: str = "", delay: int = 0) -> Process:
        proc = Process(self, gen, name)
        self.call_at(self.now + delay, proc._resume, None, priority=PRIO_RESUME)
        return proc

    def pending(self) -> bool:
        return bool(self._queue)

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, _, fn, args = heapq.heappop(self._queue)
        self.now = when
        fn(*args)
        return True

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        """Run events up to and including tick ``until`` (or to exhaustion).

        Returns the number of events processed.  When ``until`` is given the
        clock ends at ``until`` even if the queue drained earlier.
        """
        n = 0
        queue = self._queue
        while queue and (until is None or queue[0][0] <= until):
            if max_events is not None and n >= max_events:
                break
            when, _, _, fn, args = heapq.heappop(queue)
            self.now = when
            fn(*args)
            n += 1
        if until is not None and until > self.now:
            self.now = until
        return n


def run_now(gen: Generator) -> Any:
    """Drive a process generator that never has to wait.

    Used by step-at-a-time replays on a zero-latency fabric: every yielded
    waitable must already be complete.
    """
    value = None
    while True:
        try:
            item = gen.send(value)
        except StopIteration as stop:
            return stop.value
        if isinstance(item, Waitable):
            if not item.done:
                raise FabricError("operation did not complete synchronously")
            value = item
        elif item:
            raise FabricError("synchronous driver cannot sleep")
        else:
            value = None


# --------------------------------------------------------------------------
# regions and operations


@dataclass(frozen=True)
class RegionHandle:
    region_id: int
    length: int
    owner: int


class OpKind(str, Enum):
    READ = "read"
    WRITE = "write"
    CAS = "cas"


@dataclass(frozen=True)
class CasResult:
    swapped: bool
    observed: int


@dataclass
class FabricOp:
    op_id: int
    kind: OpKind
    region: RegionHandle
    offset: int
    issuer: int
    issue_time: int
    payload: bytes = b""
    length: int = 0
    expected: int = 0
    new: int = 0
    label: str | None = None
    tag: str | None = None
    meta: Any = None

    @property
    def span(self) -> int:
        if self.kind is OpKind.WRITE:
            return len(self.payload)
        if self.kind is OpKind.READ:
            return self.length
        return WORD


class OpStatus(str, Enum):
    PENDING = "pending"
    LANDED = "landed"
    DROPPED = "dropped"


class Completion(Waitable):
    __slots__ = ("op", "status", "landed_at", "value")

    def __init__(self, op: FabricOp) -> None:
        super().__init__()
        self.op = op
        self.status = OpStatus.PENDING
        self.landed_at: int | None = None
        self.value: Any = None

    @property
    def dropped(self) -> bool:
        return self.status is OpStatus.DROPPED

    @property
    def landed(self) -> bool:
        return self.status is OpStatus.LANDED


@dataclass(frozen=True)
class LogRecord:
    tick: int
    node: int | None
    op: str
    region: int | None
    offset: int | None
    outcome: str
    label: str | None = None
    op_id: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


def write_event_log(records: Iterable[LogRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def read_event_log(path: str | Path) -> list[LogRecord]:
    with open(path, encoding="utf-8") as fh:
        return [LogRecord(**json.loads(line)) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# fault schedules


class Action(str, Enum):
    DELIVER = "deliver"
    DROP = "drop"
    DELAY = "delay"
    REORDER_AFTER = "reorder_after"


@dataclass(frozen=True)
class Decision:
    action: Action
    ticks: int = 0
    after: str | None = None


DELIVER = Decision(Action.DELIVER)


@dataclass(frozen=True)
class Rule:
    """Match an operation and choose what happens to it.

    Field matchers left as ``None`` match anything.  ``predicate`` is an
    optional callable for programmatic schedules (not serialisable).
    """

    action: Action
    kind: str | None = None
    issuer: int | None = None
    label: str | None = None
    region: int | None = None
    tag: str | None = None
    ticks: int = 0
    max_ticks: int | None = None
    after: str | None = None
    probability: float = 1.0
    limit: int | None = None
    predicate: Callable[[FabricOp], bool] | None = field(default=None, compare=False)

    def matches(self, op: FabricOp) -> bool:
        if self.kind is not None and op.kind.value != self.kind:
            return False
        if self.issuer is not None and op.issuer != self.issuer:
            return False
        if self.label is not None and op.label != self.label:
            return False
        if self.region is not None and op.region.region_id != self.region:
            return False
        if self.tag is not None and op.tag != self.tag:
            return False
        return self.predicate is None or self.predicate(op)

    def to_dict(self) -> dict:
        out = {"action": self.action.value}
        for key in ("kind", "issuer", "label", "region", "tag", "after", "limit", "max_ticks"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.ticks:
            out["ticks"] = self.ticks
        if self.probability != 1.0:
            out["probability"] = self.probability
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Rule":
        unknown = set(d) - {
            "action", "kind", "issuer", "label", "region", "tag", "ticks",
            "max_ticks", "after", "probability", "limit",
        }
        if unknown:
            raise ConfigError(f"unknown rule fields: {sorted(unknown)}")
        try:
            action = Action(d["action"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"rule needs an action in {[a.value for a in Action]}") from exc
        if action is Action.REORDER_AFTER and not d.get("after"):
            raise ConfigError("reorder_after rule needs an 'after' tag")
        if d.get("kind") is not None and d["kind"] not in {k.value for k in OpKind}:
            raise ConfigError(f"unknown op kind {d['kind']!r}")
        return cls(action=action, **{k: v for k, v in d.items() if k != "action"})


@dataclass(frozen=True)
class FaultSchedule:
    seed: int = 0
    rules: tuple[Rule, ...] = ()
    step_trace: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed, "rules": [r.to_dict() for r in self.rules]}
        if self.step_trace is not None:
            out["step_trace"] = list(self.step_trace)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSchedule":
        unknown = set(d) - {"seed", "rules", "step_trace"}
        if unknown:
            raise ConfigError(f"unknown fault schedule fields: {sorted(unknown)}")
        trace = d.get("step_trace")
        if trace is not None and not all(isinstance(s, str) for s in trace):
            raise ConfigError("step_trace must be a list of action labels")
        return cls(
            seed=int(d.get("seed", 0)),
            rules=tuple(Rule.from_dict(r) for r in d.get("rules", ())),
            step_trace=tuple(trace) if trace is not None else None,
        )

    @classmethod
    def load(cls, path: str | Path) -> "FaultSchedule":
        from .scenario import load_structured

        return cls.from_dict(load_structured(path))


# --------------------------------------------------------------------------
# the fabric


class Fabric:
    """Registered regions plus one-sided operations under a fault schedule.

    ``latency`` is the base number of ticks between issue and landing; with
    ``latency=0`` and no faults every operation lands inside the issuing
    call, which is what step-by-step replays rely on.
    """

    def __init__(
        self,
        scheduler: Scheduler | None = None,
        schedule: FaultSchedule | None = None,
        latency: int = 0,
        keep_log: bool = True,
    ) -> None:
        self.sched = scheduler or Scheduler()
        self.schedule = schedule or FaultSchedule()
        self.latency = latency
        self.keep_log = keep_log
        self.log: list[LogRecord] = []
        self.observers: list[Callable[[FabricOp, Completion, bytes], None]] = []
        self._mem: dict[int, bytearray] = {}
        self._handles: dict[int, RegionHandle] = {}
        self._watchers: dict[int, list[Callable[[RegionHandle], None]]] = {}
        self._region_ids = itertools.count(1)
        self._op_ids = itertools.count(1)
        self._rng = random.Random(self.schedule.seed)
        self._rule_uses: dict[int, int] = {}
        self._landed_tags: set[str] = set()
        self._held: dict[str, list[Completion]] = {}
        self._actions: dict[str, Callable[[], Any]] = {}
        self.inflight = 0

    @property
    def now(self) -> int:
        return self.sched.now

    # -- regions ----------------------------------------------------------

    def register_region(self, owner: int, length: int) -> RegionHandle:
        if length <= 0:
            raise ValueError(f"region length must be positive, got {length}")
        handle = RegionHandle(next(self._region_ids), length, owner)
        self._mem[handle.region_id] = bytearray(length)
        self._handles[handle.region_id] = handle
        return handle

    def handle(self, region_id: int) -> RegionHandle:
        return self._handles[region_id]

    def watch(self, region: RegionHandle, fn: Callable[[RegionHandle], None]) -> None:
        """Call ``fn`` after every landed mutation of ``region``.

        Simulation plumbing only: a poller that sleeps until its region
        changes observes exactly what a poller running every tick would.
        """
        self._watchers.setdefault(region.region_id, []).append(fn)

    def peek(self, region: RegionHandle, offset: int, length: int) -> bytes:
        """Omniscient, unlogged view for tests and invariant checkers."""
        return bytes(self._mem[region.region_id][offset:offset + length])

    def peek_word(self, region: RegionHandle, offset: int) -> int:
        return _U64.unpack_from(self._mem[region.region_id], offset)[0]

    def _check(self, region: RegionHandle, offset: int, length: int) -> None:
        if region.region_id not in self._mem:
            raise BoundsError(f"unknown region {region.region_id}")
        if offset < 0 or length < 0 or offset + length > region.length:
            raise BoundsError(
                f"access [{offset}, {offset + length}) outside region {region.region_id} of {region.length} bytes"
            )

    # -- local (owner) access ----------------------------------------------

    def _check_owner(self, node: int, region: RegionHandle) -> None:
        if node != region.owner:
            raise FabricError(f"node {node} is not the owner of region {region.region_id}")

    def local_read(self, node: int, region: RegionHandle, offset: int, length: int) -> bytes:
        self._check_owner(node, region)
        self._check(region, offset, length)
        return bytes(self._mem[region.region_id][offset:offset + length])

    def local_read_word(self, node: int, region: RegionHandle, offset: int) -> int:
        self._check_owner(node, region)
        self._check(region, offset, WORD)
        return _U64.unpack_from(self._mem[region.region_id], offset)[0]

    def local_write(self, node: int, region: RegionHandle, offset: int, data: bytes,
                    label: str | None = None) -> None:
        self._check_owner(node, region)
        self._check(region, offset, len(data))
        mem = self._mem[region.region_id]
        before = bytes(mem[offset:offset + len(data)])
        mem[offset:offset + len(data)] = data
        op = FabricOp(next(self._op_ids), OpKind.WRITE, region, offset, node, self.now,
                      payload=bytes(data), label=label)
        comp = Completion(op)
        comp.status = OpStatus.LANDED
        comp.landed_at = self.now
        self._record(op, "local", label)
        for fn in self.observers:
            fn(op, comp, before)

    def local_write_word(self, node: int, region: RegionHandle, offset: int, value: int,
                         label: str | None = None) -> None:
        self.local_write(node, region, offset, _U64.pack(value), label)

    # -- remote one-sided operations --------------------------------------

    def read(self, issuer: int, region: RegionHandle, offset: int, length: int,
             label: str | None = None, tag: str | None = None, meta: Any = None) -> Completion:
        self._check(region, offset, length)
        op = FabricOp(next(self._op_ids), OpKind.READ, region, offset, issuer, self.now,
                      length=length, label=label, tag=tag, meta=meta)
        return self._issue(op)

    def write(self, issuer: int, region: RegionHandle, offset: int, data: bytes,
              label: str | None = None, tag: str | None = None, meta: Any = None) -> Completion:
        self._check(region, offset, len(data))
        op = FabricOp(next(self._op_ids), OpKind.WRITE, region, offset, issuer, self.now,
                      payload=bytes(data), label=label, tag=tag, meta=meta)
        return self._issue(op)

    def cas(self, issuer: int, region: RegionHandle, offset: int, expected: int, new: int,
            label: str | None = None, tag: str | None = None, meta: Any = None) -> Completion:
        if offset % WORD:
            raise AlignmentError(f"cas offset {offset} is not {WORD}-byte aligned")
        self._check(region, offset, WORD)
        op = FabricOp(next(self._op_ids), OpKind.CAS, region, offset, issuer, self.now,
                      expected=expected, new=new, label=label, tag=tag, meta=meta)
        return self._issue(op)

    def _decide(self, op: FabricOp) -> Decision:
        for idx, rule in enumerate(self.schedule.rules):
            if not rule.matches(op):
                continue
            if rule.limit is not None and self._rule_uses.get(idx, 0) >= rule.limit:
                continue
            if rule.probability < 1.0 and self._rng.random() >= rule.probability:
                continue
            self._rule_uses[idx] = self._rule_uses.get(idx, 0) + 1
            ticks = rule.ticks
            if rule.max_ticks is not None:
                ticks = self._rng.randint(rule.ticks, rule.max_ticks)
            return Decision(rule.action, ticks, rule.after)
        return DELIVER

    def _issue(self, op: FabricOp) -> Completion:
        comp = Completion(op)
        decision = self._decide(op)
        if decision.action is Action.DROP:
            comp.status = OpStatus.DROPPED
            self._record(op, "dropped", op.label)
            comp._fire()
            return comp
        if decision.action is Action.REORDER_AFTER and decision.after not in self._landed_tags:
            self.inflight += 1
            self._held.setdefault(decision.after, []).append(comp)
            return comp
        delay = self.latency + (decision.ticks if decision.action is Action.DELAY else 0)
        self.inflight += 1
        if delay == 0:
            self._land(comp)
        else:
            self.sched.call_at(self.now + delay, self._land, comp, priority=PRIO_LAND)
        return comp

    def _land(self, comp: Completion) -> None:
        self.inflight -= 1
        op = comp.op
        mem = self._mem[op.region.region_id]
        off = op.offset
        before = b""
        mutated = False
        if op.kind is OpKind.READ:
            comp.value = bytes(mem[off:off + op.length])
            outcome = "ok"
        elif op.kind is OpKind.WRITE:
            before = bytes(mem[off:off + len(op.payload)])
            mem[off:off + len(op.payload)] = op.payload
            comp.value = None
            outcome = "ok"
            mutated = True
        else:
            observed = _U64.unpack_from(mem, off)[0]
            before = _U64.pack(observed)
            swapped = observed == op.expected
            if swapped:
                _U64.pack_into(mem, off, op.new)
                mutated = True
            comp.value = CasResult(swapped, observed)
            outcome = f"swapped:{observed}" if swapped else f"failed:{observed}"
        comp.status = OpStatus.LANDED
        comp.landed_at = self.now
        if self.keep_log:
            self._record(op, outcome, op.label)
        for fn in self.observers:
            fn(op, comp, before)
        if mutated:
            for fn in self._watchers.get(op.region.region_id, ()):
                fn(op.region)
        comp._fire()
        if op.tag is not None:
            self._landed_tags.add(op.tag)
            for held in self._held.pop(op.tag, ()):
                self._land(held)

    def _record(self, op: FabricOp, outcome: str, label: str | None) -> None:
        if self.keep_log:
            kind = op.kind.value if outcome != "local" else "local_write"
            self.log.append(LogRecord(self.now, op.issuer, kind, op.region.region_id, op.offset,
                                      "ok" if outcome == "local" else outcome, label, op.op_id))

    # -- labelled actions and replay ----------------------------------------

    def register_action(self, label: str, fn: Callable[[], Any]) -> None:
        self._actions[label] = fn

    def run_until_quiescent(self, schedule: FaultSchedule | None = None,
                            step_ticks: int = 1) -> list[LogRecord]:
        """Execute a step trace (if any), then drain every pending event.

        Returns the log records produced by this call.  Each trace step is
        logged as an ``op="step"`` record before its fabric operations.
        """
        start = len(self.log)
        trace = (schedule or self.schedule).step_trace or ()
        missing = [s for s in trace if s not in self._actions]
        if missing:
            raise ConfigError(f"trace references unregistered actions: {missing}")
        for label in trace:
            self.sched.run(until=self.now)
            if self.keep_log:
                self.log.append(LogRecord(self.now, None, "step", None, None, "ok", label))
            self._actions[label]()
            self.sched.run(until=self.now + step_ticks)
        self.sched.run()
        # Ops held behind a tag that never landed are released at the end.
        while self._held:
            _, comps = self._held.popitem()
            for comp in comps:
                self._land(comp)
        self.sched.run()
        return self.log[start:]
