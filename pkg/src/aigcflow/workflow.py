"""Workflow instances: task manager, request scheduler, workers, result delivery.

An instance owns one inbound ring buffer.  Its consumer drains the ring
into the request scheduler's local queue; workers run simulated timed
tasks; results leave through ResultDeliver, which appends them to the next
hop's ring with the ring-buffer producer protocol.  Nothing is retried: a
full queue, a full ring or a lost append drops the message and the hooks
object is told why.

Every message is executed with the profile of its own (app, stage), so a
message that arrives after its instance was reassigned still completes.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

from .fabric import PRIO_POLL, PRIO_WORK, Fabric, Scheduler
from .message import WorkflowMessage, frame_entry, ENTRY_OVERHEAD
from .pipeline import Mode
from .ringbuf import AppendStatus, Consumer, PollStatus, Producer, RingConfig, RingLayout, create_ring

if TYPE_CHECKING:  # pragma: no cover
    from .ringbuf import PollResult

DEFAULT_QUEUE_CAP = 64
MAX_STAGE_INDEX = 0xFFFE          # 0xFFFF is reserved for store messages


@dataclass(frozen=True)
class SimTask:
    """Execution profile of one stage: a timed task standing in for a model."""

    stage: str
    duration: int
    gpu_demand: float = 1.0
    output_size: int = 64
    mode: Mode = Mode.INDIVIDUAL

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError(f"stage {self.stage}: duration must be positive")
        if not 0 < self.gpu_demand <= 1:
            raise ValueError(f"stage {self.stage}: gpu_demand must be in (0, 1]")
        if self.output_size < 0:
            raise ValueError(f"stage {self.stage}: output_size must be >= 0")


@dataclass(frozen=True)
class Topology:
    """Globally named stages and the ordered stage list of each app."""

    stages: Mapping[str, SimTask]
    apps: Mapping[int, tuple[str, ...]]

    def __post_init__(self) -> None:
        for app, names in self.apps.items():
            if not names:
                raise ValueError(f"app {app} has no stages")
            if len(names) > MAX_STAGE_INDEX:
                raise ValueError(f"app {app} has too many stages")
            for name in names:
                if name not in self.stages:
                    raise ValueError(f"app {app} uses unknown stage {name!r}")

    def task(self, app_id: int, index: int) -> SimTask | None:
        names = self.apps.get(app_id)
        if names is None or not 0 <= index < len(names):
            return None
        return self.stages[names[index]]

    def stage_modes(self) -> dict[str, str]:
        return {name: t.mode.value for name, t in self.stages.items()}


@dataclass
class InstanceConfig:
    instance_id: int
    stage: str | None = None
    next_hops: dict[int, tuple[int, ...]] = field(default_factory=dict)
    workers: int = 1
    version: int = -1
    # (app, output stage index) -> hops, for messages of any stage
    routes: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)

    @property
    def idle(self) -> bool:
        return self.stage is None


class Hooks:
    """Accounting callbacks; the default does nothing and admits everything."""

    def admit(self, owner: int, seq: int, msg: WorkflowMessage, now: int) -> bool:
        return True

    def corrupt(self, owner: int, seq: int, now: int) -> None:
        pass

    def queued(self, inst: int, msg: WorkflowMessage, now: int) -> None:
        pass

    def dropped(self, inst: int, msg: WorkflowMessage, reason: str, now: int) -> None:
        pass

    def started(self, inst: int, msg: WorkflowMessage, now: int) -> None:
        pass

    def finished(self, inst: int, msg: WorkflowMessage, out: WorkflowMessage, stage: str, now: int) -> None:
        pass

    def routed(self, sender: int, key: tuple[int, int], hops: tuple[int, ...], dest: int) -> None:
        pass

    def handed(self, sender: int, dest: int, msg: WorkflowMessage, now: int) -> None:
        pass

    def sent(self, sender: int, dest: int, msg: WorkflowMessage, status: AppendStatus,
             producer: Producer, now: int) -> None:
        pass

    def stored(self, db: int, msg: WorkflowMessage, now: int) -> None:
        pass


class Endpoint:
    """Anything owning an inbound ring: a workflow or database instance."""

    def __init__(self, sched: Scheduler, fabric: Fabric, instance_id: int, ring_config: RingConfig,
                 hooks: Hooks) -> None:
        self.sched = sched
        self.fabric = fabric
        self.instance_id = instance_id
        self.ring_config = ring_config
        self.hooks = hooks
        self.ring: RingLayout = create_ring(fabric, instance_id, ring_config)
        self.consumer = Consumer(fabric, self.ring)
        self._poll_pending = False
        self.corrupt_reads = 0
        self.discarded = 0
        fabric.watch(self.ring.region, self._changed)

    def _changed(self, _region) -> None:
        if not self._poll_pending:
            self._poll_pending = True
            self.sched.call_at(self.sched.now, self._poll, priority=PRIO_POLL)

    def _poll(self) -> None:
        self._poll_pending = False
        now = self.sched.now
        for res in self.consumer.drain():
            self._handle_read(res, now)

    def _handle_read(self, res: "PollResult", now: int) -> None:
        if res.status is PollStatus.CORRUPT:
            self.corrupt_reads += 1
            self.hooks.corrupt(self.instance_id, res.seq, now)
            return
        msg = res.message
        if not self.hooks.admit(self.instance_id, res.seq, msg, now):
            self.discarded += 1
            return
        self.receive(msg, now)

    def receive(self, msg: WorkflowMessage, now: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError


class Sender:
    """One FIFO of outgoing messages towards one destination ring."""

    def __init__(self, sched: Scheduler, fabric: Fabric, node: int, dest: Endpoint, hooks: Hooks) -> None:
        self.sched = sched
        self.node = node
        self.dest = dest
        self.hooks = hooks
        self.producer = Producer(fabric, dest.ring, node, dest.ring_config)
        self.queue: deque[WorkflowMessage] = deque()
        self.current: WorkflowMessage | None = None
        self.running = False
        self.producer.context = None

    def submit(self, msg: WorkflowMessage) -> None:
        self.hooks.handed(self.node, self.dest.instance_id, msg, self.sched.now)
        self.queue.append(msg)
        if not self.running:
            self.running = True
            self.sched.spawn(self._run(), name=f"send {self.node}->{self.dest.instance_id}")

    def _run(self):
        while self.queue:
            msg = self.current = self.queue.popleft()
            self.producer.context = msg
            entry = frame_entry(msg)
            if len(entry) > self.dest.ring.buffer_size:
                status = AppendStatus.FULL
                self.producer.prepare(entry[: self.dest.ring.buffer_size])
            else:
                status = yield from self.producer.append(entry)
            self.current = None
            self.hooks.sent(self.node, self.dest.instance_id, msg, status, self.producer, self.sched.now)
        self.running = False


class Outbox:
    """Per-destination senders of one node."""

    def __init__(self, sched: Scheduler, fabric: Fabric, node: int, endpoints: Mapping[int, Endpoint],
                 hooks: Hooks) -> None:
        self.sched, self.fabric, self.node = sched, fabric, node
        self.endpoints = endpoints
        self.hooks = hooks
        self.senders: dict[int, Sender] = {}

    def send(self, dest: int, msg: WorkflowMessage) -> None:
        sender = self.senders.get(dest)
        if sender is None:
            sender = self.senders[dest] = Sender(self.sched, self.fabric, self.node, self.endpoints[dest],
                                                 self.hooks)
        sender.submit(msg)

    def backlog(self) -> int:
        return sum(len(s.queue) for s in self.senders.values())


class ResultDeliver:
    """Round-robin over the next hops of each (app, next stage)."""

    def __init__(self, node: int, outbox: Outbox, hooks: Hooks) -> None:
        self.node = node
        self.outbox = outbox
        self.hooks = hooks
        self.counters: dict[tuple[int, int], int] = {}
        self.last_hops: dict[tuple[int, int], tuple[int, ...]] = {}

    def deliver(self, msg: WorkflowMessage, hops: tuple[int, ...]) -> int | None:
        key = (msg.app_id, msg.stage)
        if not hops:
            return None
        if self.last_hops.get(key) != hops:
            # a new hop list restarts the rotation
            self.last_hops[key] = hops
            self.counters[key] = 0
        i = self.counters[key]
        dest = hops[i % len(hops)]
        self.counters[key] = i + 1
        self.hooks.routed(self.node, key, hops, dest)
        self.outbox.send(dest, msg)
        return dest


class TaskManager:
    """Keeps the instance's config in line with the node manager's view."""

    def __init__(self, config: InstanceConfig) -> None:
        self.config = config
        self.syncs = 0
        self.stale_syncs = 0

    def sync(self, view: Mapping | None) -> InstanceConfig:
        """Apply ``view`` (``None`` when the node manager is unreachable)."""
        if view is None:
            self.stale_syncs += 1
            return self.config
        if view["version"] == self.config.version and view.get("stage") == self.config.stage:
            return self.config
        self.syncs += 1
        routes = {tuple(k): tuple(v) for k, v in view["routes"].items()}
        stage = view.get("stage")
        next_hops = {}
        for (app, idx), hops in routes.items():
            if stage is not None and view["apps"].get(app, ())[idx - 1:idx] == (stage,):
                next_hops[app] = hops
        self.config = InstanceConfig(self.config.instance_id, stage, next_hops, self.config.workers,
                                     view["version"], routes)
        return self.config


def partial_output(msg: WorkflowMessage, worker: int, size: int) -> bytes:
    """Deterministic stand-in for a model output."""
    seed = msg.uid.bytes + msg.stage.to_bytes(2, "little") + worker.to_bytes(2, "little")
    out = bytearray()
    block = 0
    while len(out) < size:
        out += hashlib.blake2b(seed + block.to_bytes(4, "little"), digest_size=32).digest()
        block += 1
    return bytes(out[:size])


@dataclass(eq=False)
class _Job:
    msg: WorkflowMessage
    task: SimTask
    workers: tuple[int, ...]
    start: int
    end: int
    copies: tuple[bytes, ...] = ()


class WorkflowInstance(Endpoint):
    """RequestScheduler + TaskWorkers + ResultDeliver behind one ring."""

    def __init__(self, sched: Scheduler, fabric: Fabric, instance_id: int, topology: Topology,
                 endpoints: Mapping[int, Endpoint], workers: int = 1, stage: str | None = None,
                 queue_cap: int | None = DEFAULT_QUEUE_CAP, ring_config: RingConfig | None = None,
                 hooks: Hooks | None = None) -> None:
        if workers < 1:
            raise ValueError("an instance needs at least one worker")
        hooks = hooks or Hooks()
        super().__init__(sched, fabric, instance_id, ring_config or RingConfig(), hooks)
        self.topology = topology
        self.queue_cap = queue_cap
        self.queue: deque[WorkflowMessage] = deque()
        self.busy: list[_Job | None] = [None] * workers
        self.task_manager = TaskManager(InstanceConfig(instance_id, stage, workers=workers))
        self.outbox = Outbox(sched, fabric, instance_id, endpoints, hooks)
        self.deliver = ResultDeliver(instance_id, self.outbox, hooks)
        self.history: deque[_Job] = deque()     # finished jobs, for utilisation windows
        self.max_queue = 0
        self.queue_samples: list[tuple[int, int]] = []
        self.balance_violations = 0
        self.cm_copies_checked = 0
        self.completed = 0

    @property
    def config(self) -> InstanceConfig:
        return self.task_manager.config

    @property
    def workers(self) -> int:
        return len(self.busy)

    # -- request scheduler ----------------------------------------------------

    def receive(self, msg: WorkflowMessage, now: int) -> None:
        if self.queue_cap is not None and len(self.queue) >= self.queue_cap:
            self.hooks.dropped(self.instance_id, msg, "queue_full", now)
            return
        self.queue.append(msg)
        self.max_queue = max(self.max_queue, len(self.queue))
        self.hooks.queued(self.instance_id, msg, now)
        self._dispatch(now)

    def _dispatch(self, now: int) -> None:
        while self.queue:
            msg = self.queue[0]
            task = self.topology.task(msg.app_id, msg.stage)
            if task is None:
                self.queue.popleft()
                self.hooks.dropped(self.instance_id, msg, "unknown_app", now)
                continue
            free = [i for i, job in enumerate(self.busy) if job is None]
            if task.mode is Mode.COLLABORATION:
                # broadcast: every worker gets a copy, so all must be free
                if len(free) < len(self.busy):
                    break
                chosen = tuple(free)
            else:
                if not free:
                    break
                chosen = (free[0],)
            self.queue.popleft()
            self._start(msg, task, chosen, now)
        if self.queue and all(job is None for job in self.busy):
            self.balance_violations += 1
        elif self.queue and any(job is None for job in self.busy):
            head = self.topology.task(self.queue[0].app_id, self.queue[0].stage)
            if head is not None and head.mode is Mode.INDIVIDUAL:
                self.balance_violations += 1
        self.queue_samples.append((now, len(self.queue)))

    def _start(self, msg: WorkflowMessage, task: SimTask, workers: tuple[int, ...], now: int) -> None:
        copies = tuple(frame_entry(msg) for _ in workers)
        if len(set(copies)) != 1:
            raise AssertionError("broadcast copies differ")
        self.cm_copies_checked += len(copies) > 1
        job = _Job(msg, task, workers, now, now + task.duration, copies)
        for w in workers:
            self.busy[w] = job
        self.hooks.started(self.instance_id, msg, now)
        self.sched.call_at(job.end, self._finish, job, priority=PRIO_WORK)

    # -- workers --------------------------------------------------------------

    def _finish(self, job: _Job) -> None:
        now = self.sched.now
        for w in job.workers:
            self.busy[w] = None
        self.history.append(job)
        self.completed += 1
        parts = [partial_output(job.msg, w, job.task.output_size) for w in job.workers]
        out = job.msg.next_stage(b"".join(parts))
        self.hooks.finished(self.instance_id, job.msg, out, job.task.stage, now)
        hops = self.config.routes.get((out.app_id, out.stage), ())
        if self.deliver.deliver(out, hops) is None:
            self.hooks.dropped(self.instance_id, out, "no_route", now)
        self._dispatch(now)

    def utilization(self, start: int, end: int) -> float:
        """GPU-demand-weighted busy fraction of all workers over ``[start, end)``."""
        if end <= start:
            return 0.0
        busy = 0.0
        jobs = list(self.history) + [j for j in dict.fromkeys(self.busy) if j is not None]
        for job in jobs:
            overlap = min(job.end, end) - max(job.start, start)
            if overlap > 0:
                busy += overlap * job.task.gpu_demand * len(job.workers)
        while self.history and self.history[0].end <= start:
            self.history.popleft()
        return min(1.0, busy / (len(self.busy) * (end - start)))

    def apply(self, view: Mapping | None) -> InstanceConfig:
        return self.task_manager.sync(view)


def min_ring_size(topology: Topology, workers: int = 1) -> int:
    """Smallest buffer that fits one framed output of every stage."""
    largest = max(t.output_size for t in topology.stages.values())
    return ENTRY_OVERHEAD + largest * max(workers, 1)
