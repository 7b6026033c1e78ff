import uuid

import pytest

from aigcflow.fabric import Fabric, Scheduler
from aigcflow.message import WorkflowMessage
from aigcflow.pipeline import Mode
from aigcflow.ringbuf import RingConfig
from aigcflow.workflow import (
    Endpoint, Hooks, InstanceConfig, SimTask, TaskManager, Topology, WorkflowInstance, partial_output,
)

RING = RingConfig(buffer_size=8192, slot_count=64, lock_timeout=5)


class Recorder(Hooks):
    def __init__(self):
        self.drops, self.starts, self.routes = [], [], []

    def dropped(self, inst, msg, reason, now):
        self.drops.append((inst, reason))

    def started(self, inst, msg, now):
        self.starts.append((now, msg.uid.int))

    def routed(self, sender, key, hops, dest):
        self.routes.append(dest)


class Sink(Endpoint):
    def __init__(self, sched, fabric, iid):
        super().__init__(sched, fabric, iid, RING, Hooks())
        self.got = []

    def receive(self, msg, now):
        self.got.append((now, msg))


def world(stages, apps, workers=1, stage=None, queue_cap=64, sinks=(90,)):
    sched = Scheduler()
    fabric = Fabric(sched, latency=0)
    topo = Topology(stages, apps)
    endpoints = {}
    for s in sinks:
        endpoints[s] = Sink(sched, fabric, s)
    hooks = Recorder()
    inst = WorkflowInstance(sched, fabric, 1, topo, endpoints, workers=workers, stage=stage,
                            queue_cap=queue_cap, ring_config=RING, hooks=hooks)
    return sched, inst, endpoints, hooks


def view(stage, apps, routes, version=1):
    return {"version": version, "stage": stage, "apps": apps, "routes": routes}


def msg(n, app=1, stage=0):
    return WorkflowMessage(uuid.UUID(int=n), 0, app, stage, b"req")


IM = {"a": SimTask("a", 4), "b": SimTask("b", 3)}
APPS = {1: ("a", "b")}


def test_two_workers_three_messages():
    sched, inst, _, hooks = world(IM, APPS, workers=2, stage="a")
    for n in range(3):
        inst.receive(msg(n), 0)
    sched.run()
    per_worker = {}
    for job in inst.history:
        per_worker[job.workers[0]] = per_worker.get(job.workers[0], 0) + 1
    assert sorted(per_worker.values()) == [1, 2]
    assert inst.balance_violations == 0
    assert [t for t, _ in hooks.starts] == [0, 0, 4]


def test_single_worker_fifo():
    sched, inst, _, hooks = world(IM, APPS, workers=1, stage="a")
    for n in range(5):
        inst.receive(msg(n), 0)
    sched.run()
    assert [u for _, u in hooks.starts] == list(range(5))
    assert [t for t, _ in hooks.starts] == [0, 4, 8, 12, 16]


def test_queue_cap_drop():
    sched, inst, _, hooks = world(IM, APPS, workers=1, stage="a", queue_cap=4)
    inst.receive(msg(99), 0)           # occupies the worker, leaving the queue empty
    for n in range(5):
        inst.receive(msg(n), 0)
    assert hooks.drops == [(1, "queue_full")]
    assert len(inst.queue) == 4


CM = {"d": SimTask("d", 10, output_size=16, mode=Mode.COLLABORATION), "e": SimTask("e", 2)}


def test_collaboration_broadcast():
    sched, inst, sinks, hooks = world(CM, {1: ("d", "e")}, workers=4, stage="d")
    inst.apply(view("d", {1: ("d", "e")}, {(1, 1): (90,)}))
    m = msg(7)
    inst.receive(m, 0)
    job = inst.busy[0]
    assert set(inst.busy) == {job} and len(job.workers) == 4
    assert len(job.copies) == 4 and len(set(job.copies)) == 1
    sched.run()
    (t, out), = sinks[90].got
    assert t == 10                                 # barrier: all four finish together
    assert out.payload == b"".join(partial_output(m, w, 16) for w in range(4))


def test_collaboration_waits_for_all_workers():
    sched, inst, _, hooks = world(CM, {1: ("d", "e")}, workers=2, stage="d")
    inst.receive(msg(1), 0)
    inst.receive(msg(2), 0)
    sched.run()
    assert [t for t, _ in hooks.starts] == [0, 10]


def test_worker_result_timing_and_stage():
    sched, inst, sinks, _ = world(IM, APPS, stage="b")
    inst.apply(view("b", APPS, {(1, 2): (90,)}))
    m = WorkflowMessage(uuid.UUID(int=5), 3, 1, 1, b"x")
    inst.receive(m, 0)
    sched.run()
    (t, out), = sinks[90].got
    assert t == 3 and out.stage == 2 and out.uid == m.uid and out.accepted_at == 3 and out.app_id == 1


def test_utilization_half():
    sched, inst, _, _ = world(IM, APPS, stage="a")
    inst.receive(msg(1), 0)
    sched.run()
    assert inst.utilization(0, 8) == pytest.approx(0.5)


def test_utilization_gpu_demand():
    stages = {"a": SimTask("a", 4, gpu_demand=0.5)}
    sched, inst, _, _ = world(stages, {1: ("a",)}, stage="a")
    inst.receive(msg(1), 0)
    sched.run()
    assert inst.utilization(0, 4) == pytest.approx(0.5)


def test_unknown_app_dropped():
    sched, inst, _, hooks = world(IM, APPS, stage="a")
    inst.receive(msg(1, app=9), 0)
    assert hooks.drops == [(1, "unknown_app")]


def test_no_route_dropped():
    sched, inst, _, hooks = world(IM, APPS, stage="a")
    inst.receive(msg(1), 0)
    sched.run()
    assert hooks.drops == [(1, "no_route")]


def test_round_robin_three_hops():
    sched, inst, sinks, hooks = world(IM, APPS, workers=6, stage="a", sinks=(90, 91, 92))
    inst.apply(view("a", APPS, {(1, 1): (90, 91, 92)}))
    for n in range(6):
        inst.receive(msg(n), 0)
    sched.run()
    assert [len(sinks[s].got) for s in (90, 91, 92)] == [2, 2, 2]
    assert hooks.routes == [90, 91, 92, 90, 91, 92]


def test_round_robin_single_hop():
    sched, inst, sinks, _ = world(IM, APPS, workers=3, stage="a", sinks=(90,))
    inst.apply(view("a", APPS, {(1, 1): (90,)}))
    for n in range(3):
        inst.receive(msg(n), 0)
    sched.run()
    assert len(sinks[90].got) == 3


def test_sender_preserves_order_per_destination():
    sched, inst, sinks, _ = world(IM, APPS, workers=1, stage="a")
    inst.apply(view("a", APPS, {(1, 1): (90,)}))
    for n in range(5):
        inst.receive(msg(n), 0)
    sched.run()
    assert [m.uid.int for _, m in sinks[90].got] == list(range(5))


def test_taskmanager_assigns_idle_instance():
    tm = TaskManager(InstanceConfig(7))
    assert tm.config.idle
    cfg = tm.sync(view("diffusion", {1: ("prep", "diffusion", "decode")}, {(1, 2): (30,)}))
    assert cfg.stage == "diffusion" and not cfg.idle
    assert cfg.next_hops == {1: (30,)}


def test_taskmanager_unchanged_view():
    tm = TaskManager(InstanceConfig(7))
    v = view("a", APPS, {(1, 1): (3,)})
    first = tm.sync(v)
    assert tm.sync(v) is first and tm.syncs == 1


def test_taskmanager_unreachable_keeps_config():
    tm = TaskManager(InstanceConfig(7, "a", {1: (3,)}))
    before = tm.config
    assert tm.sync(None) is before and tm.stale_syncs == 1


def test_reassignment_mid_run_completes_in_flight():
    sched, inst, sinks, hooks = world(IM, APPS, workers=1, stage="a", sinks=(90, 91))
    routes = {(1, 1): (90,), (1, 2): (91,)}
    inst.apply(view("a", APPS, routes))
    inst.receive(msg(1), 0)                       # stage-a job in flight
    inst.apply(view("b", APPS, routes, version=2))  # moved to stage b
    inst.receive(msg(2, stage=1), 0)               # new work for the new stage
    sched.run()
    assert [m.uid.int for _, m in sinks[90].got] == [1]
    assert [m.uid.int for _, m in sinks[91].got] == [2]
    assert hooks.drops == []


def test_topology_validation():
    with pytest.raises(ValueError):
        Topology({"a": SimTask("a", 1)}, {1: ("a", "missing")})
    with pytest.raises(ValueError):
        SimTask("a", 0)
    with pytest.raises(ValueError):
        SimTask("a", 1, gpu_demand=1.5)
