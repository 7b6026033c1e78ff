"""End-to-end deterministic simulation of one workflow set.

Clients -> proxy (fast reject) -> entrance stage -> ... -> database ->
client polls.  Every cross-node hop is a ring-buffer append over the
fabric.  A :class:`Tracker` follows each accepted uid to a concrete
location (a sender queue, a ring slot, a scheduler queue, a worker) or a
terminal state, and the run ends with the accounting identity
``accepted = completed + dropped + in_flight`` checked against those
locations.
"""
from __future__ import annotations

import random
import uuid
from dataclasses import dataclass, field
from typing import Iterable

from .dbstore import STORE_STAGE, DbStore, StoreMessage, client_fetch, replica_peers
from .election import NmCluster
from .fabric import PRIO_LATE, Fabric, FabricOp, Completion, FaultSchedule, OpKind, Rule, Scheduler
from .message import WorkflowMessage
from .nodemanager import NodeManager, Role
from .pipeline import AdmissionState, Verdict, fast_reject
from .report import RequestRow, SimReport
from .ringbuf import HEAD_OFFSET, AppendStatus, Producer, RingConfig, seq_diff, unpack_pointer
from .scenario import Scenario
from .workflow import Endpoint, Hooks, Outbox, ResultDeliver, WorkflowInstance

REQUEST_PAYLOAD = b"request"


# --------------------------------------------------------------------------
# uid accounting


@dataclass
class _Track:
    row: RequestRow
    n_stages: int
    loc: tuple = ()
    stages_seen: list[int] = field(default_factory=list)
    handed_at: int = 0
    handed_stage: int = -1
    received_at: int = 0


class Tracker(Hooks):
    """Follows every accepted uid through the system."""

    def __init__(self, sim: "Simulation") -> None:
        self.sim = sim
        self.tracks: dict[uuid.UUID, _Track] = {}
        self.pending: dict[int, dict[int, set[uuid.UUID]]] = {}    # ring owner -> seq -> uids
        self.violations: list[str] = []
        self.drops: dict[str, int] = {}
        self.stale_discards = 0
        # (sender, key) -> (hop list, position, epoch); a new hop list starts a new epoch
        self.rr: dict[tuple[int, tuple[int, int]], tuple[tuple[int, ...], int, int]] = {}
        self.rr_counts: dict[tuple[int, tuple[int, int], int], tuple[tuple[int, ...], dict[int, int]]] = {}

    # -- helpers ------------------------------------------------------------

    def new(self, row: RequestRow, uid: uuid.UUID, n_stages: int) -> None:
        self.tracks[uid] = _Track(row, n_stages)

    def _live(self, uid: uuid.UUID) -> _Track | None:
        t = self.tracks.get(uid)
        if t is None or t.row.status != "in_flight":
            return None
        return t

    def drop(self, uid: uuid.UUID, reason: str, now: int) -> None:
        t = self._live(uid)
        if t is None:
            return
        t.row.status = "dropped"
        t.row.drop_reason = reason
        t.loc = ("dropped",)
        self.drops[reason] = self.drops.get(reason, 0) + 1

    def _see_stage(self, t: _Track, stage: int) -> None:
        if t.stages_seen and stage <= t.stages_seen[-1]:
            self.violations.append(f"uid {t.row.uid}: stage {stage} after {t.stages_seen[-1]}")
        t.stages_seen.append(stage)

    def _tracked(self, msg: WorkflowMessage) -> _Track | None:
        if msg.stage == STORE_STAGE:
            return None
        return self._live(msg.uid)

    def _at_sender(self, msg: WorkflowMessage, sender: int, dest: int) -> _Track | None:
        """The uid's track if this very hop is still its current location."""
        t = self._tracked(msg)
        if t is None or t.loc != ("sender", sender, dest) or t.handed_stage != msg.stage:
            return None
        return t

    # -- ring landing (fabric observer) ---------------------------------------

    def on_land(self, op: FabricOp, comp: Completion, before: bytes) -> None:
        if op.kind is not OpKind.CAS or op.label != "WL" or not comp.value.swapped:
            return
        producer = op.meta
        msg = getattr(producer, "context", None)
        if msg is None:
            return
        owner = op.region.owner
        t = self._at_sender(msg, producer.node, owner)
        if t is None:
            return
        seq = producer.seq
        head_seq = unpack_pointer(self.sim.fabric.peek_word(op.region, HEAD_OFFSET))[1]
        if seq_diff(seq, head_seq) < 0:
            # a late WL on a sequence the consumer has already passed
            self.drop(msg.uid, "phantom_commit", self.sim.sched.now)
            return
        t.loc = ("ring", owner, seq)
        self.pending.setdefault(owner, {}).setdefault(seq, set()).add(msg.uid)

    def _pop_upto(self, owner: int, seq: int) -> tuple[set[uuid.UUID], set[uuid.UUID]]:
        """Pending uids at exactly ``seq`` and at earlier sequences."""
        ring = self.pending.get(owner)
        if not ring:
            return set(), set()
        exact, earlier = set(), set()
        for s in [s for s in ring if seq_diff(s, seq) <= 0]:
            (exact if s == seq else earlier).update(ring.pop(s))
        return exact, earlier

    # -- Hooks ----------------------------------------------------------------

    def admit(self, owner: int, seq: int, msg: WorkflowMessage, now: int) -> bool:
        exact, earlier = self._pop_upto(owner, seq)
        for uid in earlier:
            self.drop(uid, "skipped", now)
        if msg.stage == STORE_STAGE:
            for uid in exact:
                self.drop(uid, "overwritten", now)
            return True
        ok = False
        if msg.uid in exact:
            exact.discard(msg.uid)
            ok = True
        else:
            t = self._live(msg.uid)
            if t is not None and t.loc[:2] == ("ring", owner) and t.stages_seen[-1:] != [msg.stage]:
                # a valid copy of an entry that is also committed further on
                later = self.pending.get(owner, {}).get(t.loc[2])
                if later is not None:
                    later.discard(msg.uid)
                ok = True
        for uid in exact:
            self.drop(uid, "overwritten", now)
        if not ok:
            self.stale_discards += 1
            return False
        t = self.tracks[msg.uid]
        self._see_stage(t, msg.stage)
        t.row.network += now - t.handed_at
        t.received_at = now
        t.loc = ("arrived", owner)
        if msg.stage < t.n_stages:
            t.row.stage_received.append(now)
        return True

    def corrupt(self, owner: int, seq: int, now: int) -> None:
        exact, earlier = self._pop_upto(owner, seq)
        for uid in earlier:
            self.drop(uid, "skipped", now)
        for uid in exact:
            self.drop(uid, "corrupt", now)

    def queued(self, inst: int, msg: WorkflowMessage, now: int) -> None:
        t = self._tracked(msg)
        if t is not None:
            t.loc = ("queue", inst)

    def dropped(self, inst: int, msg: WorkflowMessage, reason: str, now: int) -> None:
        if msg.stage != STORE_STAGE:
            self.drop(msg.uid, reason, now)

    def started(self, inst: int, msg: WorkflowMessage, now: int) -> None:
        t = self._tracked(msg)
        if t is None:
            return
        t.loc = ("worker", inst)
        t.row.stage_started.append(now)
        t.row.stage_instance.append(inst)
        t.row.queue_wait += now - t.received_at

    def finished(self, inst: int, msg: WorkflowMessage, out: WorkflowMessage, stage: str, now: int) -> None:
        self.sim.stage_outputs.setdefault(stage, []).append(now)
        t = self._tracked(msg)
        if t is None:
            return
        t.row.stage_finished.append(now)
        t.loc = ("finished", inst)

    def routed(self, sender: int, key: tuple[int, int], hops: tuple[int, ...], dest: int) -> None:
        prev = self.rr.get((sender, key))
        if prev is not None and prev[0] == hops:
            i, epoch = prev[1], prev[2]
        else:
            i, epoch = 0, (prev[2] + 1 if prev is not None else 0)
        if hops[i % len(hops)] != dest:
            self.violations.append(f"sender {sender} {key}: round robin chose {dest}, expected "
                                   f"{hops[i % len(hops)]}")
        self.rr[(sender, key)] = (hops, i + 1, epoch)
        counts = self.rr_counts.setdefault((sender, key, epoch), (hops, {}))[1]
        counts[dest] = counts.get(dest, 0) + 1

    def handed(self, sender: int, dest: int, msg: WorkflowMessage, now: int) -> None:
        t = self._tracked(msg)
        if t is None:
            return
        t.loc = ("sender", sender, dest)
        t.handed_at = now
        t.handed_stage = msg.stage

    def sent(self, sender: int, dest: int, msg: WorkflowMessage, status: AppendStatus,
             producer: Producer, now: int) -> None:
        if self._at_sender(msg, sender, dest) is None:
            return
        # the entry became visible only if its WL landed (then it is no longer at the sender)
        self.drop(msg.uid, f"send_{status.value}", now)

    def stored(self, db: int, msg: WorkflowMessage, now: int) -> None:
        t = self._tracked(msg)
        if t is None:
            return
        t.row.status = "completed"
        t.row.completed_at = now
        t.row.latency = now - t.row.accepted_at
        t.loc = ("completed", db)
        self.sim.on_stored(msg.uid, now)


# --------------------------------------------------------------------------
# nodes


class Proxy:
    def __init__(self, sim: "Simulation", proxy_id: int) -> None:
        self.sim = sim
        self.proxy_id = proxy_id
        self.outbox = Outbox(sim.sched, sim.fabric, proxy_id, sim.endpoints, sim.tracker)
        self.deliver = ResultDeliver(proxy_id, self.outbox, sim.tracker)
        self.admission: dict[str, AdmissionState] = {}
        self.routes: dict[tuple[int, int], tuple[int, ...]] = {}
        self.capacity: dict[str, int] = {}
        self.version = -1

    def apply(self, view: dict | None) -> None:
        if view is None:
            return
        self.version = view["version"]
        self.routes = {tuple(k): tuple(v) for k, v in view["routes"].items()}
        self.capacity = dict(view["capacity"])

    def arrive(self, app: int) -> None:
        sim = self.sim
        now = sim.sched.now
        topo = sim.scenario.topology
        entrance = topo.apps[app][0]
        t_x = topo.stages[entrance].duration
        # K is re-read from the node manager's view on every decision
        k = sim.nm_capacity(entrance, self.capacity)
        row = RequestRow(index=len(sim.rows), app_id=app, arrived_at=now, rejected=True)
        sim.rows.append(row)
        if k <= 0:
            return
        state = self.admission.get(entrance)
        if state is None:
            state = self.admission[entrance] = AdmissionState(t_x, k)
        if fast_reject(state, now, k) is Verdict.REJECT:
            return
        uid = uuid.UUID(int=sim.rng.getrandbits(128), version=4)
        row.rejected = False
        row.uid = str(uid)
        row.accepted_at = now
        row.status = "in_flight"
        sim.tracker.new(row, uid, len(topo.apps[app]))
        msg = WorkflowMessage(uid, now, app, 0, REQUEST_PAYLOAD)
        hops = self.routes.get((app, 0), ())
        if self.deliver.deliver(msg, hops) is None:
            sim.tracker.drop(uid, "no_route", now)


class DatabaseInstance(Endpoint):
    def __init__(self, sim: "Simulation", instance_id: int, ring_config: RingConfig) -> None:
        super().__init__(sim.sched, sim.fabric, instance_id, ring_config, sim.tracker)
        self.sim = sim
        self.store = DbStore(instance_id, ttl=sim.scenario.config["ttl"])
        self.outbox = Outbox(sim.sched, sim.fabric, instance_id, sim.endpoints, sim.tracker)

    def receive(self, msg: WorkflowMessage, now: int) -> None:
        if not self.store.alive:
            if msg.stage != STORE_STAGE:
                self.hooks.dropped(self.instance_id, msg, "database_down", now)
            return
        if msg.stage == STORE_STAGE:
            self.store.receive(StoreMessage.from_workflow(msg), now)
        else:
            ids = self.sim.db_ids
            peers = replica_peers(ids.index(self.instance_id), ids, self.sim.scenario.config["replicas"])
            self.store.put(msg.uid, msg.payload, now, peers)
            self.hooks.stored(self.instance_id, msg, now)
        for peer, smsg in self.store.take_outbox():
            self.outbox.send(peer, smsg.to_workflow())


# --------------------------------------------------------------------------
# the simulation


class Simulation:
    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        cfg = scenario.config
        self.rng = random.Random(scenario.seed)
        self.sched = Scheduler()
        self.rows: list[RequestRow] = []
        self.stage_outputs: dict[str, list[int]] = {}
        self.tracker = Tracker(self)
        self.endpoints: dict[int, Endpoint] = {}
        ring_cfg = RingConfig(cfg["buffer_size"], cfg["slot_count"], cfg["lock_timeout"])
        topo = scenario.topology
        self.fabric = Fabric(self.sched, self._fault_schedule(), latency=cfg["latency"], keep_log=False)
        self.fabric.observers.append(self.tracker.on_land)

        self.nm = NodeManager(topo.apps, topo.stage_modes(), cfg["threshold"], cfg["window"])
        self.cluster: NmCluster | None = None
        if cfg["nm_replicas"] > 1:
            self.cluster = NmCluster(cfg["nm_replicas"], self.sched, seed=scenario.seed,
                                     heartbeat=cfg["heartbeat"], failure_timeout=cfg["failure_timeout"])

        self.instances: dict[int, WorkflowInstance] = {}
        for spec in scenario.instances:
            inst = WorkflowInstance(self.sched, self.fabric, spec.instance_id, topo, self.endpoints,
                                    spec.workers, spec.stage, spec.queue_cap, ring_cfg, self.tracker)
            self.instances[spec.instance_id] = inst
            self.endpoints[spec.instance_id] = inst
            self.nm.register(spec.instance_id, Role.WORKFLOW, spec.stage, spec.workers)
        self.db_ids = sorted(scenario.databases)
        self.databases: dict[int, DatabaseInstance] = {}
        for did in self.db_ids:
            db = DatabaseInstance(self, did, ring_cfg)
            self.databases[did] = db
            self.endpoints[did] = db
            self.nm.register(did, Role.DATABASE)
        self.proxies = [Proxy(self, pid) for pid in scenario.proxies]
        for p in self.proxies:
            self.nm.register(p.proxy_id, Role.PROXY)

        self.fetched: dict[uuid.UUID, int] = {}
        self.fetch_misses = 0
        self._undelivered: set[int] = set()
        # bootstrap: every node starts from the static configuration
        for iid in [*sorted(self.instances), *(p.proxy_id for p in self.proxies)]:
            self._apply_view(iid, force=True)

    # -- node manager plumbing -------------------------------------------------

    def _fault_schedule(self) -> FaultSchedule:
        sched = self.scenario.faults
        if self.scenario.fault_scope != "inter_stage" or not sched.rules:
            return sched
        # only ops that one workflow instance issues against another's ring
        workflow = {spec.instance_id for spec in self.scenario.instances}

        def inter_stage(op: FabricOp) -> bool:
            return op.issuer in workflow and op.region.owner in workflow

        rules = tuple(Rule(r.action, r.kind, r.issuer, r.label, r.region, r.tag, r.ticks, r.max_ticks,
                           r.after, r.probability, r.limit, inter_stage) for r in sched.rules)
        return FaultSchedule(sched.seed, rules)

    def nm_available(self) -> bool:
        return self.cluster is None or self.cluster.primary() is not None

    def nm_capacity(self, stage: str, cached: dict[str, int]) -> int:
        if self.nm_available():
            return self.nm.entrance_capacity(stage)
        return cached.get(stage, 0)

    def view_for(self, iid: int) -> dict:
        nm = self.nm
        routes = {}
        for app, stages in nm.apps.items():
            for idx in range(len(stages) + 1):
                routes[(app, idx)] = tuple(nm.resolve_route(app, idx - 1))
        rec = nm.record(iid)
        return {
            "version": nm.version,
            "stage": rec.stage,
            "apps": nm.apps,
            "routes": routes,
            "capacity": {s: nm.entrance_capacity(s) for s in nm.known_stages()},
        }

    def _apply_view(self, iid: int, force: bool = False) -> None:
        if not force and not self.nm_available():
            node = self.instances.get(iid)
            if node is not None:
                node.apply(None)
            self._undelivered.add(iid)
            return
        self._undelivered.discard(iid)
        view = self.view_for(iid)
        if iid in self.instances:
            self.instances[iid].apply(view)
        for p in self.proxies:
            if p.proxy_id == iid:
                p.apply(view)

    def _report_tick(self) -> None:
        now = self.sched.now
        cfg = self.scenario.config
        if self.nm_available():
            for iid, inst in sorted(self.instances.items()):
                util = inst.utilization(max(0, now - cfg["report_interval"]), now)
                self.nm.report_utilization(iid, util, now)
        self.sched.call_at(now + cfg["report_interval"], self._report_tick, priority=PRIO_LATE)

    def _rebalance_tick(self) -> None:
        now = self.sched.now
        cfg = self.scenario.config
        if self.nm_available():
            for iid in sorted(self._undelivered):
                self._apply_view(iid)
            before = len(self.nm.log)
            self.nm.rebalance(now)
            if self.cluster is not None:
                for entry in self.nm.log[before:]:
                    self.cluster.propose(entry)
            for d in self.nm.take_deliveries():
                self.sched.call_at(now + cfg["nm_latency"], self._apply_view, d.instance_id, priority=PRIO_LATE)
        self.sched.call_at(now + cfg["rebalance_interval"], self._rebalance_tick, priority=PRIO_LATE)

    def _nm_event(self, ev: dict) -> None:
        if self.cluster is None:
            return
        if "crash" in ev:
            self.cluster.crash(ev["crash"])
        else:
            self.cluster.restart(ev["restart"])

    # -- clients -------------------------------------------------------------

    def _arrival_times(self) -> Iterable[tuple[int, int]]:
        end = self.scenario.run_length
        for idx, a in enumerate(self.scenario.arrivals):
            stop = end if a.until is None else min(a.until, end)
            if a.kind == "explicit":
                times = [t for t in a.times if t < stop]
            elif a.kind == "periodic":
                times = list(range(a.start, stop, a.interval))
            else:
                rng = random.Random(self.scenario.seed * 1_000_003 + idx)
                times, t = [], a.start
                while True:
                    t += max(1, round(rng.expovariate(a.rate)))
                    if t >= stop:
                        break
                    times.append(t)
            if a.count is not None:
                times = times[: a.count]
            for t in times:
                yield t, a.app

    def _arrive(self, app: int, proxy_index: int) -> None:
        self.proxies[proxy_index].arrive(app)

    def _client_poll(self, uid: uuid.UUID, deadline: int) -> None:
        now = self.sched.now
        dbs = [self.databases[d].store for d in self.db_ids]
        res = client_fetch(dbs, uid, now)
        t = self.tracker.tracks[uid]
        if res.found:
            self.fetched[uid] = self.fetched.get(uid, 0) + 1
            t.row.fetched_at = now
            t.row.fetch_attempts += res.attempts
            return
        t.row.fetch_attempts += res.attempts
        self.fetch_misses += 1
        nxt = now + self.scenario.config["client_poll_interval"]
        if nxt <= deadline:
            self.sched.call_at(nxt, self._client_poll, uid, deadline, priority=PRIO_LATE)

    def on_stored(self, uid: uuid.UUID, now: int) -> None:
        # a client polling every interval first succeeds at the next poll
        # after the store; earlier polls are side-effect-free misses
        interval = self.scenario.config["client_poll_interval"]
        t = self.tracker.tracks[uid]
        first = t.row.accepted_at + interval * max(1, -(-(now - t.row.accepted_at) // interval))
        self.sched.call_at(first, self._client_poll, uid, now + self.scenario.config["ttl"], priority=PRIO_LATE)

    # -- run -----------------------------------------------------------------

    def run(self) -> SimReport:
        sc = self.scenario
        cfg = sc.config
        for i, (t, app) in enumerate(sorted(self._arrival_times())):
            self.sched.call_at(t, self._arrive, app, i % len(self.proxies), priority=PRIO_LATE)
        for ev in sc.nm_events:
            self.sched.call_at(ev["at"], self._nm_event, ev, priority=PRIO_LATE)
        self.sched.call_at(cfg["report_interval"], self._report_tick, priority=PRIO_LATE)
        self.sched.call_at(cfg["rebalance_interval"], self._rebalance_tick, priority=PRIO_LATE)
        self.sched.run(until=sc.run_length + cfg["drain"])
        return self.report()

    # -- checks and report -------------------------------------------------------

    def _location_ok(self, uid: uuid.UUID, t: _Track) -> bool:
        kind = t.loc[0] if t.loc else ""
        msg_matches = lambda m: m is not None and m.uid == uid and m.stage != STORE_STAGE  # noqa: E731
        if kind == "sender":
            _, node, dest = t.loc
            outbox = self._outbox_of(node)
            s = outbox.senders.get(dest) if outbox is not None else None
            return s is not None and (msg_matches(s.current) or any(msg_matches(m) for m in s.queue))
        if kind == "ring":
            _, owner, seq = t.loc
            ep = self.endpoints[owner]
            head = unpack_pointer(self.fabric.peek_word(ep.ring.region, HEAD_OFFSET))[1]
            return seq_diff(seq, head) >= 0 and uid in self.tracker.pending.get(owner, {}).get(seq, ())
        if kind == "queue":
            inst = self.instances.get(t.loc[1])
            return inst is not None and any(msg_matches(m) for m in inst.queue)
        if kind == "worker":
            inst = self.instances.get(t.loc[1])
            return inst is not None and any(j is not None and msg_matches(j.msg) for j in inst.busy)
        return False

    def _outbox_of(self, node: int) -> Outbox | None:
        if node in self.instances:
            return self.instances[node].outbox
        if node in self.databases:
            return self.databases[node].outbox
        for p in self.proxies:
            if p.proxy_id == node:
                return p.outbox
        return None

    def report(self) -> SimReport:
        sc = self.scenario
        tr = self.tracker
        violations = list(tr.violations)
        accepted = completed = dropped = in_flight = 0
        for uid, t in tr.tracks.items():
            accepted += 1
            status = t.row.status
            if status == "completed":
                completed += 1
            elif status == "dropped":
                dropped += 1
            else:
                in_flight += 1
                if not self._location_ok(uid, t):
                    violations.append(f"uid {t.row.uid} in flight at unverifiable location {t.loc}")
        if accepted != completed + dropped + in_flight:
            violations.append("conservation identity failed")
        for (sender, key, epoch), (hops, counts) in sorted(tr.rr_counts.items()):
            vals = [counts.get(h, 0) for h in hops]
            if max(vals) - min(vals) > 1:
                violations.append(f"round robin unfair at sender {sender} {key}: {vals}")
        for iid, inst in sorted(self.instances.items()):
            if inst.balance_violations:
                violations.append(f"instance {iid}: idle worker while queue non-empty "
                                  f"({inst.balance_violations} times)")
        for uid, t in tr.tracks.items():
            if t.row.status == "completed":
                if t.row.latency != sum_durations(sc, t) + t.row.network + t.row.queue_wait:
                    violations.append(f"uid {t.row.uid}: latency does not decompose")
        # every store hit hands a result to a client; more hits than fetched uids is a duplicate
        hits = sum(db.store.stats.hits for db in self.databases.values())
        duplicates = hits - len(self.fetched) + sum(n - 1 for n in self.fetched.values())
        if duplicates:
            violations.append(f"{duplicates} results were handed out more than once")
        aggregates = {
            "arrivals": len(self.rows),
            "accepted": accepted,
            "rejected": sum(1 for r in self.rows if r.rejected),
            "completed": completed,
            "dropped": dropped,
            "in_flight": in_flight,
            "fetched": len(self.fetched),
            "fetch_misses": self.fetch_misses,
            "duplicates": duplicates,
            "corruption_skips": sum(ep.corrupt_reads for ep in self.endpoints.values()),
            "stale_discards": tr.stale_discards,
            "rebalances": len(self.nm.history),
            "elections": len(self.cluster.elections) if self.cluster else 0,
            "max_queue": {str(i): inst.max_queue for i, inst in sorted(self.instances.items())},
            "drops": dict(sorted(tr.drops.items())),
        }
        rebalances = [{"tick": m.tick, "instance": m.instance_id, "from": m.from_stage, "to": m.to_stage,
                       "source": m.source, "hot_average": round(m.hot_average, 9),
                       "donor_average": None if m.donor_average is None else round(m.donor_average, 9)}
                      for m in self.nm.history]
        elections = [e.to_dict() for e in self.cluster.elections] if self.cluster else []
        return SimReport(sc.name, sc.seed, sc.time_scale, sc.run_length, list(self.rows), aggregates,
                         {k: list(v) for k, v in sorted(self.stage_outputs.items())}, rebalances, elections,
                         violations)


def sum_durations(sc: Scenario, t: _Track) -> int:
    names = sc.topology.apps[t.row.app_id]
    return sum(sc.topology.stages[n].duration for n in names[: len(t.row.stage_finished)])


def run_scenario(scenario: Scenario) -> SimReport:
    return Simulation(scenario).run()
