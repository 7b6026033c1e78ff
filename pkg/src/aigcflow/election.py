"""Node-manager replication: heartbeats and Paxos leader election.

Each term is its own single-decree Paxos instance whose value is the id of
the replica that leads that term.  Ballots are ``(round, replica_id)``.
A replica only takes part in its highest known term; messages for older
terms are refused, and any message carrying a newer term moves the
receiver to it (a primary of an older term steps down).

Promises carry the acceptor's registry log so the winner starts from the
most up-to-date state.  The primary replicates log entries to the backups
and treats an entry as committed once a majority (itself included) holds
it.

The protocol core is the pure function :func:`step`, working on hashable
:class:`NodeState` values, so the exhaustive explorer can memoise states.
:class:`NmCluster` wraps it with timers, heartbeats and a lossy,
partitionable network driven by the fabric scheduler.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .fabric import PRIO_WORK, Scheduler

Ballot = tuple[int, int]          # (round, replica id)
NO_BALLOT: Ballot = (0, 0)


class Kind(str, Enum):
    PREPARE = "prepare"
    PROMISE = "promise"
    NACK = "nack"
    ACCEPT = "accept"
    ACCEPTED = "accepted"
    DECIDED = "decided"
    HEARTBEAT = "heartbeat"
    APPEND = "append"
    APPEND_ACK = "append_ack"


class NmRole(str, Enum):
    BACKUP = "backup"
    CANDIDATE = "candidate"
    PRIMARY = "primary"


@dataclass(frozen=True)
class Msg:
    kind: Kind
    src: int
    dst: int
    term: int
    ballot: Ballot = NO_BALLOT
    value: int = 0
    accepted: tuple[Ballot, int] | None = None
    log: tuple = ()
    index: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "src": self.src, "dst": self.dst, "term": self.term,
                "ballot": list(self.ballot), "value": self.value, "log_len": len(self.log)}


@dataclass(frozen=True)
class NodeState:
    id: int
    n: int
    term: int = 0
    role: NmRole = NmRole.BACKUP
    leader: int | None = None
    # acceptor state for ``term``
    promised: Ballot = NO_BALLOT
    accepted: tuple[Ballot, int] | None = None
    # proposer state for ``term``
    ballot: Ballot | None = None
    phase: int = 0                      # 0 idle, 1 preparing, 2 accepting, 3 done, -1 beaten
    promises: frozenset = frozenset()   # (src, accepted)
    accepts: frozenset = frozenset()    # src ids
    value: int = 0
    best_log: tuple = ()
    seen_higher: Ballot | None = None
    # replicated registry log: tuple of (term, entry)
    log: tuple = ()
    acks: tuple = ()                    # primary: (replica, matched length) pairs
    commit: int = 0

    @property
    def majority(self) -> int:
        return self.n // 2 + 1


def replace(s: NodeState, **changes) -> NodeState:
    """``dataclasses.replace`` without re-running ``__init__`` (hot path)."""
    new = object.__new__(NodeState)
    new.__dict__.update(s.__dict__)
    new.__dict__.update(changes)
    return new


def _newer_log(a: tuple, b: tuple) -> tuple:
    """The more up-to-date of two logs: higher last term, then longer."""
    ka = (a[-1][0] if a else 0, len(a))
    kb = (b[-1][0] if b else 0, len(b))
    return b if kb > ka else a


def _advance(s: NodeState, term: int) -> NodeState:
    return replace(s, term=term, role=NmRole.BACKUP, leader=None, promised=NO_BALLOT, accepted=None,
                   ballot=None, phase=0, promises=frozenset(), accepts=frozenset(), value=0,
                   best_log=(), acks=())


def start_election(s: NodeState, round_: int = 1) -> tuple[NodeState, list[Msg]]:
    """Become a candidate for the next term (or retry the current one with a higher round)."""
    if s.role is NmRole.CANDIDATE and s.phase in (1, 2, -1) and s.leader is None:
        term = s.term
        round_ = max(round_, (s.seen_higher or NO_BALLOT)[0] + 1, (s.ballot or NO_BALLOT)[0] + 1)
        s = replace(s, phase=0, promises=frozenset(), accepts=frozenset())
    else:
        term = s.term + 1
        s = _advance(s, term)
    b = (round_, s.id)
    s = replace(s, role=NmRole.CANDIDATE, ballot=b, phase=1, best_log=s.log)
    return s, [Msg(Kind.PREPARE, s.id, d, term, b) for d in range(1, s.n + 1)]


def step(s: NodeState, m: Msg) -> tuple[NodeState, list[Msg]]:
    """Handle one message; returns the new state and the messages to send."""
    if m.term < s.term:
        if m.kind in (Kind.PREPARE, Kind.ACCEPT, Kind.HEARTBEAT, Kind.APPEND):
            return s, [Msg(Kind.NACK, s.id, m.src, s.term, s.promised)]
        return s, []
    if m.term > s.term:
        s = _advance(s, m.term)
    k = m.kind
    if k is Kind.PREPARE:
        if m.ballot > s.promised:
            s = replace(s, promised=m.ballot)
            return s, [Msg(Kind.PROMISE, s.id, m.src, s.term, m.ballot, accepted=s.accepted, log=s.log)]
        return s, [Msg(Kind.NACK, s.id, m.src, s.term, s.promised)]
    if k is Kind.ACCEPT:
        if m.ballot >= s.promised:
            s = replace(s, promised=m.ballot, accepted=(m.ballot, m.value))
            return s, [Msg(Kind.ACCEPTED, s.id, m.src, s.term, m.ballot, m.value)]
        return s, [Msg(Kind.NACK, s.id, m.src, s.term, s.promised)]
    if k is Kind.PROMISE:
        if s.phase != 1 or m.ballot != s.ballot:
            return s, []
        promises = s.promises | {(m.src, m.accepted)}
        s = replace(s, promises=promises, best_log=_newer_log(s.best_log, m.log))
        if len({src for src, _ in promises}) < s.majority:
            return s, []
        prior = [a for _, a in promises if a is not None]
        value = max(prior)[1] if prior else s.id
        s = replace(s, phase=2, value=value)
        return s, [Msg(Kind.ACCEPT, s.id, d, s.term, s.ballot, value) for d in range(1, s.n + 1)]
    if k is Kind.ACCEPTED:
        if s.phase != 2 or m.ballot != s.ballot:
            return s, []
        accepts = s.accepts | {m.src}
        s = replace(s, accepts=accepts)
        if len(accepts) < s.majority:
            return s, []
        s = replace(s, phase=3)
        return s, [Msg(Kind.DECIDED, s.id, d, s.term, s.ballot, s.value, log=s.best_log)
                   for d in range(1, s.n + 1)]
    if k is Kind.NACK:
        if s.phase in (1, 2) and m.ballot > (s.ballot or NO_BALLOT):
            return replace(s, phase=-1, seen_higher=max(m.ballot, s.seen_higher or NO_BALLOT)), []
        return s, []
    if k is Kind.DECIDED:
        if m.value == s.id:
            if s.role is NmRole.PRIMARY:
                return s, []
            log = _newer_log(s.log, m.log)
            s = replace(s, role=NmRole.PRIMARY, leader=s.id, log=log, acks=((s.id, len(log)),),
                        commit=max(s.commit, 0))
            return s, [Msg(Kind.HEARTBEAT, s.id, d, s.term, value=s.id) for d in range(1, s.n + 1) if d != s.id]
        return replace(s, role=NmRole.BACKUP, leader=m.value,
                       phase=3 if s.phase in (1, 2, -1) else s.phase), []
    if k is Kind.HEARTBEAT:
        if m.src == s.id:
            return s, []
        return replace(s, role=NmRole.BACKUP, leader=m.src), []
    if k is Kind.APPEND:
        if m.src == s.id:
            return s, []
        s = replace(s, role=NmRole.BACKUP, leader=m.src, log=m.log, commit=max(s.commit, m.index))
        return s, [Msg(Kind.APPEND_ACK, s.id, m.src, s.term, index=len(m.log))]
    if k is Kind.APPEND_ACK:
        if s.role is not NmRole.PRIMARY:
            return s, []
        acks = dict(s.acks)
        acks[m.src] = max(acks.get(m.src, 0), m.index)
        matched = sorted(acks.values(), reverse=True)
        commit = matched[s.majority - 1] if len(matched) >= s.majority else s.commit
        return replace(s, acks=tuple(sorted(acks.items())), commit=max(s.commit, commit)), []
    raise ValueError(f"unknown message kind {k}")


def propose(s: NodeState, entry) -> tuple[NodeState, list[Msg]]:
    """Primary appends a registry mutation and replicates it."""
    if s.role is not NmRole.PRIMARY:
        raise RuntimeError(f"replica {s.id} is not primary")
    log = s.log + ((s.term, entry),)
    acks = dict(s.acks)
    acks[s.id] = len(log)
    s = replace(s, log=log, acks=tuple(sorted(acks.items())))
    return s, [Msg(Kind.APPEND, s.id, d, s.term, log=log, index=s.commit) for d in range(1, s.n + 1) if d != s.id]


# --------------------------------------------------------------------------
# exhaustive exploration


@dataclass
class ExploreResult:
    states: int = 0
    terminal: int = 0
    violations: list[str] = field(default_factory=list)
    winners: dict[int, int] = field(default_factory=dict)


def primaries_by_term(nodes: Iterable[NodeState]) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for s in nodes:
        if s.role is NmRole.PRIMARY:
            out.setdefault(s.term, set()).add(s.id)
    return out


def _local(nodes: list[NodeState], out: list[Msg]) -> list[Msg]:
    """Apply self-addressed messages at once; return the rest (heartbeats dropped)."""
    pending = [m for m in out if m.kind is not Kind.HEARTBEAT]
    remote: list[Msg] = []
    while pending:
        m = pending.pop(0)
        if m.dst != m.src:
            remote.append(m)
            continue
        nodes[m.dst - 1], more = step(nodes[m.dst - 1], m)
        pending.extend(x for x in more if x.kind is not Kind.HEARTBEAT)
    return remote


def explore_two_candidates(n: int = 3, candidates: tuple[int, int] = (1, 2), drops: bool = False,
                           limit: int = 2_000_000) -> ExploreResult:
    """Every delivery order of the messages two concurrent candidates generate.

    Self-addressed messages are handled locally and heartbeats are left
    out, since neither affects which orders are possible between replicas.
    With ``drops`` each in-flight message may also be lost.  Safety (one
    primary per term) is checked in every reachable state; without drops
    every terminal state must have exactly one primary that all replicas
    know about.
    """
    nodes = [NodeState(i, n) for i in range(1, n + 1)]
    msgs: list[Msg] = []
    for c in candidates:
        nodes[c - 1], out = start_election(nodes[c - 1])
        msgs.extend(_local(nodes, out))
    res = ExploreResult()
    seen: set = set()
    stack = [(tuple(nodes), tuple(sorted(msgs, key=_msg_key)))]
    while stack:
        key = stack.pop()
        if key in seen:
            continue
        seen.add(key)
        nodes_t, inflight = key
        res.states += 1
        if res.states > limit:
            res.violations.append(f"state limit {limit} reached")
            break
        # within one term nobody steps down, so current roles cover the history
        for term, ids in primaries_by_term(nodes_t).items():
            if len(ids) > 1:
                res.violations.append(f"term {term} has primaries {sorted(ids)}")
        if not inflight:
            res.terminal += 1
            prim = [s for s in nodes_t if s.role is NmRole.PRIMARY]
            if not drops:
                if len(prim) != 1:
                    res.violations.append(f"terminal state with {len(prim)} primaries")
                else:
                    w = prim[0].id
                    res.winners[w] = res.winners.get(w, 0) + 1
                    if any(s.leader != w for s in nodes_t):
                        res.violations.append("a replica does not know the winner")
            continue
        for i, m in enumerate(inflight):
            if i and inflight[i - 1] == m:
                continue
            rest = inflight[:i] + inflight[i + 1:]
            succ = list(nodes_t)
            succ[m.dst - 1], out = step(succ[m.dst - 1], m)
            out = _local(succ, out)
            stack.append((tuple(succ), tuple(sorted(rest + tuple(out), key=_msg_key))))
            if drops:
                stack.append((nodes_t, rest))
    return res


def _msg_key(m: Msg):
    return (m.kind.value, m.src, m.dst, m.term, m.ballot, m.value, m.accepted or (NO_BALLOT, 0), len(m.log))


# --------------------------------------------------------------------------
# timed cluster


@dataclass(frozen=True)
class Epoch:
    """Network condition from ``start`` until the next epoch.

    ``groups`` partitions the replicas; messages only cross within a
    group.  ``loss`` is the per-message drop probability inside groups.
    """

    start: int
    groups: tuple[tuple[int, ...], ...]
    loss: float = 0.0

    def group_of(self, rid: int) -> tuple[int, ...]:
        for g in self.groups:
            if rid in g:
                return g
        return ()


@dataclass
class ElectionEvent:
    tick: int
    replica: int
    term: int
    ballot: Ballot | None

    def to_dict(self) -> dict:
        return {"tick": self.tick, "replica": self.replica, "term": self.term,
                "ballot": list(self.ballot) if self.ballot else None}


class NmCluster:
    """``n`` node-manager replicas on a simulated network."""

    def __init__(self, n: int, sched: Scheduler | None = None, seed: int = 0, heartbeat: int = 10,
                 failure_timeout: int | None = None, latency: int = 1,
                 epochs: Iterable[Epoch] = ()) -> None:
        if n < 1:
            raise ValueError("need at least one replica")
        self.n = n
        self.sched = sched or Scheduler()
        self.rng = random.Random(seed)
        self.heartbeat = heartbeat
        self.failure_timeout = failure_timeout if failure_timeout is not None else (3 * heartbeat) // 2
        self.latency = latency
        self.epochs = sorted(epochs, key=lambda e: e.start) or [Epoch(0, (tuple(range(1, n + 1)),))]
        self.nodes = {i: NodeState(i, n) for i in range(1, n + 1)}
        self.alive = {i: True for i in range(1, n + 1)}
        self.last_heard = {i: 0 for i in range(1, n + 1)}
        self.deadline = {i: 0 for i in range(1, n + 1)}
        self.attempts = {i: 0 for i in range(1, n + 1)}
        self.elections: list[ElectionEvent] = []
        self.sent = 0
        self.lost = 0
        self.on_primary: list[Callable[[int, NodeState], None]] = []
        for i in self.nodes:
            self._reset_timer(i)

    # -- network ------------------------------------------------------------

    def epoch_at(self, t: int) -> Epoch:
        cur = self.epochs[0]
        for e in self.epochs:
            if e.start <= t:
                cur = e
            else:
                break
        return cur

    def _send(self, msgs: list[Msg]) -> None:
        now = self.sched.now
        ep = self.epoch_at(now)
        for m in msgs:
            self.sent += 1
            if m.dst == m.src:
                self.sched.call_at(now, self._deliver, m, priority=PRIO_WORK)
                continue
            if m.dst not in ep.group_of(m.src) or (ep.loss and self.rng.random() < ep.loss):
                self.lost += 1
                continue
            self.sched.call_at(now + self.latency, self._deliver, m, priority=PRIO_WORK)

    def _deliver(self, m: Msg) -> None:
        if not self.alive[m.dst]:
            return
        before = self.nodes[m.dst]
        after, out = step(before, m)
        self.nodes[m.dst] = after
        self._observe(m, before, after)
        self._send(out)
        if m.kind is Kind.DECIDED and m.src == m.dst and m.value != m.dst:
            # our own round could only confirm an earlier choice; that leader
            # already timed out for us, so go straight to the next term
            self.deadline[m.dst] = self.sched.now
            self.heartbeat_tick(m.dst)

    def _observe(self, m: Msg, before: NodeState, after: NodeState) -> None:
        rid = after.id
        from_leader = m.kind in (Kind.HEARTBEAT, Kind.APPEND) and after.leader == m.src != rid
        granted = m.kind is Kind.PREPARE and m.src != rid and after.promised != before.promised
        # a decision naming someone other than its sender may point at an
        # unreachable replica, so only the winner's own announcement counts
        announced = m.kind is Kind.DECIDED and m.value in (m.src, rid)
        if from_leader or announced or granted:
            self.last_heard[rid] = self.sched.now
            self.attempts[rid] = 0
            self._reset_timer(rid)
        if after.role is NmRole.PRIMARY and before.role is not NmRole.PRIMARY:
            self.elections.append(ElectionEvent(self.sched.now, rid, after.term, after.ballot))
            for fn in self.on_primary:
                fn(rid, after)
            self.sched.call_at(self.sched.now + self.heartbeat, self._beat, rid, after.term)

    # -- timers ---------------------------------------------------------------

    def _reset_timer(self, rid: int, retry: bool = False) -> None:
        jitter = self.rng.randrange(0, max(1, self.heartbeat // 2))
        # a candidate gives its round a few round trips, then backs off
        # exponentially (capped at the failure timeout) with random jitter
        base = self.failure_timeout
        if retry:
            base = min(base, (4 * self.latency + 1) << min(self.attempts[rid], 8))
            self.attempts[rid] += 1
        self.deadline[rid] = self.sched.now + base + jitter
        self.sched.call_at(self.deadline[rid], self._check_timer, rid, self.deadline[rid])

    def _check_timer(self, rid: int, deadline: int) -> None:
        if not self.alive[rid] or deadline != self.deadline[rid]:
            return
        s = self.nodes[rid]
        if s.role is NmRole.PRIMARY:
            self._reset_timer(rid)
            return
        self.heartbeat_tick(rid)

    def heartbeat_tick(self, rid: int) -> str:
        """Time-out handling for one replica: ``"ok"`` or ``"election_started"``."""
        s = self.nodes[rid]
        now = self.sched.now
        if s.role is NmRole.PRIMARY or now < self.deadline[rid]:
            return "ok"
        s2, out = start_election(s)
        self.nodes[rid] = s2
        self._reset_timer(rid, retry=True)
        self._send(out)
        return "election_started"

    def _beat(self, rid: int, term: int) -> None:
        s = self.nodes[rid]
        if not self.alive[rid] or s.role is not NmRole.PRIMARY or s.term != term:
            return
        self.last_heard[rid] = self.sched.now
        self._send([Msg(Kind.APPEND, rid, d, s.term, log=s.log, index=s.commit)
                    for d in range(1, self.n + 1) if d != rid])
        self.sched.call_at(self.sched.now + self.heartbeat, self._beat, rid, term)

    # -- control --------------------------------------------------------------

    def crash(self, rid: int) -> None:
        self.alive[rid] = False

    def restart(self, rid: int) -> None:
        """Come back with the durable parts of the state (term, log, promises)."""
        self.alive[rid] = True
        s = self.nodes[rid]
        self.nodes[rid] = replace(s, role=NmRole.BACKUP, leader=None, phase=0, ballot=None)
        self._reset_timer(rid)

    def propose(self, entry) -> bool:
        p = self.primary()
        if p is None:
            return False
        self.nodes[p], out = propose(self.nodes[p], entry)
        self._send(out)
        return True

    def primary(self) -> int | None:
        """The live primary with the highest term, if any."""
        best = None
        for rid, s in self.nodes.items():
            if self.alive[rid] and s.role is NmRole.PRIMARY and (best is None or s.term > self.nodes[best].term):
                best = rid
        return best

    def run(self, until: int) -> None:
        self.sched.run(until=until)


# --------------------------------------------------------------------------
# randomised schedules


@dataclass
class ScheduleResult:
    seed: int
    n: int
    elections: int = 0
    windows_checked: int = 0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def random_epochs(rng: random.Random, n: int, horizon: int, heartbeat: int) -> list[Epoch]:
    epochs = []
    t = 0
    ids = list(range(1, n + 1))
    while t < horizon:
        kind = rng.random()
        if kind < 0.35:
            groups = (tuple(ids),)
        else:
            shuffled = ids[:]
            rng.shuffle(shuffled)
            cut = sorted(rng.sample(range(1, n), rng.randint(1, min(2, n - 1))))
            parts, prev = [], 0
            for c in cut + [n]:
                parts.append(tuple(sorted(shuffled[prev:c])))
                prev = c
            groups = tuple(p for p in parts if p)
        loss = 0.0 if rng.random() < 0.5 else rng.choice((0.1, 0.3, 0.6, 1.0))
        epochs.append(Epoch(t, groups, loss))
        t += rng.randint(heartbeat, 6 * heartbeat)
    return epochs


def run_schedule(seed: int, n: int, heartbeat: int = 10, horizon: int = 600) -> ScheduleResult:
    """One random partition/loss schedule with safety and liveness checks."""
    rng = random.Random(seed * 7919 + n)
    epochs = random_epochs(rng, n, horizon, heartbeat)
    cluster = NmCluster(n, seed=seed, heartbeat=heartbeat, epochs=epochs)
    res = ScheduleResult(seed, n)
    checks: list[tuple[int, tuple[int, ...]]] = []
    # windows where a majority group stays loss-free for at least 3 heartbeats
    majority = n // 2 + 1
    bounds = [e.start for e in epochs] + [horizon]
    run_group, run_start = None, None
    for i, e in enumerate(epochs):
        big = next((g for g in e.groups if len(g) >= majority), None) if e.loss == 0.0 else None
        if big != run_group:
            if run_group is not None and bounds[i] - run_start >= 3 * heartbeat:
                checks.append((bounds[i], run_group))
            run_group, run_start = big, e.start
    if run_group is not None and horizon - run_start >= 3 * heartbeat:
        checks.append((horizon, run_group))

    for end, group in checks:
        cluster.sched.call_at(end - 1, _check_window, cluster, end, group, res, priority=99)
    cluster.run(horizon)
    res.windows_checked = len(checks)
    res.elections = len(cluster.elections)
    by_term: dict[int, set[int]] = {}
    last_term = 0
    for ev in cluster.elections:
        by_term.setdefault(ev.term, set()).add(ev.replica)
        if ev.term <= last_term:
            res.problems.append(f"t={ev.tick} replica {ev.replica} became primary for term {ev.term} "
                                f"after term {last_term}")
        last_term = max(last_term, ev.term)
    for term, ids in by_term.items():
        if len(ids) > 1:
            res.problems.append(f"term {term} had primaries {sorted(ids)}")
    return res


def _check_window(cluster: NmCluster, end: int, group: tuple[int, ...], res: ScheduleResult) -> None:
    leaders = [r for r in group if cluster.nodes[r].role is NmRole.PRIMARY]
    top = max(cluster.nodes[r].term for r in group)
    good = [r for r in leaders if cluster.nodes[r].term == top
            and all(cluster.nodes[q].leader == r for q in group)]
    if not good:
        res.problems.append(f"no leader in majority {group} by t={end} (terms "
                            f"{[cluster.nodes[r].term for r in group]}, roles "
                            f"{[cluster.nodes[r].role.value for r in group]})")
