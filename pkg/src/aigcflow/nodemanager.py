"""Node manager: instance registry, utilisation-driven scaling and routing.

The node manager knows which instance serves which stage, keeps each
instance's utilisation reports, and periodically moves one instance into
the hottest stage when that stage's window average exceeds the threshold.
Routing answers "where does stage ``i`` of app ``a`` send its results";
stages are named globally, so apps that list the same stage name share
its instances.

Replication of this state across node-manager replicas lives in
:mod:`aigcflow.election`.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

DEFAULT_THRESHOLD = 0.85
DEFAULT_WINDOW = 300


class Role(str, Enum):
    PROXY = "proxy"
    WORKFLOW = "workflow"
    DATABASE = "database"
    IDLE = "idle"


class UnknownInstance(KeyError):
    pass


class RouteError(LookupError):
    pass


@dataclass
class InstanceRecord:
    instance_id: int
    role: Role
    stage: str | None = None
    workers: int = 1
    workflow_set: int = 0
    location: int | None = None
    reports: deque = field(default_factory=deque)   # (tick, utilisation)

    @property
    def last_report(self) -> tuple[int, float] | None:
        return self.reports[-1] if self.reports else None


@dataclass(frozen=True)
class Reassignment:
    tick: int
    instance_id: int
    from_stage: str | None
    to_stage: str
    source: str            # "idle_pool" or "donor"
    hot_average: float
    donor_average: float | None = None


@dataclass(frozen=True)
class StateDelivery:
    """What the node manager pushes to an instance's task manager."""

    tick: int
    instance_id: int
    stage: str | None
    routes: Mapping[int, tuple[int, ...]]    # app_id -> next-hop instance ids
    version: int


class NodeManager:
    """Registry and scaling policy for one workflow set.

    ``apps`` maps app id to its ordered stage names; ``stage_modes`` gives
    each stage's mode (``"individual"`` or ``"collaboration"``), used for
    the entrance capacity the proxy's rate limit depends on.
    """

    def __init__(self, apps: Mapping[int, Sequence[str]], stage_modes: Mapping[str, str] | None = None,
                 threshold: float = DEFAULT_THRESHOLD, window: int = DEFAULT_WINDOW) -> None:
        if not 0 < threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if window <= 0:
            raise ValueError("window must be positive")
        self.apps = {int(a): tuple(stages) for a, stages in apps.items()}
        for app, stages in self.apps.items():
            if not stages:
                raise ValueError(f"app {app} has no stages")
        self.stage_modes = dict(stage_modes or {})
        self.threshold = threshold
        self.window = window
        self.instances: dict[int, InstanceRecord] = {}
        self.last_grant: dict[str, int] = {}
        self.history: list[Reassignment] = []
        self.deliveries: list[StateDelivery] = []
        self.version = 0
        self.log: list[tuple] = []     # registry mutations, replicated by the election layer

    # -- registry -------------------------------------------------------------

    def register(self, instance_id: int, role: Role | str, stage: str | None = None, workers: int = 1,
                 workflow_set: int = 0, location: int | None = None) -> InstanceRecord:
        role = Role(role)
        if instance_id in self.instances:
            raise ValueError(f"instance {instance_id} already registered")
        if role is Role.WORKFLOW and stage is None:
            role = Role.IDLE
        if role is not Role.WORKFLOW:
            stage = None
        if stage is not None and stage not in self.known_stages():
            raise RouteError(f"stage {stage!r} is not used by any app")
        rec = InstanceRecord(instance_id, role, stage, workers, workflow_set, location)
        self.instances[instance_id] = rec
        self.log.append(("register", instance_id, role.value, stage, workers))
        return rec

    def known_stages(self) -> set[str]:
        return {s for stages in self.apps.values() for s in stages}

    def record(self, instance_id: int) -> InstanceRecord:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise UnknownInstance(instance_id) from None

    def stage_instances(self, stage: str) -> list[int]:
        return sorted(i for i, r in self.instances.items() if r.role is Role.WORKFLOW and r.stage == stage)

    def role_instances(self, role: Role) -> list[int]:
        return sorted(i for i, r in self.instances.items() if r.role is role)

    def idle_pool(self) -> list[int]:
        return self.role_instances(Role.IDLE)

    def entrance_capacity(self, stage: str) -> int:
        """Requests the stage can run at once: workers under IM, one per CM instance."""
        collab = self.stage_modes.get(stage) == "collaboration"
        return sum(1 if collab else self.instances[i].workers for i in self.stage_instances(stage))

    # -- utilisation --------------------------------------------------------

    def report_utilization(self, instance_id: int, util: float, now: int) -> bool:
        rec = self.record(instance_id)
        if not 0.0 <= util <= 1.0:
            raise ValueError(f"utilisation {util} outside [0, 1]")
        last = rec.last_report
        if last is not None and now < last[0]:
            raise ValueError(f"report at tick {now} is older than the last one ({last[0]})")
        rec.reports.append((now, float(util)))
        # keep one window of history; older reports can never count again
        while rec.reports and rec.reports[0][0] <= now - self.window:
            rec.reports.popleft()
        return True

    def instance_average(self, instance_id: int, now: int) -> float | None:
        vals = [u for t, u in self.record(instance_id).reports if now - self.window < t <= now]
        return sum(vals) / len(vals) if vals else None

    def stage_average(self, stage: str, now: int) -> float | None:
        """Unweighted mean over the stage's instances that reported in the window."""
        avgs = [a for a in (self.instance_average(i, now) for i in self.stage_instances(stage)) if a is not None]
        return sum(avgs) / len(avgs) if avgs else None

    # -- scaling ------------------------------------------------------------

    def rebalance(self, now: int) -> list[Reassignment]:
        """Move at most one instance into the hottest stage if it is above threshold."""
        averages = {}
        for stage in sorted(self.known_stages()):
            avg = self.stage_average(stage, now)
            if avg is not None:
                averages[stage] = avg
        if not averages:
            return []
        hot = max(sorted(averages), key=lambda s: averages[s])
        hot_avg = averages[hot]
        if hot_avg <= self.threshold:
            return []
        granted = self.last_grant.get(hot)
        if granted is not None and now - granted < self.window:
            # the previous grant has not been reflected in a full window yet
            return []
        donor, donor_avg, source = self._pick_donor(hot, averages, now)
        if donor is None:
            self.log.append(("rebalance_noop", now, hot))
            return []
        move = Reassignment(now, donor, self.instances[donor].stage, hot, source, hot_avg, donor_avg)
        self._assign(donor, hot, now)
        self.last_grant[hot] = now
        self.history.append(move)
        return [move]

    def _pick_donor(self, hot: str, averages: Mapping[str, float], now: int):
        idle = self.idle_pool()
        if idle:
            return idle[0], None, "idle_pool"
        for stage in sorted((s for s in averages if s != hot), key=lambda s: (averages[s], s)):
            members = self.stage_instances(stage)
            if len(members) < 2:
                continue
            inst = {i: self.instance_average(i, now) for i in members}
            total = sum(a for a in inst.values() if a is not None)
            # donor floor: the remaining instances absorb the load and stay below threshold
            if total / (len(members) - 1) >= self.threshold:
                continue
            pick = min(members, key=lambda i: (inst[i] if inst[i] is not None else 0.0, i))
            return pick, averages[stage], "donor"
        return None, None, ""

    def assign(self, instance_id: int, stage: str | None, now: int) -> None:
        """Operator-driven (re)assignment; ``None`` returns the instance to the idle pool."""
        self._assign(instance_id, stage, now)

    def _assign(self, instance_id: int, stage: str | None, now: int) -> None:
        if stage is not None and stage not in self.known_stages():
            raise RouteError(f"unknown stage {stage!r}")
        before = self.route_tables()
        rec = self.record(instance_id)
        rec.stage = stage
        rec.role = Role.WORKFLOW if stage is not None else Role.IDLE
        rec.reports.clear()
        self.version += 1
        self.log.append(("assign", now, instance_id, stage))
        after = self.route_tables()
        for iid in sorted(after):
            if iid == instance_id or before.get(iid) != after[iid]:
                r = self.instances[iid]
                self.deliveries.append(StateDelivery(now, iid, r.stage, after[iid], self.version))

    def take_deliveries(self) -> list[StateDelivery]:
        out, self.deliveries = self.deliveries, []
        return out

    # -- routing ------------------------------------------------------------

    def resolve_route(self, app_id: int, stage_index: int) -> list[int]:
        """Instances that receive the output of stage ``stage_index`` of ``app_id``.

        ``-1`` asks for the entrance stage (what a proxy sends to); the last
        stage routes to the database instances.
        """
        stages = self.apps.get(app_id)
        if stages is None:
            raise RouteError(f"unknown app {app_id}")
        if not -1 <= stage_index < len(stages):
            raise RouteError(f"app {app_id} has no stage {stage_index}")
        if stage_index == len(stages) - 1:
            return self.role_instances(Role.DATABASE)
        return self.stage_instances(stages[stage_index + 1])

    def routes_for(self, instance_id: int) -> dict[int, tuple[int, ...]]:
        rec = self.record(instance_id)
        out: dict[int, tuple[int, ...]] = {}
        for app, stages in sorted(self.apps.items()):
            if rec.role is Role.PROXY:
                out[app] = tuple(self.resolve_route(app, -1))
            elif rec.role is Role.WORKFLOW and rec.stage in stages:
                out[app] = tuple(self.resolve_route(app, stages.index(rec.stage)))
        return out

    def route_tables(self) -> dict[int, dict[int, tuple[int, ...]]]:
        return {i: self.routes_for(i) for i, r in self.instances.items()
                if r.role in (Role.PROXY, Role.WORKFLOW, Role.IDLE)}

    def snapshot(self) -> dict:
        """Plain-data view a task manager syncs from."""
        return {
            "version": self.version,
            "instances": {i: (r.role.value, r.stage, r.workers) for i, r in sorted(self.instances.items())},
        }


def stage_of(apps: Mapping[int, Sequence[str]], app_id: int, index: int) -> str | None:
    stages = apps.get(app_id)
    if stages is None or not 0 <= index < len(stages):
        return None
    return stages[index]


def shared_stages(apps: Mapping[int, Sequence[str]]) -> dict[str, list[int]]:
    """Stage name -> apps that use it (only stages used by more than one app)."""
    users: dict[str, list[int]] = {}
    for app, stages in sorted(apps.items()):
        for s in dict.fromkeys(stages):
            users.setdefault(s, []).append(app)
    return {s: a for s, a in users.items() if len(a) > 1}

