"""Acceptance criteria as named, seeded, exportable checks.

Each criterion returns an :class:`Outcome` whose ``export`` is a
deterministic json-lines document of everything it checked (no wall-clock
values), so criterion 10 can rerun the others and compare bytes.
"""
from __future__ import annotations

import hashlib
import json
import random
import time
import uuid
from dataclasses import dataclass, field
from fractions import Fraction
from math import ceil
from typing import Callable

from .dbstore import DbStore, client_fetch
from .election import explore_two_candidates, run_schedule
from .liveness import replay_liveness_case
from .nodemanager import NodeManager, Role
from .pipeline import required_instances, steady_output_interval, time_scale_for
from .ringcheck import run_faults, run_fifo
from .scenario import build_scenario
from .sim import Simulation

DEFAULT_SEED = 2024


@dataclass
class Outcome:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    limit: float
    export: bytes = b""
    problems: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} criterion {self.number:>2} {self.name:<22} "
                f"{self.seconds:7.2f}s (limit {self.limit:g}s)  {self.detail}")


def _jsonl(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":"), default=str) + "\n"
                   for r in records).encode()


def _finish(number: int, name: str, limit: float, start: float, problems: list[str], detail: str,
            records) -> Outcome:
    seconds = time.perf_counter() - start
    if seconds > limit:
        problems = [*problems, f"took {seconds:.1f}s, limit {limit:g}s"]
    export = _jsonl([*records, {"type": "problems", "problems": problems}])
    return Outcome(number, name, not problems, detail, seconds, limit, export, problems)


# --------------------------------------------------------------------------
# 1-3: ring buffer


def criterion_1(seed: int = DEFAULT_SEED) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    for case in range(1, 9):
        v = replay_liveness_case(case)
        records.append({"case": case, "passed": v.passed, "summary": v.summary, "tail": v.tail,
                        "head": v.head, "lock": v.lock_owner, "steps": v.steps})
        if not v.passed:
            problems.append(f"case {case}: {'; '.join(v.mismatches)}")
    return _finish(1, "liveness cases", 1.0, start, problems, f"{8 - len(problems)}/8 cases match", records)


def criterion_2(seed: int = DEFAULT_SEED, count: int = 10_000) -> Outcome:
    start = time.perf_counter()
    results = run_fifo(count, seed0=seed)
    problems = [f"seed {r.seed}: {p}" for r in results for p in r.problems]
    records = [{"seed": r.seed, "producers": r.producers, "appends": r.appends, "committed": r.committed,
                "full": r.full, "reads": r.reads, "ok": r.ok} for r in results]
    spread = sorted({r.producers for r in results})
    committed = sum(r.committed for r in results)
    return _finish(2, "ring oracle", 30.0, start, problems[:20],
                   f"{count} sequences, producers {spread[0]}-{spread[-1]}, {committed} entries", records)


def criterion_3(seed: int = DEFAULT_SEED, count: int = 10_000) -> Outcome:
    start = time.perf_counter()
    results = run_faults(count, seed0=seed)
    problems = [f"seed {r.seed}: {p}" for r in results for p in r.problems]
    records = [{"seed": r.seed, "lock_timeout": r.lock_timeout, "statuses": r.statuses,
                "committed": r.committed_slots, "phantoms": r.phantoms, "reads": r.reads,
                "corrupt": r.corrupt, "stale_ops": r.stale_ops, "ok": r.ok} for r in results]
    corrupt = sum(r.corrupt for r in results)
    return _finish(3, "ring fuzz", 120.0, start, problems[:20],
                   f"{count} schedules, {sum(r.committed_slots for r in results)} commits, "
                   f"{corrupt} checksum skips all confined", records)


# --------------------------------------------------------------------------
# 4-5: pipeline timing through the full simulator


def pipeline_document(t_x, t_y, k: int, m: int, run_length, seed: int = 0, queue_cap: int | None = 64,
                      arrival_interval=None) -> dict:
    """X: one IM instance with ``k`` workers; Y: ``m`` single-worker CM instances."""
    t_x, t_y = Fraction(t_x), Fraction(t_y)
    interval = arrival_interval if arrival_interval is not None else t_x / (2 * k)
    scale = time_scale_for(t_x, t_y, Fraction(interval), Fraction(run_length))
    f = lambda v: str(Fraction(v))  # noqa: E731
    return {
        "name": f"pipeline_tx{f(t_x)}_ty{f(t_y)}_k{k}_m{m}",
        "seed": seed,
        "run_length": f(run_length),
        "time_scale": scale,
        "stages": {"X": {"duration": f(t_x), "mode": "individual"},
                   "Y": {"duration": f(t_y), "mode": "collaboration"}},
        "apps": {"1": ["X", "Y"]},
        "instances": [{"id": 1, "stage": "X", "workers": k, "queue_cap": queue_cap}]
                     + [{"id": 10 + i, "stage": "Y", "workers": 1, "queue_cap": queue_cap} for i in range(m)],
        "proxies": [1000],
        "databases": [2000],
        "arrivals": [{"app": 1, "kind": "periodic", "interval": f(interval)}],
        # no rebalancing inside a timing run
        "config": {"rebalance_interval": f(run_length), "window": f(run_length)},
    }


def check_pipeline(t_x, t_y, k: int, seed: int = 0, outputs: int = 24) -> tuple[list[str], dict]:
    """Run the M = ceil(K*T_Y/T_X) pipeline and compare with the closed forms."""
    t_x, t_y = Fraction(t_x), Fraction(t_y)
    m = required_instances(t_x, t_y, k)
    period = steady_output_interval(t_x, k)
    run_length = t_x + t_y + (m + outputs + 2) * period
    sc = build_scenario(pipeline_document(t_x, t_y, k, m, run_length, seed))
    report = Simulation(sc).run()
    problems = list(report.violations)
    outs = [Fraction(t, sc.time_scale) for t in report.stage_outputs.get("Y", [])]
    steady = outs[m:]
    gaps = sorted({b - a for a, b in zip(steady, steady[1:])})
    tag = f"T_X={t_x} T_Y={t_y} K={k} M={m}"
    if len(steady) < outputs // 2:
        problems.append(f"{tag}: only {len(outs)} outputs")
    elif gaps != [period]:
        problems.append(f"{tag}: steady intervals {[str(g) for g in gaps]} != {period}")
    done = [r for r in report.rows if r.status == "completed"]
    for r in done:
        expect = (t_x + t_y) * sc.time_scale + r.network
        if r.latency != expect:
            problems.append(f"{tag}: request {r.index} latency {r.latency} ticks, expected {expect}")
            break
    record = {"t_x": str(t_x), "t_y": str(t_y), "k": k, "m": m, "scale": sc.time_scale,
              "interval": str(period), "gaps": [str(g) for g in gaps], "outputs": len(outs),
              "completed": len(done), "network": sorted({r.network for r in done}),
              "latencies": sorted({r.latency for r in done}),
              "export_sha256": hashlib.sha256(report.to_jsonl().encode()).hexdigest()}
    return problems, record


def queue_growth(t_x, t_y, k: int, m: int, checkpoints: int = 4, seed: int = 0) -> list[int]:
    """Total Y backlog at evenly spaced checkpoints with ``m`` Y instances and no queue cap."""
    t_x, t_y = Fraction(t_x), Fraction(t_y)
    period = steady_output_interval(t_x, k)
    deficit = Fraction(k) / t_x - Fraction(m) / t_y     # backlog growth per time unit
    if deficit <= 0:
        raise ValueError("queue_growth needs an under-provisioned Y stage")
    # long enough for at least three more queued requests per checkpoint
    span = period * ceil(max(4 * t_y, 3 / deficit) / period)
    sc = build_scenario(pipeline_document(t_x, t_y, k, m, span * checkpoints, seed, queue_cap=None))
    sim = Simulation(sc)
    samples: list[int] = []
    ys = [inst for inst in sim.instances.values() if inst.config.stage == "Y"]

    def sample() -> None:
        samples.append(sum(len(i.queue) for i in ys))

    for c in range(1, checkpoints + 1):
        sim.sched.call_at(sc.ticks(span * c) - 1, sample, priority=99)
    sim.run()
    return samples


def random_pipeline_configs(seed: int, count: int) -> list[tuple[Fraction, Fraction, int]]:
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        t_x = Fraction(rng.randint(1, 24), rng.choice((1, 1, 2, 3, 4)))
        t_y = Fraction(rng.randint(1, 60), rng.choice((1, 1, 2, 3, 5)))
        k = rng.randint(1, 4)
        if t_x < t_y:
            out.append((t_x, t_y, k))
    return out


def criterion_4(seed: int = DEFAULT_SEED, count: int = 100) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    for t_x, t_y, k, want in ((4, 12, 1, 4), (4, 12, 2, 2)):
        p, rec = check_pipeline(t_x, t_y, k, seed)
        if Fraction(rec["interval"]) != want or rec["m"] != 3 * k:
            p.append(f"T_X={t_x} T_Y={t_y} K={k}: expected M={3 * k} interval {want}")
        problems += p
        records.append({"type": "example", **rec})
    for t_x, t_y, k in random_pipeline_configs(seed, count):
        p, rec = check_pipeline(t_x, t_y, k, seed)
        problems += p
        records.append({"type": "random", **rec})
    # negative control: one Y instance short of the bound
    for t_x, t_y, k in ((4, 12, 1), (4, 12, 2), *random_pipeline_configs(seed + 1, 3)):
        m = required_instances(t_x, t_y, k) - 1
        samples = queue_growth(t_x, t_y, k, m, seed=seed)
        grows = all(b > a for a, b in zip(samples, samples[1:])) and samples[0] > 0
        records.append({"type": "negative", "t_x": str(t_x), "t_y": str(t_y), "k": k, "m": m,
                        "backlog": samples})
        if not grows:
            problems.append(f"negative control T_X={t_x} T_Y={t_y} K={k} M={m}: backlog {samples} not growing")
    return _finish(4, "pipeline bound", 60.0, start, problems[:20],
                   f"2 worked configs + {count} random exact; M-1 backlog grows", records)


FAST_REJECT_CONFIGS = ((1, 4), (1, 8), (3, 18), (4, 32))


def criterion_5(seed: int = DEFAULT_SEED, horizon: int = 10_000) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    for k, t_x in FAST_REJECT_CONFIGS:
        t_y = 3 * t_x
        m = required_instances(t_x, t_y, k)
        doc = pipeline_document(t_x, t_y, k, m, horizon, seed, arrival_interval=Fraction(t_x, 2 * k))
        doc["time_scale"] = 1
        sc = build_scenario(doc)
        report = Simulation(sc).run()
        accepted = report.aggregates["accepted"]
        want = ceil(Fraction(horizon * k, t_x))
        bound = t_x + t_y
        worst = max((r.latency - r.network for r in report.rows if r.latency is not None), default=0)
        records.append({"k": k, "t_x": t_x, "arrivals": report.aggregates["arrivals"], "accepted": accepted,
                        "expected": want, "worst_latency_less_network": worst, "bound": bound,
                        "violations": report.violations})
        if abs(accepted - want) > 1:
            problems.append(f"K={k} T_X={t_x}: accepted {accepted}, expected {want} +-1")
        if worst > bound:
            problems.append(f"K={k} T_X={t_x}: latency {worst} exceeds {bound}")
        problems += report.violations
    return _finish(5, "fast reject", 10.0, start, problems[:20],
                   f"{len(FAST_REJECT_CONFIGS)} limits at 2x over {horizon} ticks", records)


# --------------------------------------------------------------------------
# 6: rebalance


def rebalance_manager(idle: bool, threshold: float = 0.85, window: int = 300) -> NodeManager:
    """Preparation at 60%, diffusion pinned at 100% across one full window."""
    apps = {1: ("preparation", "diffusion", "decode")}
    modes = {"preparation": "individual", "diffusion": "collaboration", "decode": "individual"}
    nm = NodeManager(apps, modes, threshold, window)
    nm.register(1, Role.PROXY)
    for i in range(4):
        nm.register(10 + i, Role.WORKFLOW, "preparation")
    nm.register(20, Role.WORKFLOW, "diffusion")
    nm.register(30, Role.WORKFLOW, "decode")
    nm.register(40, Role.DATABASE)
    if idle:
        nm.register(50, Role.WORKFLOW, None)
    for t in range(10, window + 1, 10):
        for i in range(4):
            nm.report_utilization(10 + i, 0.6, t)
        nm.report_utilization(20, 1.0, t)
        nm.report_utilization(30, 0.5, t)
    return nm


def criterion_6(seed: int = DEFAULT_SEED) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    for idle, source, donor in ((True, "idle_pool", 50), (False, "donor", 10)):
        nm = rebalance_manager(idle)
        now = nm.window
        first = nm.rebalance(now)
        again = nm.rebalance(now)
        deliveries = nm.take_deliveries()
        records.append({"idle_pool": idle, "moves": [m.__dict__ for m in first],
                        "rerun_moves": len(again), "deliveries": [d.instance_id for d in deliveries],
                        "diffusion": nm.stage_instances("diffusion")})
        if len(first) != 1 or first[0].to_stage != "diffusion":
            problems.append(f"idle={idle}: expected one move into diffusion, got {first}")
        elif (first[0].source, first[0].instance_id) != (source, donor):
            problems.append(f"idle={idle}: donor {first[0].instance_id} via {first[0].source}, "
                            f"expected {donor} via {source}")
        if again:
            problems.append(f"idle={idle}: re-run moved {again}")
        if donor not in {d.instance_id for d in deliveries}:
            problems.append(f"idle={idle}: reassigned instance got no state delivery")
    return _finish(6, "rebalance", 5.0, start, problems,
                   "one move into diffusion, idle pool first, stable re-run", records)


# --------------------------------------------------------------------------
# 7: election


def criterion_7(seed: int = DEFAULT_SEED, schedules: int = 10_000) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    for drops in (False, True):
        res = explore_two_candidates(3, (1, 2), drops=drops)
        records.append({"type": "exhaustive", "drops": drops, "states": res.states, "terminal": res.terminal,
                        "winners": res.winners, "violations": res.violations})
        problems += [f"exhaustive drops={drops}: {v}" for v in res.violations[:5]]
    half = schedules // 2
    elections = windows = 0
    for n, count in ((3, half), (5, schedules - half)):
        for i in range(count):
            r = run_schedule(seed + i, n)
            elections += r.elections
            windows += r.windows_checked
            records.append({"type": "schedule", "seed": r.seed, "n": n, "elections": r.elections,
                            "windows": r.windows_checked, "problems": r.problems})
            problems += [f"n={n} seed={r.seed}: {p}" for p in r.problems]
    return _finish(7, "election", 120.0, start, problems[:20],
                   f"exhaustive 3x2 clean; {schedules} schedules, {elections} elections, "
                   f"{windows} majority windows led", records)


# --------------------------------------------------------------------------
# 8: database


def _db_pair(ttl: int = 100) -> list[DbStore]:
    return [DbStore(1, ttl=ttl), DbStore(2, ttl=ttl)]


def _deliver(stores: list[DbStore], now: int) -> None:
    by_id = {s.instance_id: s for s in stores}
    moved = True
    while moved:
        moved = False
        for s in stores:
            for peer, msg in s.take_outbox():
                if by_id[peer].alive:
                    by_id[peer].receive(msg, now)
                moved = True


def database_kill_document(seed: int) -> dict:
    return {
        "name": "db_kill", "seed": seed, "run_length": 200,
        "stages": {"S": {"duration": 5}}, "apps": {"1": ["S"]},
        "instances": [{"id": 1, "stage": "S"}], "proxies": [100], "databases": [200, 201],
        "arrivals": [{"app": 1, "kind": "explicit", "times": [0]}],
        "config": {"replicas": 2, "client_poll_interval": 10, "ttl": 100},
    }


def criterion_8(seed: int = DEFAULT_SEED) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    rng = random.Random(seed)
    uid = uuid.UUID(int=rng.getrandbits(128), version=4)

    # TTL expiry: a copy fetched after its TTL is gone everywhere
    stores = _db_pair(ttl=100)
    stores[0].put(uid, b"r", 0, peers=[2])
    _deliver(stores, 0)
    late = client_fetch(stores, uid, 101)
    edge = _db_pair(ttl=100)
    edge[0].put(uid, b"r", 0)
    on_time = client_fetch(edge, uid, 100)
    records.append({"check": "ttl", "late": late.found, "on_time": on_time.found,
                    "expired": sum(s.stats.expired for s in stores)})
    if late.found or not on_time.found:
        problems.append(f"ttl: fetch at 101 found={late.found}, at 100 found={on_time.found}")

    # fetch-once: the first hit purges the local copy and, via hints, the replica
    stores = _db_pair()
    stores[0].put(uid, b"r", 0, peers=[2])
    _deliver(stores, 0)
    first = client_fetch(stores, uid, 5)
    _deliver(stores, 5)
    second = client_fetch(stores, uid, 6)
    records.append({"check": "fetch_once", "first": first.found, "second": second.found,
                    "left": [len(s) for s in stores]})
    if not first.found or second.found or any(len(s) for s in stores):
        problems.append("fetch-once: result served twice or left behind")

    # retry-next-instance: only the second instance holds it
    stores = _db_pair()
    stores[1].put(uid, b"r", 0)
    res = client_fetch(stores, uid, 1)
    records.append({"check": "retry_next", "found": res.found, "attempts": res.attempts,
                    "instance": res.instance_id})
    if not res.found or res.attempts != 2 or res.instance_id != 2:
        problems.append(f"retry-next: {res}")

    # replication survives a kill (R=2), end to end through the simulator
    sc = build_scenario(database_kill_document(seed))
    sim = Simulation(sc)
    sim.sched.call_at(7, sim.databases[200].store.crash, priority=99)
    report = sim.run()
    row = report.rows[0]
    records.append({"check": "kill", "status": row.status, "completed_at": row.completed_at,
                    "fetched_at": row.fetched_at, "attempts": row.fetch_attempts,
                    "violations": report.violations})
    if row.completed_at != 5 or row.fetched_at != 10 or row.fetch_attempts != 2:
        problems.append(f"kill: stored {row.completed_at}, fetched {row.fetched_at} "
                        f"after {row.fetch_attempts} attempts")
    problems += report.violations
    return _finish(8, "database", 10.0, start, problems,
                   "ttl, fetch-once, retry-next and R=2 kill survival", records)


# --------------------------------------------------------------------------
# 9: end to end


def mixed_document(seed: int, run_length: int = 4000) -> dict:
    """Two apps sharing preparation, diffusion and decode; app 2 adds an encode stage."""
    return {
        "name": "mixed", "seed": seed, "run_length": run_length,
        "stages": {
            "preparation": {"duration": 4, "mode": "individual", "output_size": 96},
            "encode": {"duration": 3, "mode": "individual", "output_size": 128},
            "diffusion": {"duration": 10, "mode": "collaboration", "output_size": 64},
            "decode": {"duration": 3, "mode": "individual", "output_size": 160},
        },
        "apps": {"1": ["preparation", "diffusion", "decode"],
                 "2": ["preparation", "encode", "diffusion", "decode"]},
        "instances": [
            {"id": 1, "stage": "preparation", "workers": 2},
            {"id": 2, "stage": "encode", "workers": 1},
            {"id": 3, "stage": "diffusion", "workers": 2},
            {"id": 4, "stage": "diffusion", "workers": 2},
            {"id": 5, "stage": "diffusion", "workers": 2},
            {"id": 6, "stage": "diffusion", "workers": 2},
            {"id": 7, "stage": "diffusion", "workers": 2},
            {"id": 8, "stage": "decode", "workers": 1},
            {"id": 9, "stage": "decode", "workers": 1},
            {"id": 10, "stage": None},
        ],
        "proxies": [100, 101],
        "databases": [200, 201, 202],
        "arrivals": [{"app": 1, "kind": "poisson", "rate": 0.4},
                     {"app": 2, "kind": "periodic", "interval": 3}],
        "faults": {"seed": seed, "scope": "inter_stage", "rules": [
            {"action": "drop", "probability": 0.004},
            {"action": "delay", "probability": 0.02, "ticks": 1, "max_ticks": 60},
        ]},
        # one fabric tick is 1/20 of a time unit; fault delays are in ticks
        "time_scale": 20,
        "config": {"lock_timeout": 1, "slot_count": 64, "buffer_size": 4096, "latency": "1/20",
                   "window": 200, "rebalance_interval": 100, "drain": 100},
    }


def criterion_9(seed: int = DEFAULT_SEED, runs: int = 4) -> Outcome:
    start = time.perf_counter()
    problems, records = [], []
    totals = {"accepted": 0, "rejected": 0, "completed": 0, "dropped": 0, "in_flight": 0}
    for i in range(runs):
        report = Simulation(build_scenario(mixed_document(seed + i))).run()
        agg = report.aggregates
        for key in totals:
            totals[key] += agg[key]
        records.append({"seed": seed + i, **agg, "violations": report.violations,
                        "export_sha256": hashlib.sha256(report.to_jsonl().encode()).hexdigest()})
        problems += [f"seed {seed + i}: {v}" for v in report.violations]
        if agg["accepted"] != agg["completed"] + agg["dropped"] + agg["in_flight"]:
            problems.append(f"seed {seed + i}: accounting identity broken")
        if not agg["rejected"]:
            problems.append(f"seed {seed + i}: fast reject never engaged")
        if not agg["completed"]:
            problems.append(f"seed {seed + i}: nothing completed")
    return _finish(9, "end-to-end", 60.0, start, problems[:20],
                   "accepted {accepted} = completed {completed} + dropped {dropped} + in-flight {in_flight}; "
                   "rejected {rejected}".format(**totals), records)


# --------------------------------------------------------------------------
# 10 and the runner

CRITERIA: dict[int, Callable[..., Outcome]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9,
}


def criterion_10(first: dict[int, Outcome], seed: int = DEFAULT_SEED) -> Outcome:
    """Rerun every criterion in ``first`` with the same seed and compare exports."""
    start = time.perf_counter()
    problems, records = [], []
    limit = 0.0
    for number in sorted(first):
        again = CRITERIA[number](seed)
        limit += first[number].limit
        a = hashlib.sha256(first[number].export).hexdigest()
        b = hashlib.sha256(again.export).hexdigest()
        records.append({"criterion": number, "first": a, "rerun": b})
        if a != b:
            problems.append(f"criterion {number}: rerun export differs")
    return _finish(10, "determinism", max(limit, 1.0), start, problems,
                   f"{len(first)} criteria rerun byte-identical" if not problems else "exports differ", records)


def run_all(seed: int = DEFAULT_SEED, only: list[int] | None = None,
            emit: Callable[[str], None] | None = print) -> list[Outcome]:
    numbers = sorted(only) if only else list(range(1, 11))
    outcomes: dict[int, Outcome] = {}
    for number in numbers:
        if number == 10:
            continue
        outcomes[number] = CRITERIA[number](seed)
        if emit:
            emit(outcomes[number].line())
    if 10 in numbers:
        base = outcomes or {n: CRITERIA[n](seed) for n in CRITERIA}
        outcomes[10] = criterion_10(base, seed)
        if emit:
            emit(outcomes[10].line())
    return [outcomes[n] for n in numbers]
