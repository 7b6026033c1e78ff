from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from aigcflow.acceptance import mixed_document, pipeline_document
from aigcflow.pipeline import end_to_end_latency, required_instances, steady_output_interval
from aigcflow.scenario import build_scenario, load_scenario
from aigcflow.sim import Simulation, run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run_doc(doc):
    return Simulation(build_scenario(doc)).run()


def test_zero_arrivals_zero_everything():
    doc = pipeline_document(4, 12, 1, 3, 100)
    doc["arrivals"] = []
    rep = run_doc(doc)
    assert rep.ok and rep.rows == []
    for key in ("arrivals", "accepted", "rejected", "completed", "dropped", "in_flight", "duplicates"):
        assert rep.aggregates[key] == 0


@pytest.mark.parametrize("k,m,interval", [(1, 3, 4), (2, 6, 2)])
def test_pipeline_interval_and_latency(k, m, interval):
    assert required_instances(4, 12, k) == m
    assert steady_output_interval(4, k) == interval
    rep = run_scenario(load_scenario(SCENARIOS / f"pipeline_k{k}.yaml", environ={}))
    assert rep.ok, rep.violations
    outs = rep.stage_outputs["Y"][m:]
    assert {b - a for a, b in zip(outs, outs[1:])} == {interval}
    done = [r for r in rep.rows if r.status == "completed"]
    assert len(done) > 40
    assert all(r.latency == end_to_end_latency([4, 12], r.network) for r in done)


def test_latency_hundred_requests():
    doc = pipeline_document(4, 12, 1, 3, 4 * 100 + 16)
    rep = run_doc(doc)
    done = [r for r in rep.rows if r.status == "completed"]
    assert len(done) >= 100
    assert {r.latency - r.network for r in done} == {16}


def test_under_provisioned_backlog():
    from aigcflow.acceptance import queue_growth
    samples = queue_growth(4, 12, 1, 2)
    assert all(b > a for a, b in zip(samples, samples[1:]))


def test_deterministic_exports():
    doc = mixed_document(5, run_length=600)
    assert run_doc(doc).to_jsonl() == run_doc(doc).to_jsonl()


@pytest.mark.parametrize("seed", [1, 2])
def test_mixed_conservation(seed):
    rep = run_doc(mixed_document(seed, run_length=800))
    a = rep.aggregates
    assert rep.ok, rep.violations[:5]
    assert a["accepted"] == a["completed"] + a["dropped"] + a["in_flight"]
    assert a["duplicates"] == 0
    assert a["accepted"] + a["rejected"] == a["arrivals"]
    for row in rep.rows:
        if row.status == "completed":
            assert row.stage_received == sorted(row.stage_received)
            assert row.latency == sum(
                f - s for s, f in zip(row.stage_started, row.stage_finished)) + row.network + row.queue_wait


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 6), st.integers(7, 30), st.integers(1, 3))
def test_random_pipelines_exact(t_x, t_y, k):
    m = required_instances(t_x, t_y, k)
    period = steady_output_interval(t_x, k)
    run_length = t_x + t_y + (m + 12) * period
    sc = build_scenario(pipeline_document(t_x, t_y, k, m, run_length))
    rep = Simulation(sc).run()
    outs = [Fraction(t, sc.time_scale) for t in rep.stage_outputs["Y"]][m:]
    assert {b - a for a, b in zip(outs, outs[1:])} == {period}


def test_database_kill_survival():
    from aigcflow.acceptance import database_kill_document
    sim = Simulation(build_scenario(database_kill_document(1)))
    sim.sched.call_at(7, sim.databases[200].store.crash, priority=99)
    rep = sim.run()
    row = rep.rows[0]
    assert (row.status, row.completed_at, row.fetched_at, row.fetch_attempts) == ("completed", 5, 10, 2)


def test_final_stage_stored_in_database():
    doc = pipeline_document(4, 12, 1, 3, 60)
    sim = Simulation(build_scenario(doc))
    rep = sim.run()
    db = sim.databases[2000].store
    assert db.stats.puts == rep.aggregates["completed"] > 0


def test_rebalance_moves_idle_instance_in_sim():
    doc = mixed_document(3, run_length=1500)
    rep = run_doc(doc)
    assert rep.ok
    first = rep.rebalances[0]
    assert (first["instance"], first["from"], first["source"]) == (10, None, "idle_pool")
    assert first["hot_average"] > 0.85
