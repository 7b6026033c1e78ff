from pathlib import Path

import pytest

from aigcflow.cli import EXIT_CONFIG, EXIT_OK, main

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os
    for var in list(os.environ):
        if var.startswith("AIGCFLOW_"):
            monkeypatch.delenv(var)


def test_run_and_export(tmp_path, capsys):
    out = tmp_path / "k1.jsonl"
    assert main(["run", str(SCENARIOS / "pipeline_k1.yaml"), "--out", str(out)]) == EXIT_OK
    assert "completed" in capsys.readouterr().out
    csv_out = tmp_path / "k1.csv"
    assert main(["export", str(out), "--out", str(csv_out), "--format", "csv"]) == EXIT_OK
    assert csv_out.exists() and (tmp_path / "k1.aggregates.csv").exists()


def test_run_overrides(tmp_path, capsys):
    args = ["run", str(SCENARIOS / "pipeline_k1.yaml"), "--seed", "3", "--run-length", "40", "--set", "ttl=50"]
    assert main(args) == EXIT_OK
    assert "seed 3, 40 ticks" in capsys.readouterr().out


def test_env_prefix(monkeypatch, capsys):
    monkeypatch.setenv("AIGCFLOW_RUN_LENGTH", "20")
    assert main(["run", str(SCENARIOS / "pipeline_k1.yaml")]) == EXIT_OK
    assert "20 ticks" in capsys.readouterr().out
    monkeypatch.setenv("AIGCFLOW_NOT_A_KEY", "1")
    assert main(["run", str(SCENARIOS / "pipeline_k1.yaml")]) == EXIT_CONFIG


def test_validate(capsys, tmp_path):
    assert main(["validate", str(SCENARIOS / "mixed.yaml")]) == EXIT_OK
    bad = tmp_path / "bad.yaml"
    bad.write_text("stages: {}\napps: {}\ninstances: []\n")
    assert main(["validate", str(bad)]) == EXIT_CONFIG
    assert main(["validate", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_bad_override():
    assert main(["run", str(SCENARIOS / "pipeline_k1.yaml"), "--set", "novalue"]) == EXIT_CONFIG


def test_replay_builtin(capsys, tmp_path):
    log = tmp_path / "log.jsonl"
    assert main(["replay", "7", "--log", str(log)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "consumer read 2 entries (X then Y)" in out and out.rstrip().endswith("PASS")
    assert log.read_text().count("\n") > 5


def test_replay_custom_and_bad(tmp_path):
    case = tmp_path / "c.yaml"
    case.write_text("trace: [Lock(X), GH(X), WB(X), WL(X), UH(X), Unlock(X)]\n")
    assert main(["replay", str(case)]) == EXIT_OK
    case.write_text("trace: [Explode(X)]\n")
    assert main(["replay", str(case)]) == EXIT_CONFIG
    assert main(["replay", "99"]) == EXIT_CONFIG


def test_export_missing(tmp_path):
    assert main(["export", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG


def test_acceptance_subset(tmp_path, capsys):
    assert main(["acceptance", "--only", "1,6,8", "--export-dir", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "3/3 criteria passed" in out
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "criterion_01.jsonl", "criterion_06.jsonl", "criterion_08.jsonl"]
    assert main(["acceptance", "--only", "11"]) == EXIT_CONFIG


def test_no_command():
    assert main([]) == EXIT_CONFIG
