import csv
import io
import json

import pytest

from aigcflow.acceptance import mixed_document
from aigcflow.report import ExportError, SimReport
from aigcflow.scenario import build_scenario
from aigcflow.sim import Simulation


@pytest.fixture(scope="module")
def report():
    return Simulation(build_scenario(mixed_document(11, run_length=400))).run()


def test_jsonl_roundtrip(report, tmp_path):
    path = report.export(tmp_path / "r.jsonl", "jsonl")[0]
    back = SimReport.load(path)
    assert back.aggregates == report.aggregates
    assert back.rows == report.rows
    assert back.to_jsonl() == report.to_jsonl()


def test_jsonl_parses_line_by_line(report):
    lines = report.to_jsonl().splitlines()
    recs = [json.loads(line) for line in lines]
    assert recs[0]["type"] == "meta" and recs[-1]["type"] == "aggregates"
    assert sum(r["type"] == "request" for r in recs) == len(report.rows)


def test_csv_roundtrip(report, tmp_path):
    rows_path, agg_path = report.export(tmp_path / "r.csv", "csv")
    assert agg_path.name == "r.aggregates.csv"
    with open(rows_path, newline="") as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == len(report.rows)
    back = SimReport.load(rows_path)
    assert back.aggregates == report.aggregates
    assert back.rows == report.rows


def test_csv_lists_and_none(report):
    text = report.rows_csv()
    first = next(csv.DictReader(io.StringIO(text)))
    assert "stage_received" in first


def test_unknown_format(report, tmp_path):
    with pytest.raises(ExportError):
        report.export(tmp_path / "r.xml", "xml")


def test_unwritable_path(report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError):
        report.export(blocker / "sub" / "r.jsonl")


def test_bad_jsonl():
    with pytest.raises(ValueError):
        SimReport.from_jsonl('{"type": "request"}\n')
    with pytest.raises(ValueError):
        SimReport.from_jsonl("")
