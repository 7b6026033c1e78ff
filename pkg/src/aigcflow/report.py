"""SimReport and its json-lines / csv exports.

Exports are deterministic: keys are sorted, rows keep arrival order and
numbers are written as integers or exact ``"p/q"`` strings, so two runs of
the same scenario and seed produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

ROW_LIST_FIELDS = ("stage_received", "stage_started", "stage_finished", "stage_instance")


@dataclass
class RequestRow:
    index: int
    app_id: int
    arrived_at: int
    rejected: bool
    uid: str = ""
    accepted_at: int | None = None
    status: str = "rejected"           # rejected | in_flight | completed | dropped
    drop_reason: str = ""
    stage_received: list[int] = field(default_factory=list)
    stage_started: list[int] = field(default_factory=list)
    stage_finished: list[int] = field(default_factory=list)
    stage_instance: list[int] = field(default_factory=list)
    completed_at: int | None = None
    network: int = 0
    queue_wait: int = 0
    latency: int | None = None
    fetched_at: int | None = None
    fetch_attempts: int = 0


@dataclass
class SimReport:
    name: str
    seed: int
    time_scale: int
    run_length: int
    rows: list[RequestRow] = field(default_factory=list)
    aggregates: dict[str, Any] = field(default_factory=dict)
    stage_outputs: dict[str, list[int]] = field(default_factory=dict)
    rebalances: list[dict] = field(default_factory=list)
    elections: list[dict] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def meta(self) -> dict:
        return {"name": self.name, "seed": self.seed, "time_scale": self.time_scale,
                "run_length": self.run_length}

    # -- json lines -----------------------------------------------------------

    def to_jsonl(self) -> str:
        out = io.StringIO()
        _line(out, {"type": "meta", **self.meta()})
        for row in self.rows:
            _line(out, {"type": "request", **asdict(row)})
        for stage in sorted(self.stage_outputs):
            _line(out, {"type": "stage_output", "stage": stage, "ticks": self.stage_outputs[stage]})
        for ev in self.rebalances:
            _line(out, {"type": "rebalance", **ev})
        for ev in self.elections:
            _line(out, {"type": "election", **ev})
        for v in self.violations:
            _line(out, {"type": "violation", "message": v})
        _line(out, {"type": "aggregates", **self.aggregates})
        return out.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "SimReport":
        rep: SimReport | None = None
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "meta":
                rep = cls(**rec)
                continue
            if rep is None:
                raise ValueError(f"line {n}: records before the meta line")
            if kind == "request":
                rep.rows.append(RequestRow(**rec))
            elif kind == "stage_output":
                rep.stage_outputs[rec["stage"]] = list(rec["ticks"])
            elif kind == "rebalance":
                rep.rebalances.append(rec)
            elif kind == "election":
                rep.elections.append(rec)
            elif kind == "violation":
                rep.violations.append(rec["message"])
            elif kind == "aggregates":
                rep.aggregates = rec
            else:
                raise ValueError(f"line {n}: unknown record type {kind!r}")
        if rep is None:
            raise ValueError("no meta line")
        return rep

    # -- csv ------------------------------------------------------------------

    def rows_csv(self) -> str:
        out = io.StringIO()
        names = [f.name for f in fields(RequestRow)]
        w = csv.writer(out, lineterminator="\n")
        w.writerow(names)
        for row in self.rows:
            d = asdict(row)
            w.writerow([_csv_cell(d[k], k) for k in names])
        return out.getvalue()

    def aggregates_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in self.meta().items():
            w.writerow([f"meta.{k}", json.dumps(v)])
        for k in sorted(self.aggregates):
            w.writerow([k, json.dumps(self.aggregates[k], sort_keys=True)])
        for v in self.violations:
            w.writerow(["violation", json.dumps(v)])
        return out.getvalue()

    @classmethod
    def from_csv(cls, rows_text: str, aggregates_text: str) -> "SimReport":
        meta: dict[str, Any] = {}
        aggregates: dict[str, Any] = {}
        violations = []
        for rec in csv.DictReader(io.StringIO(aggregates_text)):
            key, value = rec["key"], json.loads(rec["value"])
            if key.startswith("meta."):
                meta[key[5:]] = value
            elif key == "violation":
                violations.append(value)
            else:
                aggregates[key] = value
        rep = cls(**meta, aggregates=aggregates, violations=violations)
        types = {f.name: f.type for f in fields(RequestRow)}
        for rec in csv.DictReader(io.StringIO(rows_text)):
            rep.rows.append(RequestRow(**{k: _parse_cell(v, k, types[k]) for k, v in rec.items()}))
        return rep

    # -- files ----------------------------------------------------------------

    def export(self, path: str | Path, fmt: str = "jsonl") -> list[Path]:
        """Write the report; csv writes ``<path>`` plus ``<stem>.aggregates.csv``."""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            if fmt in ("jsonl", "json-lines"):
                path.write_text(self.to_jsonl(), encoding="utf-8")
                return [path]
            if fmt == "csv":
                agg = aggregates_path(path)
                path.write_text(self.rows_csv(), encoding="utf-8")
                agg.write_text(self.aggregates_csv(), encoding="utf-8")
                return [path, agg]
        except OSError as exc:
            raise ExportError(f"cannot write {path}: {exc}") from exc
        raise ExportError(f"unknown export format {fmt!r} (use jsonl or csv)")

    @classmethod
    def load(cls, path: str | Path) -> "SimReport":
        path = Path(path)
        if path.suffix == ".csv":
            return cls.from_csv(path.read_text(encoding="utf-8"),
                                aggregates_path(path).read_text(encoding="utf-8"))
        return cls.from_jsonl(path.read_text(encoding="utf-8"))


class ExportError(OSError):
    pass


def aggregates_path(rows_path: Path) -> Path:
    return rows_path.with_name(rows_path.stem + ".aggregates.csv")


def _line(out: io.StringIO, rec: dict) -> None:
    out.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    out.write("\n")


def _csv_cell(value: Any, key: str) -> str:
    if key in ROW_LIST_FIELDS:
        return ";".join(str(v) for v in value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_cell(text: str, key: str, typ: Any) -> Any:
    if key in ROW_LIST_FIELDS:
        return [int(v) for v in text.split(";")] if text else []
    typ = str(typ)
    if typ == "bool":
        return text == "true"
    if text == "" and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(text)
    return text
