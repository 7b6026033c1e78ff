"""Scenario files: schema, validation, environment overrides, time scaling.

Scenario times (durations, intervals, timeouts) are in *time units* and may
be fractions such as ``"4/3"``.  The simulator runs on integer ticks; the
tick length is ``1/time_scale`` units, where ``time_scale`` defaults to the
smallest integer that makes every time in the scenario a whole tick count.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .fabric import ConfigError, FaultSchedule
from .pipeline import Mode, time_scale_for
from .workflow import DEFAULT_QUEUE_CAP, SimTask, Topology

ENV_PREFIX = "AIGCFLOW_"

_TIME = {"anyOf": [{"type": "number", "minimum": 0},
                   {"type": "string", "pattern": r"^\s*\d+(\s*/\s*\d+)?\s*$"}]}
_ID = {"type": "integer", "minimum": 1, "maximum": 65535}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "required": ["stages", "apps", "instances"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer"},
        "run_length": _TIME,
        "time_scale": {"type": "integer", "minimum": 1},
        "stages": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["duration"],
                "properties": {
                    "mode": {"enum": [m.value for m in Mode]},
                    "duration": _TIME,
                    "gpu_demand": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "output_size": {"type": "integer", "minimum": 0},
                },
            },
        },
        "apps": {
            "type": "object",
            "minProperties": 1,
            "propertyNames": {"pattern": r"^[0-9]+$"},
            "additionalProperties": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        },
        "instances": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id"],
                "properties": {
                    "id": _ID,
                    "stage": {"type": ["string", "null"]},
                    "workers": {"type": "integer", "minimum": 1},
                    "queue_cap": {"type": ["integer", "null"], "minimum": 1},
                },
            },
        },
        "proxies": {"type": "array", "items": _ID},
        "databases": {"type": "array", "items": _ID},
        "arrivals": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["app", "kind"],
                "properties": {
                    "app": {"type": "integer"},
                    "kind": {"enum": ["periodic", "poisson", "explicit"]},
                    "interval": _TIME,
                    "start": _TIME,
                    "until": _TIME,
                    "count": {"type": "integer", "minimum": 0},
                    "rate": {"type": "number", "exclusiveMinimum": 0},
                    "times": {"type": "array", "items": _TIME},
                },
            },
        },
        "faults": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer"},
                "rules": {"type": "array", "items": {"type": "object"}},
                "scope": {"enum": ["all", "inter_stage"]},
                "file": {"type": "string"},
            },
        },
        "nm_events": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["at"],
                "properties": {"at": _TIME, "crash": {"type": "integer"}, "restart": {"type": "integer"}},
            },
        },
        "config": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "threshold": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "window": _TIME,
                "lock_timeout": _TIME,
                "ttl": _TIME,
                "queue_cap": {"type": ["integer", "null"], "minimum": 1},
                "replicas": {"type": "integer", "minimum": 1},
                "buffer_size": {"type": "integer", "minimum": 64},
                "slot_count": {"type": "integer", "minimum": 1},
                "latency": _TIME,
                "report_interval": _TIME,
                "rebalance_interval": _TIME,
                "heartbeat": _TIME,
                "failure_timeout": _TIME,
                "nm_replicas": {"type": "integer", "minimum": 1},
                "nm_latency": _TIME,
                "client_poll_interval": _TIME,
                "drain": _TIME,
            },
        },
    },
}

# config keys that are times (scaled to ticks)
_TIME_KEYS = ("window", "lock_timeout", "ttl", "latency", "report_interval", "rebalance_interval",
              "heartbeat", "failure_timeout", "nm_latency", "client_poll_interval", "drain")

DEFAULT_CONFIG: dict[str, Any] = {
    "threshold": 0.85,
    "window": 300,
    "lock_timeout": 50,
    "ttl": 600,
    "queue_cap": DEFAULT_QUEUE_CAP,
    "replicas": 2,
    "buffer_size": 1 << 16,
    "slot_count": 256,
    "latency": 0,
    "report_interval": 10,
    "rebalance_interval": 60,
    "heartbeat": 10,
    "failure_timeout": 15,
    "nm_replicas": 1,
    "nm_latency": 1,
    "client_poll_interval": 5,
    "drain": 0,
}

# top-level keys that may also come from the environment
_TOP_ENV = {"seed": int, "run_length": str, "time_scale": int, "name": str}


def load_structured(path: str | Path) -> dict:
    """Read a JSON or YAML document into a dict."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path} is not valid {path.suffix.lstrip('.') or 'yaml'}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


def to_fraction(value: Any) -> Fraction:
    try:
        return Fraction(str(value).replace(" ", "")) if isinstance(value, str) else Fraction(value)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a time value: {value!r}") from exc


def _coerce_env(raw: str) -> Any:
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def apply_env(doc: dict, environ: Mapping[str, str] | None = None) -> dict:
    """Override scenario values from ``AIGCFLOW_*`` variables.

    ``AIGCFLOW_SEED``, ``AIGCFLOW_RUN_LENGTH``, ``AIGCFLOW_TIME_SCALE`` and
    ``AIGCFLOW_NAME`` set top-level fields; any other ``AIGCFLOW_<KEY>``
    sets ``config.<key>`` (lower-cased).
    """
    environ = os.environ if environ is None else environ
    doc = json.loads(json.dumps(doc))
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):].lower()
        if key in _TOP_ENV:
            value = _coerce_env(raw) if _TOP_ENV[key] is not str or key == "run_length" else raw
            doc[key] = value
        elif key in DEFAULT_CONFIG:
            doc.setdefault("config", {})[key] = _coerce_env(raw)
        else:
            raise ConfigError(f"unknown override {var}")
    return doc


_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def validate_document(doc: Mapping) -> None:
    error = jsonschema.exceptions.best_match(_VALIDATOR.iter_errors(doc))
    if error is not None:
        where = "/".join(str(p) for p in error.absolute_path) or "<root>"
        raise ConfigError(f"scenario invalid at {where}: {error.message}")


@dataclass(frozen=True)
class InstanceSpec:
    instance_id: int
    stage: str | None
    workers: int = 1
    queue_cap: int | None = DEFAULT_QUEUE_CAP


@dataclass(frozen=True)
class ArrivalSpec:
    app: int
    kind: str
    interval: int = 0       # ticks
    start: int = 0
    until: int | None = None
    count: int | None = None
    rate: float = 0.0       # per tick
    times: tuple[int, ...] = ()


@dataclass
class Scenario:
    """A validated scenario with every time converted to integer ticks."""

    name: str
    seed: int
    run_length: int
    time_scale: int
    topology: Topology
    instances: list[InstanceSpec]
    proxies: list[int]
    databases: list[int]
    arrivals: list[ArrivalSpec]
    config: dict[str, Any]
    faults: FaultSchedule = field(default_factory=FaultSchedule)
    fault_scope: str = "all"
    nm_events: list[dict] = field(default_factory=list)
    document: dict = field(default_factory=dict)

    def ticks(self, units: Any) -> int:
        return to_ticks(units, self.time_scale)

    def units(self, ticks: int) -> Fraction:
        return Fraction(ticks, self.time_scale)


def to_ticks(units: Any, scale: int) -> int:
    value = to_fraction(units) * scale
    if value.denominator != 1:
        raise ConfigError(f"{units} is not a whole number of ticks at time_scale {scale}")
    return int(value)


def _all_times(doc: Mapping) -> list[Fraction]:
    out = [to_fraction(doc.get("run_length", 0))]
    out += [to_fraction(s["duration"]) for s in doc["stages"].values()]
    for a in doc.get("arrivals", ()):
        out += [to_fraction(a[k]) for k in ("interval", "start", "until") if k in a]
        out += [to_fraction(t) for t in a.get("times", ())]
    cfg = doc.get("config", {})
    out += [to_fraction(cfg[k]) for k in _TIME_KEYS if k in cfg]
    out += [to_fraction(e["at"]) for e in doc.get("nm_events", ())]
    return out


def build_scenario(doc: Mapping, base_dir: Path | None = None) -> Scenario:
    validate_document(doc)
    times = _all_times(doc)
    scale = int(doc.get("time_scale") or time_scale_for(*times))
    ids: list[int] = []

    stages = {}
    for name, s in doc["stages"].items():
        try:
            stages[name] = SimTask(name, to_ticks(s["duration"], scale), float(s.get("gpu_demand", 1.0)),
                                   int(s.get("output_size", 64)), Mode(s.get("mode", "individual")))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        topology = Topology(stages, {int(a): tuple(v) for a, v in doc["apps"].items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    cfg = dict(DEFAULT_CONFIG)
    cfg.update(doc.get("config", {}))
    for key in _TIME_KEYS:
        cfg[key] = to_ticks(cfg[key], scale)
    if cfg["lock_timeout"] < 1:
        raise ConfigError("lock_timeout must be at least one tick")
    if cfg["window"] < 1 or cfg["report_interval"] < 1 or cfg["rebalance_interval"] < 1:
        raise ConfigError("window, report_interval and rebalance_interval must be positive")
    if cfg["heartbeat"] < 1 or cfg["client_poll_interval"] < 1:
        raise ConfigError("heartbeat and client_poll_interval must be positive")
    if cfg["slot_count"] & (cfg["slot_count"] - 1):
        raise ConfigError("slot_count must be a power of two")

    instances = []
    for inst in doc["instances"]:
        stage = inst.get("stage")
        if stage is not None and stage not in stages:
            raise ConfigError(f"instance {inst['id']} uses unknown stage {stage!r}")
        instances.append(InstanceSpec(inst["id"], stage, inst.get("workers", 1),
                                      inst.get("queue_cap", cfg["queue_cap"])))
        ids.append(inst["id"])
    proxies = list(doc.get("proxies", [1]))
    databases = list(doc.get("databases", []))
    ids += proxies + databases
    if len(set(ids)) != len(ids):
        raise ConfigError("proxy, instance and database ids must be distinct")
    if not proxies:
        raise ConfigError("at least one proxy is needed")

    arrivals = []
    for a in doc.get("arrivals", ()):
        if a["app"] not in topology.apps:
            raise ConfigError(f"arrival stream for unknown app {a['app']}")
        kind = a["kind"]
        if kind == "periodic" and to_fraction(a.get("interval", 0)) <= 0:
            raise ConfigError("periodic arrivals need a positive interval")
        if kind == "poisson" and "rate" not in a:
            raise ConfigError("poisson arrivals need a rate")
        if kind == "explicit" and "times" not in a:
            raise ConfigError("explicit arrivals need times")
        arrivals.append(ArrivalSpec(
            app=a["app"], kind=kind,
            interval=to_ticks(a.get("interval", 0), scale),
            start=to_ticks(a.get("start", 0), scale),
            until=to_ticks(a["until"], scale) if "until" in a else None,
            count=a.get("count"),
            rate=float(a.get("rate", 0.0)) / scale,
            times=tuple(to_ticks(t, scale) for t in a.get("times", ())),
        ))

    faults_doc = dict(doc.get("faults", {}))
    if "file" in faults_doc:
        path = Path(faults_doc.pop("file"))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        loaded = load_structured(path)
        loaded.update({k: v for k, v in faults_doc.items() if k != "scope"})
        faults_doc = {**loaded, "scope": faults_doc.get("scope", "all")}
    scope = faults_doc.pop("scope", "all")
    faults = FaultSchedule.from_dict(faults_doc) if faults_doc else FaultSchedule()
    if faults.step_trace is not None:
        raise ConfigError("step traces belong in replay case files, not scenarios")

    nm_events = []
    for e in doc.get("nm_events", ()):
        if ("crash" in e) == ("restart" in e):
            raise ConfigError("each nm_event needs exactly one of crash/restart")
        rid = e.get("crash", e.get("restart"))
        if not 1 <= rid <= cfg["nm_replicas"]:
            raise ConfigError(f"nm_event names replica {rid} of {cfg['nm_replicas']}")
        nm_events.append({"at": to_ticks(e["at"], scale), **{k: v for k, v in e.items() if k != "at"}})

    return Scenario(
        name=str(doc.get("name", "scenario")),
        seed=int(doc.get("seed", 0)),
        run_length=to_ticks(doc.get("run_length", 1000), scale),
        time_scale=scale,
        topology=topology,
        instances=instances,
        proxies=proxies,
        databases=databases,
        arrivals=arrivals,
        config=cfg,
        faults=faults,
        fault_scope=scope,
        nm_events=nm_events,
        document=json.loads(json.dumps(doc)),
    )


def load_scenario(path: str | Path, environ: Mapping[str, str] | None = None,
                  overrides: Mapping[str, Any] | None = None) -> Scenario:
    """Load, apply env and explicit overrides, validate and scale."""
    doc = apply_env(load_structured(path), environ)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in _TOP_ENV:
            doc[key] = value
        else:
            doc.setdefault("config", {})[key] = value
    return build_scenario(doc, Path(path).parent)
