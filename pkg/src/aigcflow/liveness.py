"""Step-by-step replay of producer/consumer interleavings on the ring buffer.

A case is a list of labelled atomic actions such as ``Lock(X)``, ``GH(Y)``
or ``TL`` (lock timeout).  Each label is bound to the real
:class:`~aigcflow.ringbuf.Producer` step or to a consumer poll, registered
on the fabric and executed through :meth:`Fabric.run_until_quiescent`, so
the trace order is exactly the execution order.  After the trace the
consumer drains the ring and the outcome is compared with the case's
expectations.

The eight built-in cases ship as JSON files under ``aigcflow/cases``.
"""
from __future__ import annotations

import json
import re
import uuid
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .fabric import ConfigError, Fabric, FaultSchedule, LogRecord, run_now
from .message import WorkflowMessage, frame_entry
from .ringbuf import (
    Consumer,
    PollStatus,
    Producer,
    RingConfig,
    create_ring,
    read_slot,
    ring_state,
)

CONSUMER = "Z"
CONSUMER_NODE = 100
PRODUCER_ACTIONS = ("Lock", "Unlock", "WB", "WL", "GH", "UH")
CONSUMER_ACTIONS = ("RB", "RL")
_LABEL = re.compile(r"^(?P<action>[A-Za-z]+)\((?P<actor>[A-Za-z][A-Za-z0-9_]*)\)$")

REPLAY_CONFIG = RingConfig(buffer_size=4096, slot_count=16, lock_timeout=50)
DEFAULT_PAYLOAD = 36


@dataclass(frozen=True)
class LivenessCase:
    name: str
    trace: tuple[str, ...]
    payload_sizes: dict[str, int] = field(default_factory=dict)
    expect: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "LivenessCase":
        if "trace" not in d or not isinstance(d["trace"], list):
            raise ConfigError("case file needs a 'trace' list")
        unknown = set(d) - {"name", "trace", "payload_sizes", "expect"}
        if unknown:
            raise ConfigError(f"unknown case fields: {sorted(unknown)}")
        for label in d["trace"]:
            parse_label(label)
        return cls(
            name=str(d.get("name", "custom")),
            trace=tuple(d["trace"]),
            payload_sizes={str(k): int(v) for k, v in d.get("payload_sizes", {}).items()},
            expect=dict(d.get("expect", {})),
        )

    def to_dict(self) -> dict:
        return {"name": self.name, "trace": list(self.trace),
                "payload_sizes": dict(self.payload_sizes), "expect": dict(self.expect)}


def parse_label(label: str) -> tuple[str, str | None]:
    if label == "TL":
        return "TL", None
    m = _LABEL.match(label)
    if not m:
        raise ConfigError(f"malformed action label {label!r}")
    action, actor = m.group("action"), m.group("actor")
    if actor == CONSUMER:
        if action not in CONSUMER_ACTIONS:
            raise ConfigError(f"consumer {CONSUMER} cannot perform {action}")
    elif action not in PRODUCER_ACTIONS:
        raise ConfigError(f"unknown producer action {action!r} in {label!r}")
    return action, actor


def builtin_case(case_id: int | str) -> LivenessCase:
    name = f"case{case_id}" if isinstance(case_id, int) or str(case_id).isdigit() else str(case_id)
    try:
        text = resources.files("aigcflow.cases").joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"no built-in liveness case {name!r}") from exc
    return LivenessCase.from_dict(json.loads(text))


def load_case(ref: str | Path) -> LivenessCase:
    """A built-in case (``7``, ``case7``) or a JSON/YAML case file."""
    ref = str(ref)
    if ref.isdigit() or re.fullmatch(r"case\d+", ref):
        return builtin_case(ref if not ref.isdigit() else int(ref))
    from .scenario import load_structured

    return LivenessCase.from_dict(load_structured(ref))


def actor_message(actor: str, payload_size: int) -> WorkflowMessage:
    uid = uuid.uuid5(uuid.NAMESPACE_OID, f"liveness-producer-{actor}")
    fill = actor.encode()[:1] or b"?"
    return WorkflowMessage(uid, 0, 1, 0, fill * payload_size)


@dataclass
class Verdict:
    case: str
    passed: bool
    steps: list[tuple[str, str]]
    reads: list[str]
    tail: tuple[int, int]
    head: tuple[int, int]
    lock_owner: str | None
    mismatches: list[str]
    log: list[LogRecord] = field(repr=False, default_factory=list)

    @property
    def summary(self) -> str:
        valid = [r for r in self.reads if not r.startswith("corrupt")]
        skipped = [r for r in self.reads if r.startswith("corrupt")]
        noun = "entry" if len(valid) == 1 else "entries"
        text = f"consumer read {len(valid)} {noun}"
        if valid:
            text += f" ({' then '.join(valid)})"
        if skipped:
            sizes = ", ".join(r.split(":", 1)[1] + " bytes" for r in skipped)
            text += f"; skipped {len(skipped)} corrupt ({sizes})"
        return text

    def render(self) -> str:
        lines = [f"replay {self.case}"]
        for label, outcome in self.steps:
            lines.append(f"  {label:<12} {outcome}")
        lines.append(f"  tail=(P_b={self.tail[0]}, P_size={self.tail[1]}) "
                     f"head=(H_b={self.head[0]}, H_size={self.head[1]}) lock={self.lock_owner or 'free'}")
        lines.append(f"  {self.summary}")
        for m in self.mismatches:
            lines.append(f"  MISMATCH {m}")
        lines.append("PASS" if self.passed else "FAIL")
        return "\n".join(lines)


def _fmt(outcome: Any) -> str:
    if outcome is None:
        return "ok"
    if isinstance(outcome, bool):
        return "true" if outcome else "false"
    return getattr(outcome, "value", str(outcome))


def replay(case: LivenessCase, config: RingConfig = REPLAY_CONFIG) -> Verdict:
    fabric = Fabric(latency=0)
    ring = create_ring(fabric, CONSUMER_NODE, config)
    consumer = Consumer(fabric, ring)
    actors = sorted({a for _, a in map(parse_label, case.trace) if a and a != CONSUMER})
    producers: dict[str, Producer] = {}
    by_uid: dict[uuid.UUID, str] = {}
    for node, actor in enumerate(actors, start=1):
        p = Producer(fabric, ring, node, config, name=actor)
        msg = actor_message(actor, case.payload_sizes.get(actor, DEFAULT_PAYLOAD))
        p.prepare(frame_entry(msg))
        producers[actor] = p
        by_uid[msg.uid] = actor

    steps: list[tuple[str, str]] = []
    reads: list[str] = []

    def record_poll(res) -> str:
        if res.status is PollStatus.ENTRY:
            who = by_uid.get(res.message.uid, "?")
            reads.append(who)
            return f"read {who}"
        if res.status is PollStatus.CORRUPT:
            reads.append(f"corrupt:{res.size}")
            return f"skipped corrupt {res.size} bytes"
        return "empty"

    def bind(label: str):
        action, actor = parse_label(label)
        if action == "TL":
            def fire():
                fabric.sched.run(until=fabric.now + config.lock_timeout + 1)
                steps.append((label, f"clock -> {fabric.now}"))
        elif actor == CONSUMER:
            def fire():
                if action == "RB":
                    steps.append((label, record_poll(consumer.poll())))
                else:
                    st = ring_state(fabric, ring)
                    slot = read_slot(fabric, ring, st.head_seq)
                    steps.append((label, f"busy={int(slot.busy)} size={slot.size}"))
        else:
            producer = producers[actor]

            def fire():
                steps.append((label, _fmt(run_now(producer.step(action)))))
        return fire

    for label in set(case.trace):
        fabric.register_action(label, bind(label))
    log = fabric.run_until_quiescent(FaultSchedule(step_trace=case.trace))
    while True:
        res = consumer.poll()
        if not res:
            break
        steps.append(("drain(Z)", record_poll(res)))

    st = ring_state(fabric, ring)
    tail = (st.tail_b, st.tail_slot)
    head = (st.head_b, st.head_slot)
    owner = next((a for a, p in producers.items() if p.node == st.lock_owner), None) if st.locked else None
    mismatches = _compare(case, steps, reads, tail, head)
    return Verdict(case.name, not mismatches, steps, reads, tail, head, owner, mismatches, log)


def _compare(case: LivenessCase, steps, reads, tail, head) -> list[str]:
    exp = case.expect
    out: list[str] = []
    want_steps = exp.get("steps", {})
    seen: dict[str, int] = {}
    for label, outcome in steps:
        seen[label] = seen.get(label, 0) + 1
        want = want_steps.get(label)
        if want is not None and seen[label] == 1 and outcome != _fmt(want):
            out.append(f"first differing action {label}: expected {_fmt(want)}, got {outcome}")
            break
    if "reads" in exp and list(exp["reads"]) != reads:
        out.append(f"reads: expected {list(exp['reads'])}, got {reads}")
    if "tail" in exp and tuple(exp["tail"]) != tail:
        out.append(f"tail: expected {tuple(exp['tail'])}, got {tail}")
    if "head" in exp and tuple(exp["head"]) != head:
        out.append(f"head: expected {tuple(exp['head'])}, got {head}")
    return out


def replay_liveness_case(case_id: int | str, **overrides: Any) -> Verdict:
    """Replay built-in case ``case_id`` (1-8).

    ``payload_sizes`` may be overridden, in which case the built-in
    expectations no longer apply and only the replay itself is returned.
    """
    case = builtin_case(case_id)
    if "payload_sizes" in overrides:
        case = LivenessCase(case.name, case.trace, dict(overrides.pop("payload_sizes")),
                            overrides.pop("expect", {}))
    if overrides:
        raise TypeError(f"unexpected overrides {sorted(overrides)}")
    return replay(case)
