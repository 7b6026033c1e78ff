"""Pipeline sizing and proxy-side admission control.

Two stages X and Y with execution times ``T_X < T_Y``: if X runs ``K``
requests in parallel, Y needs ``M = ceil(K*T_Y/T_X)`` parallel slots for
both stages to emit one result every ``T_X/K`` ticks.  The proxy keeps the
input at that rate with a token bucket (rate ``K/T_X``, burst 1).

All rates and intervals are :class:`fractions.Fraction`; nothing here
rounds through floating point.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from math import ceil, lcm
from typing import Iterable, Union

Number = Union[int, Fraction]


class Mode(str, Enum):
    INDIVIDUAL = "individual"
    COLLABORATION = "collaboration"


@dataclass(frozen=True)
class StageSpec:
    stage_id: str
    exec_time: Number
    mode: Mode = Mode.INDIVIDUAL
    workers: int = 1
    instances: int = 1

    def __post_init__(self) -> None:
        if self.exec_time <= 0:
            raise ValueError(f"stage {self.stage_id}: exec_time must be positive")
        if self.workers < 1 or self.instances < 1:
            raise ValueError(f"stage {self.stage_id}: workers and instances must be >= 1")

    @property
    def parallelism(self) -> int:
        """Requests in flight at once: every worker in IM, one per instance in CM."""
        per_instance = self.workers if self.mode is Mode.INDIVIDUAL else 1
        return per_instance * self.instances


def _check_times(t_x: Number, t_y: Number | None = None, k: int = 1) -> None:
    if t_x <= 0 or (t_y is not None and t_y <= 0):
        raise ValueError("execution times must be positive")
    if k < 1:
        raise ValueError("K must be at least 1")


def required_instances(t_x: Number, t_y: Number, k: int) -> int:
    """``ceil(K * T_Y / T_X)`` parallel slots for stage Y."""
    _check_times(t_x, t_y, k)
    return ceil(Fraction(k) * Fraction(t_y) / Fraction(t_x))


def steady_output_interval(t_x: Number, k: int) -> Fraction:
    """Ticks between consecutive outputs once the pipeline is full."""
    _check_times(t_x, None, k)
    return Fraction(t_x) / k


def end_to_end_latency(stage_times: Iterable[Number], network: Number = 0) -> Fraction:
    """Sum of stage execution times plus measured transfer time."""
    total = Fraction(network)
    for t in stage_times:
        total += Fraction(t)
    return total


def time_scale_for(*values: Number) -> int:
    """Smallest integer that makes every value a whole number of ticks."""
    scale = 1
    for v in values:
        scale = lcm(scale, Fraction(v).denominator)
    return scale


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"


@dataclass
class AdmissionState:
    """Token bucket with rate ``K/T_X`` per tick and capacity one request.

    The bucket starts full.  ``K`` can change at any time through
    :meth:`set_rate`; tokens accrued so far are kept.
    """

    t_x: Number
    k: int = 1
    tokens: Fraction = Fraction(1)
    last: Fraction | None = None
    accepted: list[Fraction] = field(default_factory=list)
    rejected: int = 0

    def __post_init__(self) -> None:
        _check_times(self.t_x, None, self.k)

    @property
    def rate(self) -> Fraction:
        return Fraction(self.k) / Fraction(self.t_x)

    def _refill(self, now: Fraction) -> None:
        if self.last is not None:
            if now < self.last:
                raise ValueError(f"admission time went backwards ({now} < {self.last})")
            self.tokens = min(Fraction(1), self.tokens + (now - self.last) * self.rate)
        self.last = now

    def set_rate(self, k: int, now: Number, t_x: Number | None = None) -> None:
        self._refill(Fraction(now))
        if t_x is not None:
            self.t_x = t_x
        _check_times(self.t_x, None, k)
        self.k = k


def fast_reject(state: AdmissionState, now: Number, k: int | None = None) -> Verdict:
    """Admit a request arriving at ``now`` iff the bucket holds a whole token.

    ``k`` is the current worker count of the entrance stage as reported by
    the node manager; passing it re-reads the limit before deciding.
    """
    now = Fraction(now)
    if k is not None and k != state.k:
        state.set_rate(k, now)
    else:
        state._refill(now)
    if state.tokens >= 1:
        state.tokens -= 1
        state.accepted.append(now)
        return Verdict.ACCEPT
    state.rejected += 1
    return Verdict.REJECT


def max_accepted_in_window(window: Number, k: int, t_x: Number) -> int:
    """Upper bound on admissions in any half-open window of ``window`` ticks."""
    return ceil(Fraction(window) * k / Fraction(t_x))
