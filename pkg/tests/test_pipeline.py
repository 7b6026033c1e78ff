from fractions import Fraction
from math import ceil

import pytest
from hypothesis import given, strategies as st

from aigcflow.pipeline import (
    AdmissionState, Mode, StageSpec, Verdict, end_to_end_latency, fast_reject, max_accepted_in_window,
    required_instances, steady_output_interval, time_scale_for,
)


@pytest.mark.parametrize("t_x,t_y,k,m", [(4, 12, 1, 3), (4, 12, 2, 6), (5, 5, 1, 1), (4, 10, 3, 8)])
def test_required_instances(t_x, t_y, k, m):
    assert required_instances(t_x, t_y, k) == m


@pytest.mark.parametrize("t_x,k,interval", [(4, 1, 4), (4, 2, 2), (3, 2, Fraction(3, 2))])
def test_output_interval(t_x, k, interval):
    got = steady_output_interval(t_x, k)
    assert isinstance(got, Fraction) and got == interval


def test_latency():
    assert end_to_end_latency([4, 12]) == 16
    assert end_to_end_latency([4, 12], network=2) == 18


def test_bad_inputs():
    with pytest.raises(ValueError):
        required_instances(0, 1, 1)
    with pytest.raises(ValueError):
        required_instances(1, 2, 0)
    with pytest.raises(ValueError):
        StageSpec("x", 0)


def test_parallelism():
    assert StageSpec("x", 1, Mode.INDIVIDUAL, workers=3, instances=2).parallelism == 6
    assert StageSpec("x", 1, Mode.COLLABORATION, workers=3, instances=2).parallelism == 2


def test_time_scale():
    assert time_scale_for(4, Fraction(3, 2), Fraction(5, 6)) == 6
    assert time_scale_for(4, 12) == 1


@given(st.fractions(min_value=Fraction(1, 100), max_value=100), st.fractions(min_value=Fraction(1, 100), max_value=100),
       st.integers(1, 16))
def test_required_instances_is_minimal(t_x, t_y, k):
    # M slots of length T_Y must cover K slots of length T_X: M/T_Y >= K/T_X, and M-1 does not
    m = required_instances(t_x, t_y, k)
    assert Fraction(m) / t_y >= Fraction(k) / t_x
    assert Fraction(m - 1) / t_y < Fraction(k) / t_x


class BucketOracle:
    """Reference token bucket, piecewise-constant rate, written independently."""

    def __init__(self, rate):
        self.rate = Fraction(rate)
        self.level = Fraction(1)
        self.t = None

    def offer(self, now, rate=None):
        now = Fraction(now)
        if self.t is not None:
            self.level = min(Fraction(1), self.level + (now - self.t) * self.rate)
        self.t = now
        if rate is not None:
            self.rate = Fraction(rate)
        if self.level >= 1:
            self.level -= 1
            return True
        return False


def test_rate_limit_example():
    st_ = AdmissionState(t_x=4, k=1)
    verdicts = [fast_reject(st_, t) for t in range(5)]
    assert verdicts == [Verdict.ACCEPT, Verdict.REJECT, Verdict.REJECT, Verdict.REJECT, Verdict.ACCEPT]
    oracle = BucketOracle(Fraction(1, 4))
    assert [oracle.offer(t) for t in range(5)] == [v is Verdict.ACCEPT for v in verdicts]


def test_slow_arrivals_all_accepted():
    st_ = AdmissionState(t_x=4, k=1)
    assert all(fast_reject(st_, t) is Verdict.ACCEPT for t in range(0, 100, 5))


def test_k_change_halves_interval():
    st_ = AdmissionState(t_x=4, k=1)
    times = [Fraction(t, 2) for t in range(0, 81)]       # arrivals every half tick
    acc = []
    for t in times:
        k = 2 if t >= 20 else 1
        if fast_reject(st_, t, k=k) is Verdict.ACCEPT:
            acc.append(t)
    before = {b - a for a, b in zip(acc, acc[1:]) if b <= 20}
    after = {b - a for a, b in zip(acc, acc[1:]) if a >= 21}
    assert before == {4} and after == {2}


@given(st.integers(1, 8), st.integers(1, 20), st.lists(st.integers(0, 400), max_size=120),
       st.integers(0, 5), st.integers(0, 400))
def test_bucket_matches_oracle(k, t_x, arrivals, k2, switch):
    arrivals = sorted(arrivals)
    st_ = AdmissionState(t_x=t_x, k=k)
    oracle = BucketOracle(Fraction(k, t_x))
    for t in arrivals:
        kk = k2 if (k2 and t >= switch) else k
        got = fast_reject(st_, t, k=kk) is Verdict.ACCEPT
        assert got == oracle.offer(t, Fraction(kk, t_x))


@given(st.integers(1, 6), st.integers(1, 12), st.lists(st.fractions(min_value=0, max_value=200), max_size=150),
       st.integers(1, 60))
def test_window_bound(k, t_x, arrivals, window):
    st_ = AdmissionState(t_x=t_x, k=k)
    for t in sorted(arrivals):
        fast_reject(st_, t)
    acc = st_.accepted
    bound = max_accepted_in_window(window, k, t_x)
    assert bound == ceil(Fraction(window * k, t_x))
    for i, a in enumerate(acc):
        inside = sum(1 for b in acc[i:] if b < a + window)
        assert inside <= bound


def test_time_backwards_rejected():
    st_ = AdmissionState(t_x=4)
    fast_reject(st_, 10)
    with pytest.raises(ValueError):
        fast_reject(st_, 5)
