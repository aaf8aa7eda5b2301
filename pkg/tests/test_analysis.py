import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from tpipes.analysis import (
    PipeParams,
    TunedAssignment,
    check_conditions,
    e2e_delay_bound,
    edf_schedulable,
    edge_loss,
    graph_hash,
    max_loss_rate,
    min_throughput,
    rms_bound,
    rms_schedulable,
    schedulable,
    size_fifo_buffer,
    total_utilization,
    vcpus_by_pcpu,
)
from tpipes.model import VcpuKind, VcpuParams

from helpers import chain

TABLE_I_CORE0 = [Fraction(1, 10), Fraction(1, 5), Fraction(1, 20), Fraction(1, 20),
                 Fraction(1, 5), Fraction(1, 20), Fraction(1, 20)]


def _assign(g, periods, batches=None):
    batches = batches or [1] * len(periods)
    pipes = {}
    for p, T, m in zip(sorted(x.id for x in g.task_pipes), periods, batches):
        pipes[p] = PipeParams(m * g.pipes[p].function.wcet, T, m, g.pipes[p].pcpu, p)
    return TunedAssignment(pipes)


def test_delay_bound_is_sum_of_periods():
    g = chain([100, 200, 100])
    a = _assign(g, [2000, 4000, 4000])
    assert e2e_delay_bound(g, a) == {("F0", "F1", "F2"): 10_000}


def test_loss_examples():
    assert edge_loss(2000, 2500) == Fraction(1, 5)
    assert edge_loss(2500, 2000) == 0
    g = chain([100, 100, 100])
    assert max_loss_rate(g, _assign(g, [2000, 2500, 2500])) == pytest.approx(0.2)
    assert max_loss_rate(g, _assign(g, [4000, 2000, 1000])) == 0


def test_throughput_is_slowest_pipe():
    g = chain([100, 100], fifo=True, spec_tail=" [100/s, 10ms]")
    assert min_throughput(g, _assign(g, [2000, 4000], [1, 2])) == 500


@pytest.mark.parametrize("mp, tp, tc, slots", [(1, 2000, 4000, 3), (1, 3000, 3000, 2), (2, 1000, 2500, 8)])
def test_fifo_sizing_examples(mp, tp, tc, slots):
    assert size_fifo_buffer((mp, tp), (1, tc)) == slots


def test_rms_bound_values():
    assert rms_bound(1) == 1.0
    assert rms_bound(2) == pytest.approx(0.8284271247, abs=1e-9)
    assert rms_schedulable([Fraction(1, 2), Fraction(3, 10)])
    assert not rms_schedulable([Fraction(1, 2), Fraction(4, 10)])


def test_edf_boundary_and_table_core0():
    assert edf_schedulable([Fraction(1, 2), Fraction(1, 2)])
    assert not edf_schedulable([Fraction(101, 100)])
    assert total_utilization(TABLE_I_CORE0) == Fraction(7, 10)
    assert rms_schedulable(TABLE_I_CORE0)
    with pytest.raises(ValueError):
        schedulable(TABLE_I_CORE0, "fifo")


def test_shared_vcpus_counted_once():
    a = TunedAssignment({"x": PipeParams(10, 100, vcpu="dev", fixed=True),
                         "y": PipeParams(10, 100, vcpu="dev", fixed=True)})
    b = TunedAssignment({"z": PipeParams(10, 100, vcpu="dev", fixed=True)})
    per = vcpus_by_pcpu([a, b], [VcpuParams("bg", budget=1, period=10, pcpu=1)])
    assert [v.name for v in per[0]] == ["dev"] and [v.name for v in per[1]] == ["bg"]


def test_io_vcpu_utilization_is_u_io():
    a = TunedAssignment({"d": PipeParams(100, 1000, vcpu="bh", fixed=True, u_io=Fraction(1, 10))})
    (v,) = vcpus_by_pcpu([a])[0]
    assert v.kind is VcpuKind.IO and v.utilization == Fraction(1, 10)


def test_check_conditions_reports_each_failure():
    g = chain([100, 100], fifo=True, spec_tail=" [600/s, 3ms]")
    a = _assign(g, [2000, 2000])
    out = check_conditions(g, a, "edf")
    assert any(x.startswith("delay") for x in out)
    assert any(x.startswith("throughput") for x in out)
    assert any(x.startswith("buffer") for x in out)
    a = _assign(g, [1000, 1500])
    a.buffers = {("F0", "F1"): size_fifo_buffer((1, 1000), (1, 1500))}
    assert check_conditions(g, a, "edf") == []
    bad = _assign(g, [1000, 1500])
    bad.pipes["F1"] = PipeParams(100, 1500, 2)
    assert any(x.startswith("batch") for x in check_conditions(g, bad, "edf"))


def test_graph_hash_tracks_structure():
    a = chain([100, 200], spec_tail=" [0.1, 5ms]")
    assert graph_hash(a) == graph_hash(chain([100, 200], spec_tail=" [0.1, 5ms]"))
    assert graph_hash(a) != graph_hash(chain([100, 201], spec_tail=" [0.1, 5ms]"))
    assert graph_hash(a) != graph_hash(chain([100, 200], spec_tail=" [0.1, 6ms]"))


_periods = st.integers(1, 100_000)


@given(st.integers(1, 64))
def test_rms_bound_matches_direct_formula(n):
    assert abs(rms_bound(n) - n * (2 ** (1 / n) - 1)) < 1e-9
    assert math.log(2) <= rms_bound(n) + 1e-12 <= 1 + 1e-12


@given(st.lists(st.fractions(Fraction(0), Fraction(1)), max_size=20))
def test_rms_implies_edf(us):
    if rms_schedulable(us):
        assert edf_schedulable(us)


@given(st.integers(1, 8), _periods, _periods)
def test_sizing_formula(mp, tp, tc):
    slots = size_fifo_buffer((mp, tp), (1, tc))
    assert slots == mp * (math.ceil(tc / tp) + 1)
    assert slots >= 2 * mp


@settings(max_examples=200)
@given(st.lists(_periods, min_size=2, max_size=6))
def test_zero_loss_iff_consumers_not_slower(periods):
    g = chain([1] * len(periods))
    a = _assign(g, periods)
    lossless = all(c <= p for p, c in zip(periods, periods[1:]))
    assert (max_loss_rate(g, a) == 0) == lossless
    assert 0 <= max_loss_rate(g, a) < 1
