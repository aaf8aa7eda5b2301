"""Acceptance criteria 1-9, each at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run.
"""
import filecmp
from fractions import Fraction
import random
import time

import pytest

from tpipes.analysis import (
    EDF,
    PipeParams,
    TunedAssignment,
    check_conditions,
    e2e_delay_bound,
    edf_schedulable,
    max_loss_rate,
    rms_bound,
    size_fifo_buffer,
    vcpus_by_pcpu,
)
from tpipes.comm import enumerate_fourslot, fourslot_stress
from tpipes.metrics import audit_trace, collect_metrics
from tpipes.scenario import load, loads, shipped, worst_case_text
from tpipes.sim import ArrivalSpec, Platform, run
from tpipes.solver import Infeasible, NonConvergent, solve

from helpers import chain, grid_feasible, random_instance

THIRTY_S = 30_000_000
BOUNDS_MS = {"p1": 10, "p2": 8}
LOSS_BOUNDS_MS = {"p1": 11, "p2": 8.5}


@pytest.mark.criterion(1, "delay bounds 10 ms / 8 ms over 30 s, zero loss, <= 10 s wall clock")
@pytest.mark.parametrize("name", ["pipeline1_async", "pipeline2_async"])
def test_c1_delay_bounds(name):
    t0 = time.perf_counter()
    sc = load(name)
    solved = sc.solve()
    trace = sc.simulate(solved=solved, horizon=THIRTY_S)
    elapsed = time.perf_counter() - t0
    for g, a in solved:
        assert set(e2e_delay_bound(g, a).values()) == {BOUNDS_MS[g.name] * 1000}
    m = collect_metrics(trace)
    assert m.paths
    for p in m.paths:
        assert p.bound_us == BOUNDS_MS[p.graph] * 1000
        assert p.offered > 0 and p.lost == 0
        assert p.max_us <= p.bound_us
        assert 0 < p.mean_us <= p.bound_us
    assert m.aggregate.lost == 0
    assert audit_trace(trace).ok
    assert elapsed <= 10.0, f"{elapsed:.2f}s"


@pytest.mark.criterion(2, "20% loss configs: max_loss_rate 0.20, loss <= 20% + 1, 11 ms / 8.5 ms")
@pytest.mark.parametrize("name", ["pipeline1_async_loss20", "pipeline2_async_loss20"])
def test_c2_loss_bounds(name):
    sc = load(name)
    solved = sc.solve()
    for g, a in solved:
        assert max_loss_rate(g, a) == 0.2
    trace = sc.simulate(solved=solved, horizon=THIRTY_S)
    m = collect_metrics(trace)
    for p in m.paths:
        assert p.offered >= 3000
        assert p.lost <= 0.2 * p.offered + 1
        assert p.max_us <= LOSS_BOUNDS_MS[p.graph] * 1000
    assert audit_trace(trace).ok


@pytest.mark.criterion(3, "worst-case construction gives exactly 2T-1 units")
@pytest.mark.parametrize("T", [5, 10, 50])
def test_c3_worst_case(T):
    unit = 1000
    trace = loads(worst_case_text(T, unit)).simulate()
    (msg,) = trace.messages
    assert msg.latency == (2 * T - 1) * unit


@pytest.mark.criterion(4, "RMS bound to 1e-9, EDF accepts exactly 1.0, Core-0 = 0.70")
def test_c4_schedulability_formulas():
    for n in range(1, 65):
        assert abs(rms_bound(n) - n * (2 ** (1 / n) - 1)) <= 1e-9
    assert edf_schedulable([Fraction(1, 3), Fraction(2, 3)])
    assert edf_schedulable([Fraction(1)])
    assert not edf_schedulable([Fraction(1), Fraction(1, 10 ** 9)])
    sc = load("pipeline1_async")
    per = vcpus_by_pcpu([a for _, a in sc.solve()], sc.background)
    core0 = sum(v.utilization for v in per[0])
    assert abs(float(core0) - 0.70) <= 1e-12


def _fifo_pair(rng):
    tp = rng.choice([1000, 2000, 2500, 4000, 5000])
    k, mp = rng.randint(1, 4), rng.randint(1, 3)
    tc, mc = k * tp, k * mp
    wp = rng.randint(10, max(10, tp // (4 * mp)))
    wc = rng.randint(10, max(10, tc // (4 * mc)))
    return tp, tc, mp, mc, wp, wc, rng.randrange(0, tc + tp)


def _fifo_blocks(pair, slack):
    tp, tc, mp, mc, wp, wc, lag = pair
    g = chain([wp, wc], fifo=True, spec_tail=" [1/s, 1s]", pcpus=[0, 1])
    cap = size_fifo_buffer((mp, tp), (mc, tc)) + slack
    a = TunedAssignment({"F0": PipeParams(mp * wp, tp, mp, 0, "F0"),
                         "F1": PipeParams(mc * wc, tc, mc, 1, "F1")},
                        buffers={("F0", "F1"): cap})
    t = run((g, a), Platform(offsets={"F1": lag}), {"F0": ArrivalSpec(saturate=True)},
            horizon=20 * (tc + tp), seed=1)
    return sum(1 for e in t.events if e.kind == "block")


@pytest.mark.criterion(5, "200 rate-matched FIFO pairs: formula never blocks, one slot less does")
def test_c5_fifo_sizing():
    rng = random.Random(5)
    pairs = [_fifo_pair(rng) for _ in range(200)]
    assert [p for p in pairs if _fifo_blocks(p, 0)] == []
    assert any(_fifo_blocks(p, -1) for p in pairs)


@pytest.mark.criterion(6, "solver sound on 500 instances, agrees with grid search on 200, <= 60 s")
def test_c6_solver_soundness_and_oracle():
    t0 = time.perf_counter()
    rng = random.Random(2026)
    feasible = 0
    for _ in range(500):
        g, sched = random_instance(rng)
        assert len(g.pipes) <= 8
        try:
            a = solve(g, scheduler=sched)
        except (Infeasible, NonConvergent):
            continue
        feasible += 1
        assert check_conditions(g, a, sched) == [], g.name
    assert feasible > 0
    verdicts = set()
    for _ in range(200):
        wcets = [rng.choice([100, 200, 300, 500, 900]) for _ in range(rng.randint(2, 3))]
        pcpus = [rng.randint(0, 1) for _ in wcets]
        delay = rng.choice([1000, 2000, 3000, 5000, 8000])
        tput = rng.choice([50, 100, 125, 250, 500, 1000])
        sched = rng.choice([EDF, "rms"])
        g = chain(wcets, fifo=True, spec_tail=f" [{tput}/s, {delay}us]", pcpus=pcpus)
        try:
            solve(g, scheduler=sched, period_quantum=100)
            ours = True
        except (Infeasible, NonConvergent):
            ours = False
        expected = grid_feasible(wcets, pcpus, delay, tput, sched, 100)
        assert ours == expected, (wcets, pcpus, delay, tput, sched)
        verdicts.add(ours)
    assert verdicts == {True, False}
    assert time.perf_counter() - t0 <= 60.0


@pytest.mark.criterion(7, "four-slot: 10^6-op stress and exhaustive 2x2 interleavings clean, <= 30 s")
def test_c7_fourslot():
    t0 = time.perf_counter()
    rep = fourslot_stress(10 ** 6, seed=7)
    assert rep.writes + rep.reads == 10 ** 6
    assert rep.integrity_failures == 0 and rep.freshness_failures == 0
    enum = enumerate_fourslot(2, 2)
    assert enum.reads_checked > 0 and enum.violations == []
    assert time.perf_counter() - t0 <= 30.0


@pytest.mark.criterion(8, "MIMO: bounds 10 ms / 8 ms with 4 ms of device pipes, zero loss, tput within 1")
def test_c8_mimo():
    sc = load("mimo")
    solved = sc.solve()
    (g, a), = solved
    rates = {"CAN4": 100, "CAN5": 125}
    for path, bound in e2e_delay_bound(g, a).items():
        src = path[0].split(".")[0]
        assert bound == {"CAN4": 10_000, "CAN5": 8_000}[src]
        assert sum(a.period_of(p) for p in path if not g.pipes[p].is_task) == 4000
    trace = sc.simulate(solved=solved, horizon=THIRTY_S)
    m = collect_metrics(trace)
    assert len(m.paths) == 4
    for p in m.paths:
        src = p.path.split(".")[0]
        assert p.lost == 0 and p.max_us <= p.bound_us
        assert abs(p.throughput - rates[src]) <= 1
    assert audit_trace(trace).ok


@pytest.mark.criterion(9, "same seed gives byte-identical trace CSVs")
@pytest.mark.parametrize("name", shipped())
def test_c9_determinism(name, tmp_path):
    for run_dir in ("a", "b"):
        sc = load(name)
        trace = sc.simulate(horizon=min(sc.horizon, 2_000_000))
        trace.write(tmp_path / run_dir)
        collect_metrics(trace).write(tmp_path / run_dir)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert mismatch == [] and errors == [] and len(match) == len(names) >= 5
