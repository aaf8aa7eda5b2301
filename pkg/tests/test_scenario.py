import pytest

from tpipes.analysis import check_conditions, vcpus_by_pcpu
from tpipes.model import VcpuKind
from tpipes.scenario import ScenarioError, load, loads, parse_duration, shipped, worst_case_text


@pytest.mark.parametrize("text, us", [("250", 250), ("250us", 250), ("2ms", 2000), ("1.5ms", 1500),
                                      ("30s", 30_000_000), (" 3 ms ", 3000)])
def test_parse_duration(text, us):
    assert parse_duration(text) == us


@pytest.mark.parametrize("text", ["", "ms", "-1ms", "1.5us", "2 min", "1e3"])
def test_parse_duration_rejects(text):
    with pytest.raises(ScenarioError):
        parse_duration(text)


@pytest.mark.parametrize("name", shipped())
def test_shipped_scenarios_solve_to_their_bounds(name):
    sc = load(name)
    solved = sc.solve()
    for i, (g, a) in enumerate(solved):
        assert a.feasible
        others = [x for _, x in solved[:i]]
        assert check_conditions(g, a, sc.scheduler, extra=sc.background, others=others) == []


def test_table_platform_vcpus():
    sc = load("pipeline1_async")
    io = sc.vcpus["USB_BH"]
    assert io.kind is VcpuKind.IO and io.serves == "mhydra_rx"
    assert len([v for v in sc.background if v.pcpu == 1]) == 11
    per = vcpus_by_pcpu([a for _, a in sc.solve()], sc.background)
    assert float(sum(v.utilization for v in per[0])) == pytest.approx(0.70, abs=1e-12)


def test_unknown_scenario_and_sections_are_rejected(tmp_path):
    with pytest.raises(ScenarioError, match="no shipped scenario"):
        load("nope")
    with pytest.raises(ScenarioError, match="unknown section"):
        loads("[mystery]\nx = 1\n")
    with pytest.raises(ScenarioError, match=r"\[vcpu a\]"):
        loads("[vcpu a]\nperiod = 1ms\n")
    with pytest.raises(ScenarioError):
        loads("[scenario\n")
    bad = tmp_path / "bad.ini"
    bad.write_text("[functions]\nA = 10us\n[pipeline p]\nspec = A | Q\n")
    with pytest.raises(Exception):
        load(str(bad)).graphs()


def test_offsets_and_ranks_reach_the_platform():
    sc = loads("[offsets]\nF1 = 1500us\n[ranks]\nF0 = 2\n")
    p = sc.platform()
    assert p.offsets == {"F1": 1500} and p.ranks == {"F0": 2}


def test_device_chain_needs_vcpu():
    text = ("[functions]\nA = 10us, source-reader\nrx = 5us\n"
            "[pipeline p]\nspec = A\nsource = A < DEV: rx\n")
    with pytest.raises(ScenarioError, match="no \\[vcpu rx\\]"):
        loads(text).graphs()


@pytest.mark.parametrize("T", [5, 10, 50])
def test_worst_case_delay_is_2T_minus_1(T):
    t = loads(worst_case_text(T)).simulate()
    (msg,) = t.messages
    assert msg.latency == (2 * T - 1) * 1000


def test_worst_case_needs_three_tasks():
    with pytest.raises(ValueError):
        worst_case_text(2)
