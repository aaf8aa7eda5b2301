import csv
import io

from tpipes.cli import OK, USER_ERROR, VIOLATION, main
from tpipes.scenario import worst_case_text


def _run(*argv):
    out = io.StringIO()
    return main(list(argv), out), out.getvalue()


def test_check_reports_core0_utilization():
    code, text = _run("check", "pipeline1_async")
    assert code == OK
    assert "0.700000" in text and "schedulable" in text


def test_solve_prints_both_buffer_sizes_and_writes_csv(tmp_path):
    code, text = _run("solve", "pipeline1_fifo", "--out", str(tmp_path))
    assert code == OK
    assert "formula slots" in text and "reference slots" in text
    rows = list(csv.DictReader(open(tmp_path / "buffers.csv")))
    assert rows and all(int(r["formula_slots"]) >= 2 for r in rows)
    assert (tmp_path / "assignment.csv").exists()


def test_solve_best_effort_is_labelled(tmp_path):
    ini = tmp_path / "be.ini"
    ini.write_text("[functions]\nA = 100us, source-reader\nB = 100us, sink-writer\n"
                   "[pipeline p]\nspec = A | B\n")
    code, text = _run("solve", str(ini))
    assert code == OK and "none requested (best effort)" in text


def test_infeasible_solve_exits_2(tmp_path):
    ini = tmp_path / "tight.ini"
    ini.write_text("[functions]\nA = 900us, source-reader\nB = 900us, sink-writer\n"
                   "[pipeline p]\nspec = A | B [0, 1ms]\n")
    code, text = _run("solve", str(ini))
    assert code == VIOLATION and text.startswith("Infeasible")


def test_simulate_passes_and_reuses_assignment(tmp_path):
    code, _ = _run("solve", "pipeline2_async", "--out", str(tmp_path / "a"))
    assert code == OK
    code, text = _run("simulate", "pipeline2_async", "--horizon", "1", "--assignment",
                      str(tmp_path / "a"), "--out", str(tmp_path / "t"))
    assert code == OK, text
    assert "audit: PASS" in text
    for name in ("messages.csv", "events.csv", "metrics.csv", "latency_series.csv"):
        assert (tmp_path / "t" / name).exists()


def test_simulate_rejects_assignment_for_other_graph(tmp_path):
    _run("solve", "pipeline1_fifo", "--out", str(tmp_path))
    code, text = _run("simulate", "pipeline1_async", "--horizon", "0.1", "--assignment", str(tmp_path))
    assert code == USER_ERROR and "ConfigMismatch" in text


def test_simulate_worst_case_within_bound(tmp_path):
    ini = tmp_path / "wc.ini"
    ini.write_text(worst_case_text(5))
    code, text = _run("simulate", str(ini))
    assert code == OK, text


def test_sweep_writes_csv(tmp_path):
    code, text = _run("sweep", "pipeline2_async", "--horizon", "0.5", "--param", "seed",
                      "--values", "1,2", "--out", str(tmp_path))
    assert code == OK, text
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert {r["value"] for r in rows} == {"1", "2"}
    code, _ = _run("sweep", "pipeline2_async", "--param", "colour", "--values", "1")
    assert code == USER_ERROR
    code, _ = _run("sweep", "pipeline2_async", "--param", "alpha", "--range", "1:2:0")
    assert code == USER_ERROR


def test_stress_verbs():
    code, text = _run("stress", "fourslot", "--ops", "5000")
    assert code == OK and "0 violations" in text
    code, _ = _run("stress", "fifo", "--ops", "2000", "--producer-period-us", "0",
                   "--consumer-period-us", "0")
    assert code == OK
    code, _ = _run("stress", "fifo", "--ops", "50", "--capacity", "1", "--consumer-period-us", "2000",
                   "--timeout-ms", "0.5")
    assert code == VIOLATION


def test_user_errors_exit_1():
    assert _run("check", "no_such_scenario")[0] == USER_ERROR
    assert _run("frobnicate")[0] == USER_ERROR
    assert _run()[0] == USER_ERROR
