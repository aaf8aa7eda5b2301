"""Assignment files and the human-readable tables printed by the CLI."""
from __future__ import annotations

import csv
import os
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .analysis import (
    PipeParams,
    TunedAssignment,
    graph_hash,
    rms_schedulable,
    edf_schedulable,
    size_fifo_buffer,
    total_utilization,
    vcpus_by_pcpu,
)
from .metrics import Metrics, PathMetrics
from .model import Mode, PipelineGraph

ASSIGNMENT_CSV = "assignment.csv"
BUFFERS_CSV = "buffers.csv"

_PIPE_COLS = ["graph", "graph_hash", "pipe", "budget_us", "period_us", "batch", "pcpu",
              "vcpu", "fixed", "u_io", "feasible"]


def write_assignment(solved: Sequence[Tuple[PipelineGraph, TunedAssignment]], out_dir: str,
                     reference_buffers: Optional[Dict[str, Dict[Tuple[str, str], int]]] = None
                     ) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    reference_buffers = reference_buffers or {}
    pipes_path = os.path.join(out_dir, ASSIGNMENT_CSV)
    with open(pipes_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_PIPE_COLS)
        for g, a in solved:
            for pid in sorted(a.pipes):
                pp = a.pipes[pid]
                w.writerow([g.name, a.graph_hash or graph_hash(g), pid, pp.budget, pp.period,
                            pp.batch, pp.pcpu, pp.vcpu, int(pp.fixed),
                            "" if pp.u_io is None else str(pp.u_io), int(a.feasible)])
    buf_path = os.path.join(out_dir, BUFFERS_CSV)
    with open(buf_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["graph", "producer", "consumer", "slots", "formula_slots", "reference_slots"])
        for g, a in solved:
            for (p, c), slots in sorted(a.buffers.items()):
                pp, pc = a.pipes[p], a.pipes[c]
                formula = size_fifo_buffer((pp.batch, pp.period), (pc.batch, pc.period))
                ref = reference_buffers.get(g.name, {}).get((p, c))
                w.writerow([g.name, p, c, slots, formula, "" if ref is None else ref])
    return {ASSIGNMENT_CSV: pipes_path, BUFFERS_CSV: buf_path}


def read_assignment(path: str) -> Dict[str, TunedAssignment]:
    """Load assignments keyed by graph name from a directory or assignment.csv path."""
    if os.path.isdir(path):
        path = os.path.join(path, ASSIGNMENT_CSV)
    out: Dict[str, TunedAssignment] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            a = out.setdefault(r["graph"], TunedAssignment({}, graph_hash=r["graph_hash"]))
            a.feasible = r["feasible"] == "1"
            a.pipes[r["pipe"]] = PipeParams(
                int(r["budget_us"]), int(r["period_us"]), int(r["batch"]), int(r["pcpu"]),
                r["vcpu"], r["fixed"] == "1", Fraction(r["u_io"]) if r["u_io"] else None)
    buf_path = os.path.join(os.path.dirname(path), BUFFERS_CSV)
    if os.path.exists(buf_path):
        with open(buf_path, newline="") as fh:
            for r in csv.DictReader(fh):
                if r["graph"] in out:
                    out[r["graph"]].buffers[(r["producer"], r["consumer"])] = int(r["slots"])
    return out


def utilization_rows(assignments: Iterable[TunedAssignment], extra) -> List[Tuple[int, Fraction, int, bool, bool]]:
    rows = []
    for pcpu, vs in vcpus_by_pcpu(assignments, extra).items():
        rows.append((pcpu, total_utilization(vs), len(vs), rms_schedulable(vs), edf_schedulable(vs)))
    return rows


def format_table(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    rows = [[str(x) for x in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(out)


def _ms(us) -> str:
    return "-" if us is None else f"{us / 1000:.2f}"


def short_path(path: str) -> str:
    """Task pipes of a path, with the source/sink device names kept at the ends."""
    parts = path.split(">")
    dev = [p for p in parts if "." in p]
    tasks = [p for p in parts if "." not in p]
    if not dev:
        return ">".join(tasks)
    src = dev[0].split(".")[0]
    snk = dev[-1].split(".")[0]
    return f"{src}:{'>'.join(tasks)}:{snk}"


def verdicts(metrics: Metrics, graphs: Dict[str, PipelineGraph]) -> List[Tuple[PathMetrics, bool, str]]:
    """PASS/FAIL per path against its delay bound and its graph's loss budget."""
    out = []
    for pm in metrics.paths:
        g = graphs.get(pm.graph)
        reasons = []
        if pm.max_us is not None and pm.bound_us is not None and pm.max_us > pm.bound_us:
            reasons.append(f"max {pm.max_us}us > {pm.bound_us}us")
        if g is not None and pm.offered:
            if g.mode is Mode.FIFO:
                allowed = 0.0
            elif g.qos.best_effort:
                allowed = 1.0
            else:
                allowed = g.qos.loss_rate
            if pm.lost > allowed * pm.offered + 1:
                reasons.append(f"loss {pm.loss:.4f} > {allowed}")
        out.append((pm, not reasons, "; ".join(reasons)))
    return out


def latency_table(metrics: Metrics, graphs: Dict[str, PipelineGraph]) -> str:
    rows = []
    for pm, ok, why in verdicts(metrics, graphs):
        rows.append([pm.graph, short_path(pm.path), _ms(pm.bound_us), _ms(pm.min_us), _ms(pm.max_us),
                     _ms(pm.mean_us), _ms(pm.stddev_us), f"{100 * pm.loss:.2f}",
                     f"{pm.throughput:.2f}", pm.offered, "PASS" if ok else f"FAIL ({why})"])
    return format_table(["graph", "path", "bound(ms)", "min(ms)", "max(ms)", "avg(ms)", "std(ms)",
                         "loss(%)", "tput(msg/s)", "offered", "verdict"], rows)


def buffer_rows(solved, reference_buffers) -> List[List[object]]:
    rows = []
    for g, a in solved:
        for (p, c), slots in sorted(a.buffers.items()):
            if not (g.pipes[p].is_task and g.pipes[c].is_task):
                continue
            ref = reference_buffers.get(g.name, {}).get((p, c))
            rows.append([g.name, f"{p}>{c}", slots, "-" if ref is None else ref])
    return rows

