"""Latency/loss/throughput summaries and an independent audit of a trace.

Both functions read only the TraceLog, so they give the same answer on a
trace reloaded from its CSV files.
"""
from __future__ import annotations

import csv
import math
import os
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .trace import TraceLog

ALL = "*"


@dataclass
class PathMetrics:
    graph: str
    path: str
    offered: int = 0
    delivered: int = 0
    lost: int = 0
    min_us: Optional[int] = None
    max_us: Optional[int] = None
    mean_us: Optional[float] = None
    stddev_us: Optional[float] = None
    throughput: float = 0.0          # delivered per second of horizon
    tput_min: Optional[int] = None   # per whole second of horizon
    tput_max: Optional[int] = None
    tput_stddev: Optional[float] = None
    bound_us: Optional[int] = None

    @property
    def loss(self) -> float:
        return self.lost / self.offered if self.offered else 0.0

    @property
    def defined(self) -> bool:
        return self.delivered > 0


@dataclass
class Metrics:
    paths: List[PathMetrics] = field(default_factory=list)
    aggregate: PathMetrics = field(default_factory=lambda: PathMetrics(ALL, ALL))
    series: Dict[str, List[Tuple[int, int, int]]] = field(default_factory=dict)

    def by_path(self, path: str) -> PathMetrics:
        for p in self.paths:
            if p.path == path:
                return p
        raise KeyError(path)

    def write(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {}
        path = os.path.join(out_dir, "metrics.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["graph", "path", "offered", "delivered", "lost", "loss", "min_us", "max_us",
                        "mean_us", "stddev_us", "throughput", "tput_min", "tput_max",
                        "tput_stddev", "bound_us"])
            for m in [*self.paths, self.aggregate]:
                w.writerow([m.graph, m.path, m.offered, m.delivered, m.lost, f"{m.loss:.6f}",
                            _fmt(m.min_us), _fmt(m.max_us), _fmt(m.mean_us), _fmt(m.stddev_us),
                            f"{m.throughput:.3f}", _fmt(m.tput_min), _fmt(m.tput_max),
                            _fmt(m.tput_stddev), _fmt(m.bound_us)])
        files["metrics.csv"] = path
        path = os.path.join(out_dir, "latency_series.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "index", "msg_id", "latency_us"])
            for key in sorted(self.series):
                for i, (mid, _, lat) in enumerate(self.series[key]):
                    w.writerow([key, i, mid, lat])
        files["latency_series.csv"] = path
        return files


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.3f}"
    return str(x)


def _fill(m: PathMetrics, latencies: List[int], exits: List[int], horizon: int) -> None:
    m.delivered = len(latencies)
    m.offered = m.delivered + m.lost
    if latencies:
        m.min_us, m.max_us = min(latencies), max(latencies)
        m.mean_us = statistics.fmean(latencies)
        m.stddev_us = statistics.pstdev(latencies)
    seconds = horizon // 1_000_000
    if horizon > 0:
        m.throughput = sum(1 for t in exits if t < horizon) * 1_000_000 / horizon
    if seconds:
        counts = [0] * seconds
        for t in exits:
            s = t // 1_000_000
            if s < seconds:
                counts[s] += 1
        m.tput_min, m.tput_max = min(counts), max(counts)
        m.tput_stddev = statistics.pstdev(counts)


def collect_metrics(trace: TraceLog) -> Metrics:
    """Per-path and aggregate latency, loss and throughput.

    A message offered to a path is either delivered along it or lost at one
    of its pipes; in-flight copies at the end of the trace are not counted.
    """
    out = Metrics()
    horizon = trace.horizon
    rows = {">".join(p.path): p for p in trace.paths}
    # every prefix of a path maps to the paths that extend it
    by_prefix: Dict[Tuple[str, ...], List[str]] = defaultdict(list)
    for key, p in rows.items():
        for i in range(1, len(p.path) + 1):
            by_prefix[p.path[:i]].append(key)

    lat: Dict[str, List[int]] = defaultdict(list)
    exits: Dict[str, List[int]] = defaultdict(list)
    lost: Dict[str, int] = defaultdict(int)
    series: Dict[str, List[Tuple[int, int, int]]] = defaultdict(list)
    agg_lat, agg_exit, agg_lost = [], [], 0
    for m in trace.messages:
        route = m.route
        if m.t_exit is not None:
            key = ">".join(route)
            lat[key].append(m.t_exit - m.t_arrival)
            exits[key].append(m.t_exit)
            series[key].append((m.msg_id, m.t_arrival, m.t_exit - m.t_arrival))
            agg_lat.append(m.t_exit - m.t_arrival)
            agg_exit.append(m.t_exit)
        else:
            agg_lost += 1
            for key in by_prefix.get(route, ()):
                lost[key] += 1

    for key, p in rows.items():
        pm = PathMetrics(p.graph, key, lost=lost[key], bound_us=p.bound)
        _fill(pm, lat[key], exits[key], horizon)
        out.paths.append(pm)
    out.aggregate.lost = agg_lost
    _fill(out.aggregate, agg_lat, agg_exit, horizon)
    for key in series:
        series[key].sort(key=lambda r: (r[1], r[0]))
    out.series = dict(series)
    return out


@dataclass
class AuditReport:
    violations: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _intervals(trace: TraceLog) -> Dict[str, List[Tuple[int, int]]]:
    runs: Dict[str, List[Tuple[int, int]]] = defaultdict(list)
    open_at: Dict[str, int] = {}
    for e in trace.events:
        if e.kind == "dispatch":
            open_at[e.vcpu] = e.time
        elif e.kind == "stop" and e.vcpu in open_at:
            start = open_at.pop(e.vcpu)
            if e.time > start:
                runs[e.vcpu].append((start, e.time))
    return runs


def _max_window(runs: Sequence[Tuple[int, int]], length: int) -> Tuple[int, int]:
    """Largest execution inside any window of ``length``; returns (amount, start).

    The maximum is attained by a window starting at some interval start.
    """
    best, at = 0, 0
    n = len(runs)
    for i in range(n):
        s = runs[i][0]
        end = s + length
        total, j = 0, i
        while j < n and runs[j][0] < end:
            total += min(runs[j][1], end) - runs[j][0]
            j += 1
        if total > best:
            best, at = total, s
    return best, at


def _used_after(runs: Sequence[Tuple[int, int]], starts: Sequence[int], length: int) -> List[int]:
    """Execution inside [t, t + length) for each t in ``starts`` (both sorted)."""
    out, j, n = [], 0, len(runs)
    for t in starts:
        while j < n and runs[j][1] <= t:
            j += 1
        total, k = 0, j
        while k < n and runs[k][0] < t + length:
            total += max(0, min(runs[k][1], t + length) - max(runs[k][0], t))
            k += 1
        out.append(total)
    return out


def audit_trace(trace: TraceLog, assignment=None, scheduler: Optional[str] = None) -> AuditReport:
    """Check a trace against the reservation and delay rules it should obey.

    (a) no Main VCPU runs more than C in any window of length T;
    (b) each IO VCPU activation uses at most U_IO x T in the following T;
    (c) every dispatch picks the highest-priority ready VCPU;
    (d) delivered latency stays within the sum of periods on feasible paths.

    ``assignment`` is accepted for symmetry with the solver output; the
    feasibility flags recorded in the trace are used when it is omitted.
    """
    rep = AuditReport()
    scheduler = scheduler or trace.meta.get("scheduler", "edf")
    vcpus = {v.name: v for v in trace.vcpus}
    runs = _intervals(trace)
    activations: Dict[str, List[int]] = defaultdict(list)
    for e in trace.events:
        if e.kind == "activate":
            activations[e.vcpu].append(e.time)

    for name, v in vcpus.items():
        rs = runs.get(name, [])
        if v.kind in ("main", "background"):
            used, at = _max_window(rs, v.period)
            if used > v.budget:
                rep.violations.append(f"(a) {name}: ran {used}us in window [{at}, {at + v.period}) > C={v.budget}")
    for name, v in vcpus.items():
        if v.kind != "io":
            continue
        full = math.floor(v.u_io * v.period)
        acts = activations.get(name, [])
        rs = runs.get(name, [])
        for k, (t, used) in enumerate(zip(acts, _used_after(rs, acts, v.period))):
            if k and t < acts[k - 1] + v.period:
                rep.violations.append(f"(b) {name}: re-activated at {t} before replenishment")
            if used > full:
                rep.violations.append(f"(b) {name}: used {used}us after activation at {t} > {full}")
        if rs:
            total = sum(b - a for a, b in rs)
            span = rs[-1][1] - rs[0][0]
            cap = v.u_io * (span + v.period)
            if total > cap:
                rep.violations.append(f"(b) {name}: {total}us over {span}us exceeds U_IO={v.u_io}")

    for e in trace.events:
        if e.kind != "dispatch" or not e.detail:
            continue
        cands = []
        for item in e.detail.split():
            name, _, key = item.rpartition("@")
            v = vcpus.get(name)
            if v is None:
                rep.violations.append(f"(c) {e.time}: unknown VCPU {name} in ready set")
                continue
            prio = v.period if scheduler == "rms" else int(key)
            cands.append(((prio, v.rank, name), name))
        if cands and min(cands)[1] != e.vcpu:
            rep.violations.append(f"(c) {e.time} pcpu {e.pcpu}: dispatched {e.vcpu}, "
                                  f"but {min(cands)[1]} had higher priority")

    feasible = {">".join(p.path): (p.bound, p.feasible) for p in trace.paths}
    if assignment is not None and not getattr(assignment, "feasible", True):
        feasible = {k: (b, False) for k, (b, _) in feasible.items()}
    worst: Dict[str, int] = {}
    for m in trace.messages:
        if m.t_exit is None:
            continue
        key = ">".join(m.route)
        bound, ok = feasible.get(key, (None, False))
        if bound is None:
            rep.violations.append(f"(d) message {m.msg_id} took unknown route {key}")
        elif ok and m.t_exit - m.t_arrival > bound:
            worst[key] = max(worst.get(key, 0), m.t_exit - m.t_arrival)
    for key, lat in sorted(worst.items()):
        rep.violations.append(f"(d) {key}: latency {lat}us > bound {feasible[key][0]}us")

    if any(e.kind == "block" for e in trace.events):
        rep.notes.append("blocked producers keep their remaining budget while blocked")
    return rep
