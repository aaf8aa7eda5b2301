"""Trace records produced by the simulator and their CSV form."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, NamedTuple, Optional, Tuple

MESSAGES_CSV = "messages.csv"
EVENTS_CSV = "events.csv"
VCPUS_CSV = "vcpus.csv"
PATHS_CSV = "paths.csv"
META_CSV = "meta.csv"


class MessageRecord(NamedTuple):
    msg_id: int
    source: str
    t_arrival: int
    hops: Tuple[Tuple[str, int, int], ...]  # (pipe, t_read, t_write)
    t_exit: Optional[int] = None
    lost_at: Optional[str] = None

    @property
    def route(self) -> Tuple[str, ...]:
        r = tuple(h[0] for h in self.hops)
        return r + (self.lost_at,) if self.lost_at else r

    @property
    def delivered(self) -> bool:
        return self.t_exit is not None

    @property
    def latency(self) -> Optional[int]:
        return None if self.t_exit is None else self.t_exit - self.t_arrival


class SchedEvent(NamedTuple):
    time: int
    pcpu: int
    vcpu: str
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class VcpuRow:
    name: str
    kind: str  # main | io | background
    budget: int
    period: int
    u_io: Fraction
    pcpu: int
    rank: int


@dataclass(frozen=True)
class PathRow:
    graph: str
    path: Tuple[str, ...]
    bound: int
    feasible: bool
    mode: str


@dataclass
class TraceLog:
    meta: Dict[str, str] = field(default_factory=dict)
    vcpus: List[VcpuRow] = field(default_factory=list)
    paths: List[PathRow] = field(default_factory=list)
    messages: List[MessageRecord] = field(default_factory=list)
    events: List[SchedEvent] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return int(self.meta.get("horizon", 0))

    def write(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {}

        def dump(name, header, rows):
            path = os.path.join(out_dir, name)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            files[name] = path

        dump(META_CSV, ["key", "value"], sorted(self.meta.items()))
        dump(VCPUS_CSV, ["name", "kind", "budget_us", "period_us", "u_io", "pcpu", "rank"],
             [(v.name, v.kind, v.budget, v.period, str(v.u_io), v.pcpu, v.rank) for v in self.vcpus])
        dump(PATHS_CSV, ["graph", "path", "bound_us", "feasible", "mode"],
             [(p.graph, ">".join(p.path), p.bound, int(p.feasible), p.mode) for p in self.paths])
        dump(MESSAGES_CSV, ["msg_id", "source", "route", "t_arrival_us", "t_exit_us",
                            "latency_us", "lost_at", "hops"],
             [(m.msg_id, m.source, ">".join(m.route), m.t_arrival,
               "" if m.t_exit is None else m.t_exit,
               "" if m.t_exit is None else m.t_exit - m.t_arrival,
               m.lost_at or "",
               ";".join(f"{p}:{r}:{w}" for p, r, w in m.hops)) for m in self.messages])
        dump(EVENTS_CSV, ["time_us", "pcpu", "vcpu", "event", "detail"],
             [(e.time, e.pcpu, e.vcpu, e.kind, e.detail) for e in self.events])
        return files

    @classmethod
    def read(cls, out_dir: str) -> "TraceLog":
        def rows(name):
            with open(os.path.join(out_dir, name), newline="") as fh:
                return list(csv.DictReader(fh))

        t = cls()
        t.meta = {r["key"]: r["value"] for r in rows(META_CSV)}
        t.vcpus = [VcpuRow(r["name"], r["kind"], int(r["budget_us"]), int(r["period_us"]),
                           Fraction(r["u_io"]), int(r["pcpu"]), int(r["rank"]))
                   for r in rows(VCPUS_CSV)]
        t.paths = [PathRow(r["graph"], tuple(r["path"].split(">")), int(r["bound_us"]),
                           r["feasible"] == "1", r["mode"]) for r in rows(PATHS_CSV)]
        for r in rows(MESSAGES_CSV):
            hops = tuple((p, int(a), int(b)) for p, a, b in
                         (h.rsplit(":", 2) for h in r["hops"].split(";") if h))
            t.messages.append(MessageRecord(
                int(r["msg_id"]), r["source"], int(r["t_arrival_us"]), hops,
                int(r["t_exit_us"]) if r["t_exit_us"] else None, r["lost_at"] or None))
        t.events = [SchedEvent(int(r["time_us"]), int(r["pcpu"]), r["vcpu"], r["event"], r["detail"])
                    for r in rows(EVENTS_CSV)]
        return t
