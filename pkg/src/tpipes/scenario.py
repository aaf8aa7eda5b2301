"""Scenario files: platform, pipelines and workload in one INI document.

    [scenario]        name, horizon, seed, scheduler, alpha
    [functions]       NAME = wcet[, role][, in=N][, out=N][, buffering=fifo|fourslot]
    [vcpu NAME]       budget + period, or kind = io with u_io (+ serves)
    [background]      NAME = budget, period, pcpu[, count]
    [pipeline NAME]   spec, source, sink, pin, place, reference_buffers
    [workload SRC]    rate, jitter, offset, count, saturate
    [ranks]           VCPU = rank (dispatch tie-break)
    [offsets]         VCPU = first release time of a task pipe

Durations take a unit suffix (us, ms, s); bare numbers are microseconds.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .analysis import EDF, TunedAssignment
from .model import (
    BOTH,
    BufferKind,
    FunctionProfile,
    FunctionRepository,
    PipelineGraph,
    Role,
    VcpuKind,
    VcpuParams,
    attach_devices,
    make_device_pipe,
    validate_graph,
)
from .parser import parse_pipeline
from .sim import ArrivalSpec, Platform, SimOptions, run
from .solver import DEFAULT_ALPHA, solve
from .trace import TraceLog


class ScenarioError(ValueError):
    pass


_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(us|ms|s)?\s*$")
_SCALE = {None: 1, "us": 1, "ms": 1000, "s": 1_000_000}


def parse_duration(text: str) -> int:
    m = _DURATION.match(str(text))
    if not m:
        raise ScenarioError(f"bad duration {text!r}")
    value = Fraction(m.group(1)) * _SCALE[m.group(2)]
    if value.denominator != 1:
        raise ScenarioError(f"duration {text!r} is not a whole number of microseconds")
    return int(value)


def _split(text: str, sep: str = ";") -> List[str]:
    return [x.strip() for x in text.split(sep) if x.strip()]


@dataclass
class PipelineDecl:
    name: str
    spec: str
    sources: Dict[str, Tuple[str, List[str]]] = field(default_factory=dict)
    sinks: Dict[str, Tuple[str, List[str]]] = field(default_factory=dict)
    pins: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    place: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    reference_buffers: Dict[Tuple[str, str], int] = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    repo: FunctionRepository
    vcpus: Dict[str, VcpuParams]
    background: List[VcpuParams]
    pipelines: List[PipelineDecl]
    workload: Dict[str, ArrivalSpec]
    horizon: int = 1_000_000
    seed: int = 0
    scheduler: str = EDF
    alpha: float = DEFAULT_ALPHA
    ranks: Dict[str, int] = field(default_factory=dict)
    offsets: Dict[str, int] = field(default_factory=dict)

    def graphs(self) -> List[PipelineGraph]:
        out = []
        for decl in self.pipelines:
            g = parse_pipeline(decl.spec, self.repo, decl.name)
            pipes = dict(g.pipes)
            for pid, (pcpu, sandbox) in decl.place.items():
                if pid not in pipes:
                    raise ScenarioError(f"{decl.name}: cannot place unknown pipe {pid!r}")
                p = pipes[pid]
                inp = type(p.input_endpoint)(sandbox, p.input_endpoint.asid, p.input_endpoint.ep)
                outp = type(p.output_endpoint)(sandbox, p.output_endpoint.asid, p.output_endpoint.ep)
                pipes[pid] = type(p)(p.id, p.kind, p.function, inp, outp, sandbox, pcpu)
            g = PipelineGraph(pipes, g.edges, g.mode, g.qos, g.name)
            index = len(pipes)
            src, snk = {}, {}
            for task, (device, chain) in decl.sources.items():
                src[task] = []
                for fn in chain:
                    src[task].append(self._device_pipe(f"{device}.rx.{fn}", fn, device, index))
                    index += 1
            for task, (device, chain) in decl.sinks.items():
                snk[task] = []
                for fn in chain:
                    snk[task].append(self._device_pipe(f"{device}.tx.{fn}", fn, device, index))
                    index += 1
            for task in list(src) + list(snk):
                if task not in pipes:
                    raise ScenarioError(f"{decl.name}: device chain attached to unknown pipe {task!r}")
            g = attach_devices(g, src, snk)
            report = validate_graph(g, self.repo)
            if not report.ok:
                raise ScenarioError(f"{decl.name}: " + "; ".join(str(e) for e in report.errors))
            out.append(g)
        return out

    def _device_pipe(self, pid: str, fn: str, device: str, index: int):
        if fn not in self.vcpus:
            raise ScenarioError(f"device function {fn!r} has no [vcpu {fn}] section")
        return make_device_pipe(pid, self.repo.get(fn), fn, device, index, pcpu=self.vcpus[fn].pcpu)

    def platform(self) -> Platform:
        return Platform(dict(self.vcpus), list(self.background), dict(self.ranks), dict(self.offsets))

    def solve(self, scheduler: Optional[str] = None,
              alpha: Optional[float] = None) -> List[Tuple[PipelineGraph, TunedAssignment]]:
        """Admit pipelines in declaration order, each against those already admitted."""
        out: List[Tuple[PipelineGraph, TunedAssignment]] = []
        for decl, g in zip(self.pipelines, self.graphs()):
            a = solve(g, self.vcpus, scheduler or self.scheduler, alpha or self.alpha,
                      extra=self.background, others=[x for _, x in out], pins=decl.pins)
            out.append((g, a))
        return out

    def simulate(self, horizon: Optional[int] = None, seed: Optional[int] = None,
                 scheduler: Optional[str] = None, options: SimOptions = SimOptions(),
                 solved=None) -> TraceLog:
        solved = solved if solved is not None else self.solve(scheduler)
        return run(solved, self.platform(), self.workload,
                   self.horizon if horizon is None else horizon,
                   self.seed if seed is None else seed,
                   scheduler or self.scheduler, options)


def _function(name: str, text: str) -> FunctionProfile:
    parts = [x.strip() for x in text.split(",")]
    kw = {"wcet": parse_duration(parts[0])}
    buffering = BOTH
    for part in parts[1:]:
        if "=" in part:
            k, v = (x.strip() for x in part.split("=", 1))
            if k == "in":
                kw["max_inputs"] = int(v)
            elif k == "out":
                kw["max_outputs"] = int(v)
            elif k == "period":
                kw["default_period"] = parse_duration(v)
            elif k == "buffering":
                buffering = BOTH if v == "both" else frozenset({BufferKind(v)})
            else:
                raise ScenarioError(f"function {name}: unknown attribute {k!r}")
        else:
            try:
                kw["role"] = Role(part)
            except ValueError:
                raise ScenarioError(f"function {name}: unknown role {part!r}") from None
    return FunctionProfile(name, input_buffering=buffering, output_buffering=buffering, **kw)


def _chains(text: str, arrow: str) -> Dict[str, Tuple[str, List[str]]]:
    out = {}
    for item in _split(text):
        task, _, rest = item.partition(arrow)
        device, _, chain = rest.partition(":")
        if not (task.strip() and device.strip() and chain.strip()):
            raise ScenarioError(f"bad device chain {item!r}; expected 'TASK {arrow} DEV: fn, fn'")
        out[task.strip()] = (device.strip(), [x.strip() for x in chain.split(",") if x.strip()])
    return out


def loads(text: str, default_name: str = "scenario") -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(str(exc)) from None

    head = cp["scenario"] if cp.has_section("scenario") else {}
    repo = FunctionRepository()
    if cp.has_section("functions"):
        for name, spec in cp["functions"].items():
            repo.register(_function(name, spec))

    vcpus: Dict[str, VcpuParams] = {}
    background: List[VcpuParams] = []
    pipelines: List[PipelineDecl] = []
    workload: Dict[str, ArrivalSpec] = {}
    ranks: Dict[str, int] = {}
    offsets: Dict[str, int] = {}
    for sec in cp.sections():
        kind, _, name = sec.partition(" ")
        s = cp[sec]
        try:
            if kind == "vcpu":
                if s.get("kind", "main") == "io":
                    vcpus[name] = VcpuParams(name, VcpuKind.IO, u_io=Fraction(s["u_io"]),
                                             period=parse_duration(s.get("period", "0")),
                                             serves=s.get("serves"), pcpu=int(s.get("pcpu", 0)))
                else:
                    vcpus[name] = VcpuParams(name, VcpuKind.MAIN, parse_duration(s["budget"]),
                                             parse_duration(s["period"]), pcpu=int(s.get("pcpu", 0)),
                                             offset=parse_duration(s.get("offset", "0")))
            elif kind == "background":
                for bname, spec in s.items():
                    parts = [x.strip() for x in spec.split(",")]
                    budget, period = parse_duration(parts[0]), parse_duration(parts[1])
                    pcpu = int(parts[2]) if len(parts) > 2 else 0
                    count = int(parts[3]) if len(parts) > 3 else 1
                    names = [bname] if count == 1 else [f"{bname}{i:02d}" for i in range(1, count + 1)]
                    background.extend(VcpuParams(n, VcpuKind.MAIN, budget, period, pcpu=pcpu)
                                      for n in names)
            elif kind == "pipeline":
                d = PipelineDecl(name, s["spec"])
                d.sources = _chains(s.get("source", ""), "<")
                d.sinks = _chains(s.get("sink", ""), ">")
                for item in _split(s.get("pin", "")):
                    pid, c, t = item.split()
                    d.pins[pid] = (parse_duration(c), parse_duration(t))
                for item in _split(s.get("place", "")):
                    parts = item.split()
                    d.place[parts[0]] = (int(parts[1]), int(parts[2]) if len(parts) > 2 else 0)
                for item in _split(s.get("reference_buffers", "")):
                    edge, slots = item.split()
                    p, c = edge.split(">")
                    d.reference_buffers[(p, c)] = int(slots)
                pipelines.append(d)
            elif kind == "workload":
                workload[name] = ArrivalSpec(
                    rate=float(s.get("rate", 0)), jitter=parse_duration(s.get("jitter", "0")),
                    offset=parse_duration(s.get("offset", "0")),
                    count=int(s["count"]) if "count" in s else None,
                    saturate=s.getboolean("saturate", False))
            elif kind == "ranks":
                ranks.update({k: int(v) for k, v in s.items()})
            elif kind == "offsets":
                offsets.update({k: parse_duration(v) for k, v in s.items()})
            elif kind not in ("scenario", "functions"):
                raise ScenarioError(f"unknown section [{sec}]")
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"[{sec}]: {exc}") from None

    return Scenario(
        name=head.get("name", default_name), repo=repo, vcpus=vcpus, background=background,
        pipelines=pipelines, workload=workload,
        horizon=parse_duration(head.get("horizon", "1s")), seed=int(head.get("seed", 0)),
        scheduler=head.get("scheduler", EDF), alpha=float(head.get("alpha", DEFAULT_ALPHA)),
        ranks=ranks, offsets=offsets)


def shipped() -> List[str]:
    root = resources.files("tpipes") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def load(name_or_path: str) -> Scenario:
    """Load a shipped scenario by name, or any scenario file by path."""
    path = Path(name_or_path)
    if path.suffix == ".ini" or path.exists():
        return loads(path.read_text(), path.stem)
    res = resources.files("tpipes") / "scenarios" / f"{name_or_path}.ini"
    if not res.is_file():
        raise ScenarioError(f"no shipped scenario {name_or_path!r}; have {', '.join(shipped())}")
    return loads(res.read_text(), name_or_path)


def worst_case_text(T: int = 10, unit: int = 1000) -> str:
    """Adversarial schedule: T-2 unit competitors, then tpipe2, then tpipe1.

    Every reservation is (1, T) units on one PCPU; data enters tpipe1 at 0
    and the competitors and tpipe2 win the tie-breaks ahead of it.
    """
    if T < 3:
        raise ValueError("need T >= 3")
    lines = [
        "[scenario]", f"name = worstcase_{T}T", f"horizon = {3 * T * unit}us",
        "seed = 0", "scheduler = edf", "",
        "[functions]", f"tpipe1 = {unit}us, source-reader", f"tpipe2 = {unit}us, sink-writer", "",
        "[background]", f"competitor = {unit}us, {T * unit}us, 0, {T - 2}", "",
        "[pipeline worst]", f"spec = tpipe1 | tpipe2 [0, {2 * T * unit}us]",
        f"pin = tpipe1 {unit}us {T * unit}us; tpipe2 {unit}us {T * unit}us", "",
        "[ranks]", "tpipe2 = 1", "tpipe1 = 2", "",
        "[workload tpipe1]", "count = 1", f"rate = {1_000_000 / (T * unit)}", "",
    ]
    return "\n".join(lines)
