"""Core domain types: function profiles, tuned pipes and pipeline graphs.

All durations are integer microseconds.
"""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple


class ModelError(Exception):
    """Base class for model construction errors."""


class DuplicateName(ModelError):
    pass


class BufferKind(enum.Enum):
    FOUR_SLOT = "fourslot"
    FIFO = "fifo"


class Mode(enum.Enum):
    ASYNC = "async"
    FIFO = "fifo"

    @property
    def buffer_kind(self) -> BufferKind:
        return BufferKind.FOUR_SLOT if self is Mode.ASYNC else BufferKind.FIFO


class PipeKind(enum.Enum):
    TASK = "task"
    DEVICE = "device"


class Role(enum.Enum):
    SOURCE_READER = "source-reader"
    SINK_WRITER = "sink-writer"
    INTERIOR = "interior"
    # reads from and writes to a device; only valid for one-pipe pipelines
    SOURCE_SINK = "source-sink"

    @property
    def reads_device(self) -> bool:
        return self in (Role.SOURCE_READER, Role.SOURCE_SINK)

    @property
    def writes_device(self) -> bool:
        return self in (Role.SINK_WRITER, Role.SOURCE_SINK)


BOTH = frozenset(BufferKind)


@dataclass(frozen=True)
class EndpointId:
    sandbox: int
    asid: int
    ep: int
    connectable: bool = field(default=True, compare=False)

    def __str__(self) -> str:
        return f"{self.sandbox}:{self.asid}:{self.ep}"


@dataclass(frozen=True)
class FunctionProfile:
    name: str
    wcet: int
    max_inputs: int = 1
    max_outputs: int = 1
    input_buffering: frozenset = BOTH
    output_buffering: frozenset = BOTH
    role: Role = Role.INTERIOR
    default_period: Optional[int] = None

    def __post_init__(self):
        if not self.name or not self.name.replace("_", "a").isalnum():
            raise ValueError(f"bad function name {self.name!r}")
        if self.wcet <= 0:
            raise ValueError(f"{self.name}: wcet must be positive, got {self.wcet}")
        if self.max_inputs < 1 or self.max_outputs < 1:
            raise ValueError(f"{self.name}: arity limits must be >= 1")
        if not self.input_buffering or not self.output_buffering:
            raise ValueError(f"{self.name}: buffering sets must be non-empty")
        if self.default_period is not None and self.default_period <= self.wcet:
            raise ValueError(f"{self.name}: default period must exceed wcet")

    @property
    def period_default(self) -> int:
        return self.default_period or 10 * self.wcet


class FunctionRepository:
    """Named callback profiles available to pipeline construction."""

    def __init__(self, profiles: Iterable[FunctionProfile] = ()):
        self._profiles: Dict[str, FunctionProfile] = {}
        for p in profiles:
            self.register(p)

    def register(self, profile: FunctionProfile) -> None:
        if profile.name in self._profiles:
            raise DuplicateName(profile.name)
        self._profiles[profile.name] = profile

    def get(self, name: str) -> FunctionProfile:
        return self._profiles[name]

    def __contains__(self, name: str) -> bool:
        return name in self._profiles

    def __iter__(self):
        return iter(self._profiles.values())

    def __len__(self) -> int:
        return len(self._profiles)


class VcpuKind(enum.Enum):
    MAIN = "main"
    IO = "io"


@dataclass(frozen=True)
class VcpuParams:
    """A CPU reservation.

    Main VCPUs carry (budget, period). IO VCPUs carry a utilization bound and
    take their period from the Main VCPU they serve (``serves``) or, when
    that is absent, from ``period`` directly.
    """

    name: str
    kind: VcpuKind = VcpuKind.MAIN
    budget: int = 0
    period: int = 0
    u_io: Fraction = Fraction(0)
    serves: Optional[str] = None
    pcpu: int = 0
    offset: int = 0

    def __post_init__(self):
        if self.kind is VcpuKind.MAIN:
            if not 0 < self.budget < self.period:
                raise ValueError(f"{self.name}: need 0 < C < T, got C={self.budget} T={self.period}")
        else:
            if not 0 < self.u_io < 1:
                raise ValueError(f"{self.name}: need 0 < U_IO < 1, got {self.u_io}")
        if self.offset < 0:
            raise ValueError(f"{self.name}: negative offset")

    @property
    def utilization(self) -> Fraction:
        if self.kind is VcpuKind.IO:
            return Fraction(self.u_io)
        return Fraction(self.budget, self.period)


@dataclass(frozen=True)
class TunedPipe:
    id: str
    kind: PipeKind
    function: FunctionProfile
    input_endpoint: EndpointId
    output_endpoint: EndpointId
    sandbox: int = 0
    pcpu: int = 0
    # device pipes name the (possibly shared) VCPU that runs them
    vcpu: Optional[str] = None
    device: Optional[str] = None

    @property
    def is_task(self) -> bool:
        return self.kind is PipeKind.TASK


@dataclass(frozen=True)
class Edge:
    producer: str
    consumer: str
    kind: BufferKind


@dataclass(frozen=True)
class QosSpec:
    e2e_delay: Optional[int] = None
    e2e_tput: Optional[float] = None
    loss_rate: Optional[float] = None

    def __post_init__(self):
        if self.best_effort:
            return
        if self.e2e_delay is None or self.e2e_delay <= 0:
            raise ValueError("e2e_delay must be positive")
        if self.e2e_tput is not None and self.e2e_tput <= 0:
            raise ValueError("e2e_tput must be positive")
        if self.loss_rate is not None and not 0 <= self.loss_rate <= 1:
            raise ValueError("loss_rate must be within [0, 1]")
        if (self.e2e_tput is None) == (self.loss_rate is None):
            raise ValueError("exactly one of e2e_tput / loss_rate is required")

    @property
    def best_effort(self) -> bool:
        return self.e2e_delay is None and self.e2e_tput is None and self.loss_rate is None


BEST_EFFORT = QosSpec()


@dataclass
class PipelineGraph:
    pipes: Dict[str, TunedPipe]
    edges: List[Edge]
    mode: Mode = Mode.ASYNC
    qos: QosSpec = BEST_EFFORT
    name: str = "pipeline"

    def __post_init__(self):
        self._succ: Dict[str, List[str]] = defaultdict(list)
        self._pred: Dict[str, List[str]] = defaultdict(list)
        for e in self.edges:
            for end in (e.producer, e.consumer):
                if end not in self.pipes:
                    raise ModelError(f"edge references unknown pipe {end!r}")
            self._succ[e.producer].append(e.consumer)
            self._pred[e.consumer].append(e.producer)
        for d in (self._succ, self._pred):
            for k in d:
                d[k].sort()

    def successors(self, pid: str) -> List[str]:
        return self._succ.get(pid, [])

    def predecessors(self, pid: str) -> List[str]:
        return self._pred.get(pid, [])

    def edge(self, producer: str, consumer: str) -> Edge:
        for e in self.edges:
            if e.producer == producer and e.consumer == consumer:
                return e
        raise KeyError((producer, consumer))

    @property
    def task_pipes(self) -> List[TunedPipe]:
        return [p for p in self.pipes.values() if p.is_task]

    @property
    def device_pipes(self) -> List[TunedPipe]:
        return [p for p in self.pipes.values() if not p.is_task]

    def sources(self) -> List[str]:
        return sorted(p for p in self.pipes if not self.predecessors(p))

    def sinks(self) -> List[str]:
        return sorted(p for p in self.pipes if not self.successors(p))

    def paths(self) -> List[Tuple[str, ...]]:
        """All source-to-sink paths, depth-first in pipe-id order.

        Assumes the graph is acyclic.
        """
        out: List[Tuple[str, ...]] = []

        def walk(node: str, prefix: Tuple[str, ...]):
            prefix = prefix + (node,)
            succ = self.successors(node)
            if not succ:
                out.append(prefix)
            for s in succ:
                walk(s, prefix)

        for s in self.sources():
            walk(s, ())
        return out

    def task_edges(self) -> List[Edge]:
        return [e for e in self.edges
                if self.pipes[e.producer].is_task and self.pipes[e.consumer].is_task]

    def topological_order(self) -> List[str]:
        indeg = {p: len(self.predecessors(p)) for p in self.pipes}
        ready = sorted(p for p, d in indeg.items() if d == 0)
        order: List[str] = []
        while ready:
            node = ready.pop(0)
            order.append(node)
            for s in self.successors(node):
                indeg[s] -= 1
                if indeg[s] == 0:
                    ready.append(s)
                    ready.sort()
        return order


def longest_path(paths: Sequence[Tuple[str, ...]],
                 period: Optional[Dict[str, int]] = None) -> Tuple[str, ...]:
    """Longest path by pipe count, then total period, then lexicographic id order."""
    if not paths:
        return ()

    def key(p):
        total = sum(period[x] for x in p) if period else 0
        return (-len(p), -total, p)

    return min(paths, key=key)


def default_endpoints(index: int, sandbox: int = 0) -> Tuple[EndpointId, EndpointId]:
    return EndpointId(sandbox, 0, 2 * index), EndpointId(sandbox, 0, 2 * index + 1)


def make_task_pipe(pid: str, function: FunctionProfile, index: int,
                   sandbox: int = 0, pcpu: int = 0) -> TunedPipe:
    inp, outp = default_endpoints(index, sandbox)
    return TunedPipe(pid, PipeKind.TASK, function, inp, outp, sandbox=sandbox, pcpu=pcpu)


def make_device_pipe(pid: str, function: FunctionProfile, vcpu: str, device: str,
                     index: int, sandbox: int = 0, pcpu: int = 0) -> TunedPipe:
    inp, outp = default_endpoints(index, sandbox)
    return TunedPipe(pid, PipeKind.DEVICE, function, inp, outp, sandbox=sandbox,
                     pcpu=pcpu, vcpu=vcpu, device=device)


def attach_devices(graph: PipelineGraph,
                   sources: Dict[str, Sequence[TunedPipe]],
                   sinks: Dict[str, Sequence[TunedPipe]]) -> PipelineGraph:
    """Return a copy of ``graph`` with device chains feeding source pipes and
    draining sink pipes.

    ``sources[task]`` lists device pipes in data-flow order ending at ``task``;
    ``sinks[task]`` lists device pipes in order starting after ``task``.
    Round trips through one physical device use distinct source and sink nodes.
    """
    pipes = dict(graph.pipes)
    edges = list(graph.edges)
    kind = graph.mode.buffer_kind
    for task, chain in sorted(sources.items()):
        prev = None
        for dev in chain:
            if dev.id in pipes:
                raise DuplicateName(dev.id)
            pipes[dev.id] = dev
            if prev is not None:
                edges.append(Edge(prev, dev.id, kind))
            prev = dev.id
        if prev is not None:
            edges.append(Edge(prev, task, kind))
    for task, chain in sorted(sinks.items()):
        prev = task
        for dev in chain:
            if dev.id in pipes:
                raise DuplicateName(dev.id)
            pipes[dev.id] = dev
            edges.append(Edge(prev, dev.id, kind))
            prev = dev.id
    return PipelineGraph(pipes, edges, graph.mode, graph.qos, graph.name)


# -- validation -------------------------------------------------------------

@dataclass(frozen=True)
class Issue:
    kind: str  # BufferingMismatch | ArityExceeded | RoleMismatch | CycleDetected | ...
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}({self.subject}){': ' + self.detail if self.detail else ''}"


@dataclass
class ValidationReport:
    errors: List[Issue]
    paths: List[Tuple[str, ...]] = field(default_factory=list)
    longest: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors


def _find_cycle(graph: PipelineGraph) -> List[str]:
    color: Dict[str, int] = {}
    stack: List[str] = []

    def visit(n: str) -> Optional[List[str]]:
        color[n] = 1
        stack.append(n)
        for s in graph.successors(n):
            if color.get(s) == 1:
                return stack[stack.index(s):]
            if s not in color:
                found = visit(s)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in sorted(graph.pipes):
        if n not in color:
            found = visit(n)
            if found:
                return found
    return []


def validate_graph(graph: PipelineGraph,
                   repo: Optional[FunctionRepository] = None) -> ValidationReport:
    errors: List[Issue] = []
    if repo is not None:
        for p in graph.task_pipes:
            if p.function.name not in repo:
                errors.append(Issue("UnknownFunction", p.id, p.function.name))

    for e in graph.edges:
        prod, cons = graph.pipes[e.producer], graph.pipes[e.consumer]
        if e.kind is not graph.mode.buffer_kind:
            errors.append(Issue("BufferingMismatch", f"{e.producer}->{e.consumer}",
                                f"{e.kind.value} edge in {graph.mode.value} pipeline"))
        elif (e.kind not in prod.function.output_buffering
              or e.kind not in cons.function.input_buffering):
            errors.append(Issue("BufferingMismatch", f"{e.producer}->{e.consumer}",
                                f"{e.kind.value} not allowed"))
        if not cons.input_endpoint.connectable:
            errors.append(Issue("NotConnectable", f"{e.producer}->{e.consumer}",
                                f"endpoint {cons.input_endpoint}"))

    for pid, p in sorted(graph.pipes.items()):
        fan_in, fan_out = len(graph.predecessors(pid)), len(graph.successors(pid))
        if fan_in > p.function.max_inputs:
            errors.append(Issue("ArityExceeded", pid, f"{fan_in} inputs > {p.function.max_inputs}"))
        if fan_out > p.function.max_outputs:
            errors.append(Issue("ArityExceeded", pid, f"{fan_out} outputs > {p.function.max_outputs}"))

    for pid, p in sorted(graph.pipes.items()):
        preds = [graph.pipes[x] for x in graph.predecessors(pid)]
        succs = [graph.pipes[x] for x in graph.successors(pid)]
        if not p.is_task:
            if any(x.is_task for x in preds) and any(x.is_task for x in succs):
                errors.append(Issue("RoleMismatch", pid, "device pipe interior to a task path"))
            continue
        role = p.function.role
        task_pred = any(x.is_task for x in preds)
        task_succ = any(x.is_task for x in succs)
        if role.reads_device and task_pred:
            errors.append(Issue("RoleMismatch", pid, f"{role.value} fed by a task pipe"))
        if not role.reads_device and not task_pred:
            errors.append(Issue("RoleMismatch", pid, f"{role.value} at pipeline input"))
        if role.writes_device and task_succ:
            errors.append(Issue("RoleMismatch", pid, f"{role.value} feeds a task pipe"))
        if not role.writes_device and not task_succ:
            errors.append(Issue("RoleMismatch", pid, f"{role.value} at pipeline output"))

    cycle = _find_cycle(graph)
    if cycle:
        errors.append(Issue("CycleDetected", ",".join(cycle)))
        return ValidationReport(errors)

    paths = graph.paths()
    return ValidationReport(errors, paths, longest_path(paths))
