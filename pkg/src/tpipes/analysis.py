"""Closed-form end-to-end checks over a tuned assignment.

These functions are the independent checker for the solver: they only read
the assignment and never share code paths with the tuning loop.
"""
from __future__ import annotations

import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .model import Mode, PipelineGraph, QosSpec, VcpuKind, VcpuParams

RMS = "rms"
EDF = "edf"
SCHEDULERS = (RMS, EDF)


class MissingAssignment(KeyError):
    pass


@dataclass
class PipeParams:
    """Budget/period/batch for one pipe. Device pipes carry their fixed VCPU."""

    budget: int
    period: int
    batch: int = 1
    pcpu: int = 0
    vcpu: str = ""
    fixed: bool = False
    u_io: Optional[Fraction] = None

    @property
    def utilization(self) -> Fraction:
        if self.u_io is not None:
            return Fraction(self.u_io)
        return Fraction(self.budget, self.period)

    def as_vcpu(self) -> VcpuParams:
        if self.u_io is not None:
            return VcpuParams(self.vcpu, VcpuKind.IO, period=self.period,
                              u_io=Fraction(self.u_io), pcpu=self.pcpu)
        return VcpuParams(self.vcpu, VcpuKind.MAIN, self.budget, self.period, pcpu=self.pcpu)


@dataclass
class TunedAssignment:
    pipes: Dict[str, PipeParams]
    buffers: Dict[Tuple[str, str], int] = field(default_factory=dict)
    feasible: bool = True
    violations: List[str] = field(default_factory=list)
    achieved: Dict[str, object] = field(default_factory=dict)
    graph_hash: str = ""

    def period_of(self, pid: str) -> int:
        try:
            return self.pipes[pid].period
        except KeyError:
            raise MissingAssignment(pid) from None


def graph_hash(graph: PipelineGraph) -> str:
    h = hashlib.sha256()
    for pid in sorted(graph.pipes):
        p = graph.pipes[pid]
        h.update(f"P|{pid}|{p.kind.value}|{p.function.name}|{p.function.wcet}|{p.vcpu}\n".encode())
    for e in sorted(graph.edges, key=lambda e: (e.producer, e.consumer)):
        h.update(f"E|{e.producer}|{e.consumer}|{e.kind.value}\n".encode())
    q = graph.qos
    h.update(f"Q|{graph.mode.value}|{q.e2e_delay}|{q.e2e_tput}|{q.loss_rate}\n".encode())
    return h.hexdigest()[:16]


def e2e_delay_bound(graph: PipelineGraph, assignment: TunedAssignment) -> Dict[Tuple[str, ...], int]:
    """Sum of pipe periods along every source-to-sink path."""
    return {path: sum(assignment.period_of(p) for p in path) for path in graph.paths()}


def worst_delay_bound(graph: PipelineGraph, assignment: TunedAssignment) -> int:
    bounds = e2e_delay_bound(graph, assignment)
    return max(bounds.values()) if bounds else 0


def edge_loss(t_producer: int, t_consumer: int) -> Fraction:
    return max(Fraction(0), 1 - Fraction(t_producer, t_consumer))


def max_loss_rate(graph: PipelineGraph, assignment: TunedAssignment) -> float:
    """Largest per-edge overwrite fraction ``1 - T_p/T_c`` between task pipes.

    Device pipes are interrupt driven, so their reservation period is not a
    production rate and their edges are left out.
    """
    worst = Fraction(0)
    for e in graph.task_edges():
        worst = max(worst, edge_loss(assignment.period_of(e.producer),
                                     assignment.period_of(e.consumer)))
    return float(worst)


def min_throughput(graph: PipelineGraph, assignment: TunedAssignment) -> float:
    """Slowest task pipe's forwarding rate in messages per second."""
    rates = [Fraction(assignment.pipes[p.id].batch * 1_000_000, assignment.period_of(p.id))
             for p in graph.task_pipes]
    return float(min(rates)) if rates else math.inf


Util = Union[VcpuParams, Fraction, float, int]


def _utilization(items: Iterable[Util]) -> Tuple[Fraction, int]:
    total, n = Fraction(0), 0
    for v in items:
        n += 1
        if isinstance(v, VcpuParams):
            total += v.utilization
        elif isinstance(v, float):
            total += Fraction(repr(v))
        else:
            total += Fraction(v)
    return total, n


def rms_bound(n: int) -> float:
    if n <= 0:
        return math.inf
    return n * (2.0 ** (1.0 / n) - 1.0)


def rms_schedulable(vcpus: Iterable[Util]) -> bool:
    total, n = _utilization(vcpus)
    return n == 0 or float(total) <= rms_bound(n)


def edf_schedulable(vcpus: Iterable[Util]) -> bool:
    total, _ = _utilization(vcpus)
    return total <= 1


def schedulable(vcpus: Sequence[Util], scheduler: str) -> bool:
    if scheduler == RMS:
        return rms_schedulable(vcpus)
    if scheduler == EDF:
        return edf_schedulable(vcpus)
    raise ValueError(f"unknown scheduler {scheduler!r}")


def total_utilization(vcpus: Iterable[Util]) -> Fraction:
    return _utilization(vcpus)[0]


def size_fifo_buffer(producer: Tuple[int, int], consumer: Tuple[int, int]) -> int:
    """Slots needed between a producer (m_p, T_p) and a consumer (m_c, T_c)."""
    m_p, t_p = producer
    _, t_c = consumer
    if t_p <= 0 or t_c <= 0 or m_p < 1:
        raise ValueError("periods must be positive and m_p >= 1")
    return m_p * (-(-t_c // t_p) + 1)


def vcpus_by_pcpu(assignments: Iterable[TunedAssignment],
                  extra: Iterable[VcpuParams] = ()) -> Dict[int, List[VcpuParams]]:
    """Distinct VCPUs per PCPU; shared device VCPUs are counted once."""
    seen: Dict[str, VcpuParams] = {}
    for a in assignments:
        for pid, pp in a.pipes.items():
            name = pp.vcpu or pid
            if name not in seen:
                v = pp.as_vcpu()
                seen[name] = VcpuParams(name, v.kind, v.budget, v.period, v.u_io, pcpu=v.pcpu)
    for v in extra:
        seen.setdefault(v.name, v)
    out: Dict[int, List[VcpuParams]] = defaultdict(list)
    for name in sorted(seen):
        out[seen[name].pcpu].append(seen[name])
    return dict(sorted(out.items()))


def check_conditions(graph: PipelineGraph, assignment: TunedAssignment,
                     scheduler: str, extra: Iterable[VcpuParams] = (),
                     others: Iterable[TunedAssignment] = ()) -> List[str]:
    """Return the violated end-to-end conditions (empty when all hold)."""
    out: List[str] = []
    qos: QosSpec = graph.qos
    for p in graph.task_pipes:
        pp = assignment.pipes.get(p.id)
        if pp is None:
            out.append(f"missing({p.id})")
            continue
        if not 0 < pp.budget < pp.period:
            out.append(f"budget({p.id}): C={pp.budget} T={pp.period}")
        if pp.batch < 1 or pp.budget != pp.batch * p.function.wcet:
            out.append(f"batch({p.id}): C={pp.budget} != {pp.batch}x{p.function.wcet}")
    if out:
        return out
    if not qos.best_effort:
        for path, bound in e2e_delay_bound(graph, assignment).items():
            if bound > qos.e2e_delay:
                out.append(f"delay: {'>'.join(path)} sums to {bound}us > {qos.e2e_delay}us")
                break
        if graph.mode is Mode.FIFO:
            tput = min_throughput(graph, assignment)
            if tput < qos.e2e_tput:
                out.append(f"throughput: {tput:.3f}/s < {qos.e2e_tput}/s")
        else:
            loss = max_loss_rate(graph, assignment)
            if loss > qos.loss_rate:
                out.append(f"loss: {loss:.4f} > {qos.loss_rate}")
    if graph.mode is Mode.FIFO:
        for e in graph.edges:
            pp, pc = assignment.pipes[e.producer], assignment.pipes[e.consumer]
            need = size_fifo_buffer((pp.batch, pp.period), (pc.batch, pc.period))
            have = assignment.buffers.get((e.producer, e.consumer), 0)
            if have < need:
                out.append(f"buffer: {e.producer}->{e.consumer} has {have} < {need} slots")
    for pcpu, vs in vcpus_by_pcpu([assignment, *others], extra).items():
        if not schedulable(vs, scheduler):
            out.append(f"schedulability: pcpu {pcpu} utilization "
                       f"{float(total_utilization(vs)):.4f} fails {scheduler}")
    return out
