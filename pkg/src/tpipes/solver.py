"""Budget/period tuning for task pipes.

The tuning loop runs in a fixed order: rate-matched initialisation, global
period scaling until every PCPU is schedulable, producer-period halving with
consumer batching to pull the end-to-end delay under the bound, consumer
shrinking, and finally FIFO sizing and an independent re-check.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .analysis import (
    PipeParams,
    TunedAssignment,
    check_conditions,
    e2e_delay_bound,
    graph_hash,
    max_loss_rate,
    min_throughput,
    schedulable,
    size_fifo_buffer,
    vcpus_by_pcpu,
)
from .model import Mode, PipelineGraph, VcpuKind, VcpuParams, longest_path

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 1.25
MAX_HALVINGS = 64
MAX_SCALINGS = 64


class Infeasible(Exception):
    def __init__(self, condition: str, assignment: Optional[TunedAssignment] = None):
        super().__init__(condition)
        self.condition = condition
        self.assignment = assignment


class NonConvergent(Exception):
    pass


def device_params(graph: PipelineGraph, vcpus: Mapping[str, VcpuParams]) -> Dict[str, PipeParams]:
    """Fixed parameters of device pipes, taken from their (shared) VCPUs."""
    out = {}
    for p in graph.device_pipes:
        v = vcpus[p.vcpu]
        if v.kind is VcpuKind.IO:
            period = vcpus[v.serves].period if v.serves else v.period
            budget = max(1, math.floor(v.u_io * period))
            out[p.id] = PipeParams(budget, period, 1, v.pcpu, v.name, True, v.u_io)
        else:
            out[p.id] = PipeParams(v.budget, v.period, 1, v.pcpu, v.name, True)
    return out


def pinned_params(graph: PipelineGraph, pins: Mapping[str, Tuple[int, int]]) -> Dict[str, PipeParams]:
    out = {}
    for pid, (budget, period) in pins.items():
        p = graph.pipes[pid]
        batch, rem = divmod(budget, p.function.wcet)
        if rem or batch < 1:
            raise ValueError(f"{pid}: pinned budget {budget} is not a multiple of wcet {p.function.wcet}")
        out[pid] = PipeParams(budget, period, batch, p.pcpu, pid, True)
    return out


class _Tuner:
    def __init__(self, graph, params, scheduler, extra, others, quantum=1):
        self.g = graph
        self.q = quantum
        self.params: Dict[str, PipeParams] = params
        self.scheduler = scheduler
        self.extra = list(extra)
        self.others = list(others)
        self.qos = graph.qos
        self.wcet = {p.id: p.function.wcet for p in graph.task_pipes}
        self.paths = graph.paths()

    def snapshot(self) -> TunedAssignment:
        return TunedAssignment(dict(self.params))

    def schedulable(self) -> bool:
        per = vcpus_by_pcpu([self.snapshot(), *self.others], self.extra)
        return all(schedulable(vs, self.scheduler) for vs in per.values())

    def delay_ok(self) -> bool:
        return all(sum(self.params[x].period for x in path) <= self.qos.e2e_delay
                   for path in self.paths)

    def rate_ok(self) -> bool:
        a = self.snapshot()
        if self.g.mode is Mode.FIFO:
            return min_throughput(self.g, a) >= self.qos.e2e_tput
        return max_loss_rate(self.g, a) <= self.qos.loss_rate

    def qos_ok(self) -> bool:
        return self.delay_ok() and self.rate_ok()

    def set(self, pid: str, batch: int, period: int) -> None:
        pp = self.params[pid]
        self.params[pid] = PipeParams(batch * self.wcet[pid], period, batch, pp.pcpu, pp.vcpu)

    def spend_slack(self, free: Sequence[str]) -> None:
        """Lengthen periods on overloaded PCPUs while every path keeps within the delay."""
        cap = None
        if self.g.mode is Mode.FIFO:
            cap = math.floor(1_000_000 / self.qos.e2e_tput)
        through = {pid: [p for p in self.paths if pid in p] for pid in free}
        for _ in range(4096):
            per = vcpus_by_pcpu([self.snapshot(), *self.others], self.extra)
            hot = {q for q, vs in per.items() if not schedulable(vs, self.scheduler)}
            if not hot:
                return
            best = None
            for pid in free:
                pp = self.params[pid]
                if pp.pcpu not in hot:
                    continue
                step = max(self.q, _down(pp.period // 64, self.q))
                period = pp.period + step
                if cap is not None and period > cap:
                    continue
                if any(sum(self.params[x].period for x in path) + step > self.qos.e2e_delay
                       for path in through[pid]):
                    continue
                w = self.wcet[pid] * pp.batch
                gain = (w / pp.period - w / period) / step
                if best is None or gain > best[0]:
                    best = (gain, pid, period)
            if best is None:
                return
            pp = self.params[best[1]]
            self.set(best[1], pp.batch, best[2])

    def trial(self, changes: Sequence[Tuple[str, int, int]], extra_check=None) -> bool:
        """Apply ``changes`` if every budget stays below its period and all PCPUs remain schedulable."""
        saved = {pid: self.params[pid] for pid, _, _ in changes}
        for pid, batch, period in changes:
            if batch * self.wcet[pid] >= period:
                return False
        for pid, batch, period in changes:
            self.set(pid, batch, period)
        if self.schedulable() and (extra_check is None or extra_check()):
            return True
        self.params.update(saved)
        return False


def solve(graph: PipelineGraph, vcpus: Mapping[str, VcpuParams] = (), scheduler: str = "edf",
          alpha: float = DEFAULT_ALPHA, extra: Iterable[VcpuParams] = (),
          others: Iterable[TunedAssignment] = (),
          pins: Optional[Mapping[str, Tuple[int, int]]] = None,
          period_quantum: int = 1) -> TunedAssignment:
    """Tune every unpinned task pipe of ``graph``.

    ``vcpus`` holds device VCPUs by name, ``extra`` any further fixed load
    (background reservations), ``others`` assignments of pipelines already
    admitted on the same platform. Tuned periods are multiples of
    ``period_quantum``. Raises Infeasible or NonConvergent.
    """
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    if period_quantum < 1:
        raise ValueError("period_quantum must be >= 1")
    vcpus = dict(vcpus)
    extra = list(extra)
    others = list(others)
    params = device_params(graph, vcpus)
    params.update(pinned_params(graph, pins or {}))
    free = [p.id for p in graph.task_pipes if p.id not in params]
    qos = graph.qos

    # fixed load alone must fit, otherwise no period choice helps
    fixed = TunedAssignment(dict(params))
    for pcpu, vs in vcpus_by_pcpu([fixed, *others], extra).items():
        if not schedulable(vs, scheduler):
            raise Infeasible(f"schedulability: fixed load on pcpu {pcpu} fails {scheduler}", fixed)

    try:
        return _attempt(graph, params, free, scheduler, alpha, extra, others, fixed, period_quantum,
                        weighted=False)
    except Infeasible as first:
        if not free or qos.best_effort or len(free) < 2:
            raise
        try:
            return _attempt(graph, params, free, scheduler, alpha, extra, others, fixed, period_quantum,
                            weighted=True)
        except (Infeasible, NonConvergent):
            raise first from None


def _initial_periods(graph: PipelineGraph, params: Dict[str, PipeParams], free: List[str],
                     fixed: TunedAssignment, weighted: bool, scheduler: str = "edf",
                     extra: Sequence[VcpuParams] = (), others: Sequence[TunedAssignment] = ()
                     ) -> Dict[str, int]:
    qos = graph.qos
    fixed_periods = {pid: pp.period for pid, pp in params.items()}
    lp = longest_path(graph.paths())
    n = sum(1 for x in lp if x in free)
    avail = qos.e2e_delay - sum(fixed_periods.get(x, 0) for x in lp)
    if n and avail < n:
        raise Infeasible(f"delay: fixed pipes on {'>'.join(lp)} already use "
                         f"{qos.e2e_delay - avail}us of {qos.e2e_delay}us", fixed)
    delta = avail // n if n else qos.e2e_delay
    # one message per period must already meet the requested rate
    cap = math.floor(1_000_000 / qos.e2e_tput) if graph.mode is Mode.FIFO else None
    if not weighted:
        return {pid: delta if cap is None else min(delta, cap) for pid in free}
    return _weighted_periods(graph, fixed_periods, free, fixed, cap, scheduler, extra, others)


def _weighted_periods(graph, fixed_periods, free, fixed, cap, scheduler, extra, others) -> Dict[str, int]:
    """Split each path's slack to minimise per-PCPU utilization.

    On a PCPU with spare utilization A, periods T_i = sqrt(w_i) * S / A with
    S the sum of sqrt(w) over its pipes give the smallest period sum that
    still fits; the shares are then stretched to fill the path's slack.
    Pipes whose share exceeds the rate cap are frozen at the cap and the
    rest is split again.
    """
    pcpu = {pid: graph.pipes[pid].pcpu for pid in free}
    per = vcpus_by_pcpu([fixed, *others], extra)
    count = {q: len(vs) for q, vs in per.items()}
    for pid in free:
        count[pcpu[pid]] = count.get(pcpu[pid], 0) + 1
    spare = {}
    for q, n in count.items():
        limit = 1.0 if scheduler == "edf" else n * (2.0 ** (1.0 / n) - 1.0)
        spare[q] = limit - float(sum(v.utilization for v in per.get(q, [])))
    w = {pid: float(graph.pipes[pid].function.wcet) for pid in free}
    out: Dict[str, int] = {}
    for path in graph.paths():
        on = [x for x in path if x in free]
        slack = graph.qos.e2e_delay - sum(fixed_periods.get(x, 0) for x in path)
        room = dict(spare)
        share: Dict[str, float] = {}
        while on:
            if any(room[pcpu[x]] <= 0 for x in on):
                share.update({x: slack / len(on) for x in on})
                break
            roots = {}
            for x in on:
                roots[pcpu[x]] = roots.get(pcpu[x], 0.0) + math.sqrt(w[x])
            base = {x: math.sqrt(w[x]) * roots[pcpu[x]] / room[pcpu[x]] for x in on}
            scale = slack / sum(base.values())
            trial = {x: v * scale for x, v in base.items()}
            over = [x for x in on if cap is not None and trial[x] > cap]
            if not over:
                share.update(trial)
                break
            for x in over:
                share[x] = cap
                slack -= cap
                room[pcpu[x]] -= w[x] / cap
                on.remove(x)
        for x, v in share.items():
            v = max(1, math.floor(v))
            out[x] = min(out.get(x, v), v)
    return out


def _down(v: int, q: int) -> int:
    return v // q * q


def _up(v: int, q: int) -> int:
    return -(-v // q) * q


def _attempt(graph, params, free, scheduler, alpha, extra, others, fixed, q, weighted) -> TunedAssignment:
    params = dict(params)
    qos = graph.qos

    # (1) rate-matched initialisation
    if free:
        if qos.best_effort:
            for pid in free:
                f = graph.pipes[pid].function
                params[pid] = PipeParams(f.wcet, f.period_default, 1, graph.pipes[pid].pcpu, pid)
        else:
            init = _initial_periods(graph, params, free, fixed, weighted, scheduler, extra, others)
            for pid in free:
                f = graph.pipes[pid].function
                period = max(_down(init[pid], q), _up(f.wcet + 1, q))
                params[pid] = PipeParams(f.wcet, period, 1, graph.pipes[pid].pcpu, pid)

    t = _Tuner(graph, params, scheduler, extra, others, q)
    if weighted and free and not qos.best_effort:
        t.spend_slack(free)

    # (2) stretch all free periods until every PCPU is schedulable
    scalings = 0
    while free and not t.schedulable():
        if scalings >= MAX_SCALINGS:
            raise NonConvergent(f"no schedulable period scaling after {MAX_SCALINGS} rounds")
        for pid in free:
            pp = t.params[pid]
            t.set(pid, pp.batch, _up(math.ceil(pp.period * alpha), q))
        scalings += 1
    if scalings:
        logger.debug("periods scaled %d times by %.3f", scalings, alpha)

    if free and not qos.best_effort and not t.qos_ok():
        _reduce_latency(t, graph, set(free))

    # (5) FIFO sizing
    assignment = t.snapshot()
    if graph.mode is Mode.FIFO:
        for e in graph.edges:
            pp, pc = assignment.pipes[e.producer], assignment.pipes[e.consumer]
            assignment.buffers[(e.producer, e.consumer)] = size_fifo_buffer(
                (pp.batch, pp.period), (pc.batch, pc.period))

    # (6) independent re-check
    assignment.graph_hash = graph_hash(graph)
    assignment.achieved = achieved_bounds(graph, assignment)
    assignment.violations = check_conditions(graph, assignment, scheduler, extra, others)
    assignment.feasible = not assignment.violations
    if not assignment.feasible:
        raise Infeasible(assignment.violations[0], assignment)
    return assignment


def _reduce_latency(t: _Tuner, graph: PipelineGraph, free: set) -> None:
    fifo = graph.mode is Mode.FIFO
    order = {pid: i for i, pid in enumerate(graph.topological_order())}
    edges = sorted(graph.task_edges(), key=lambda e: (order[e.producer], order[e.consumer]))

    # (3) from the input forward: halve T_p, double the consumer's batch
    for e in edges:
        p, c = e.producer, e.consumer
        if p not in free:
            continue
        for _ in range(MAX_HALVINGS):
            if t.qos_ok():
                return
            pp, pc = t.params[p], t.params[c]
            half = _down(pp.period // 2, t.q)
            changes = [(p, pp.batch, half)]
            if fifo and c in free:
                changes.append((c, pc.batch * 2, pc.period))
            if half < 1 or not t.trial(changes, None if fifo else t.rate_ok):
                break
        else:
            raise NonConvergent(f"edge {p}->{c}: {MAX_HALVINGS} halvings without settling")

    # (4) shrink batched consumers back towards one message per period
    if not fifo:
        return
    for pid in sorted(free, key=order.get):
        for _ in range(MAX_HALVINGS):
            if t.qos_ok():
                return
            pc = t.params[pid]
            half = _down(pc.period // 2, t.q)
            if pc.batch < 2 or half < 1 or not t.trial([(pid, pc.batch // 2, half)]):
                break


def achieved_bounds(graph: PipelineGraph, assignment: TunedAssignment) -> Dict[str, object]:
    bounds = e2e_delay_bound(graph, assignment)
    out: Dict[str, object] = {"delay_us": max(bounds.values()) if bounds else 0,
                              "paths": {">".join(k): v for k, v in bounds.items()}}
    if graph.mode is Mode.FIFO:
        out["min_tput"] = min_throughput(graph, assignment)
    else:
        out["max_loss"] = max_loss_rate(graph, assignment)
    return out
