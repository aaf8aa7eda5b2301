"""Discrete-event simulation of tuned pipelines on reserved VCPUs.

Time is integer microseconds. Each PCPU runs the highest-priority ready VCPU
(shortest period under RMS, earliest deadline under EDF; ties go to the lower
rank, then the lower name). Main VCPUs follow sporadic-server accounting:
every run chunk posts a replenishment of the consumed amount at chunk start
plus the period. IO VCPUs are activated by device work, get U_IO x T_Main of
budget and a single replenishment one period after activation.

Task pipes are time-triggered: a job is released one period after the
previous job started. In Async mode every job runs for its full budget and
forwards whatever fresh messages it found. In Fifo mode a job takes up to its
batch of queued messages and is charged per message; an empty queue skips the
period. Device pipes are event-driven and process one message per job.
"""
from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .analysis import EDF, RMS, TunedAssignment, e2e_delay_bound, graph_hash
from .model import Mode, PipelineGraph, VcpuKind, VcpuParams
from .trace import MessageRecord, PathRow, SchedEvent, TraceLog, VcpuRow


class SimError(Exception):
    pass


class ConfigMismatch(SimError):
    pass


class UnschedulableOverrun(SimError):
    pass


@dataclass(frozen=True)
class ArrivalSpec:
    """Message arrivals at one source.

    Periodic at ``rate`` messages/s starting at ``offset``, each arrival
    delayed by a seeded uniform draw in [0, jitter]. ``saturate`` instead
    offers a fresh message whenever the source pipe reads.
    """

    rate: float = 0.0
    jitter: int = 0
    offset: int = 0
    count: Optional[int] = None
    saturate: bool = False

    @property
    def period(self) -> int:
        return round(1_000_000 / self.rate)


@dataclass
class Platform:
    """VCPUs that exist independently of any single pipeline."""

    vcpus: Dict[str, VcpuParams] = field(default_factory=dict)
    background: List[VcpuParams] = field(default_factory=list)
    ranks: Dict[str, int] = field(default_factory=dict)
    # first release time of task VCPUs (default 0)
    offsets: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class SimOptions:
    ctx_switch: int = 0          # charged to the incoming VCPU on every dispatch
    exec_jitter: float = 0.0     # per-message work drawn uniformly in [(1-j)*wcet, wcet]
    xfer_latency: int = 0        # added to writes that cross a sandbox boundary
    drain: Optional[int] = None  # time after the horizon to let messages settle
    max_queue: int = 100_000
    record_ready: bool = True


Pipeline = Tuple[PipelineGraph, TunedAssignment]

_INF = float("inf")
_ARRIVE, _XFER, _REPL, _IOREPL, _RELEASE = range(5)
_TASK, _DEV, _BG = "task", "dev", "bg"


class _Msg:
    __slots__ = ("id", "src", "t_arr", "hops")

    def __init__(self, mid, src, t_arr, hops):
        self.id = mid
        self.src = src
        self.t_arr = t_arr
        self.hops = hops

    def fork(self) -> "_Msg":
        return _Msg(self.id, self.src, self.t_arr, list(self.hops))


class _Slot:
    """Four-slot register semantics: the latest value, read at most once."""

    __slots__ = ("msg", "t", "fresh", "consumer", "sim", "sandbox")
    is_queue = False
    saturating = False

    def __init__(self, consumer, sim, sandbox):
        self.msg = None
        self.t = 0
        self.fresh = False
        self.consumer = consumer
        self.sim = sim
        self.sandbox = sandbox

    def count(self) -> int:
        return 1 if self.fresh else 0

    def head_time(self) -> int:
        return self.t

    def put(self, msg: _Msg, now: int, producer=None) -> None:
        if self.fresh:
            self.sim._lost(self.msg, self.consumer.id)
        else:
            self.consumer.vcpu.pending += 1
            self.sim.dirty.add(self.consumer.vcpu.pcpu)
        self.msg, self.t, self.fresh = msg, now, True

    def take(self, now: int) -> _Msg:
        self.fresh = False
        self.consumer.vcpu.pending -= 1
        return self.msg


class _Queue:
    __slots__ = ("q", "cap", "consumer", "sim", "sandbox", "held", "held_by")
    is_queue = True
    saturating = False

    def __init__(self, consumer, sim, sandbox, cap=None):
        self.q = deque()
        self.cap = cap
        self.consumer = consumer
        self.sim = sim
        self.sandbox = sandbox
        self.held = deque()
        self.held_by = None

    def count(self) -> int:
        return len(self.q)

    def head_time(self) -> int:
        return self.q[0][0]

    def put(self, msg: _Msg, now: int, producer=None) -> None:
        if self.held or (self.cap is not None and len(self.q) >= self.cap):
            self.held.append(msg)
            if producer is not None and self.held_by is None:
                self.held_by = producer
                self.sim._block(producer.vcpu, self)
            return
        self.q.append((now, msg))
        self.consumer.vcpu.pending += 1
        self.sim.dirty.add(self.consumer.vcpu.pcpu)
        if len(self.q) > self.sim.opts.max_queue:
            raise UnschedulableOverrun(
                f"{self.consumer.id}: input queue exceeded {self.sim.opts.max_queue} messages")

    def take(self, now: int) -> _Msg:
        _, msg = self.q.popleft()
        self.consumer.vcpu.pending -= 1
        if self.held:
            self.q.append((now, self.held.popleft()))
            self.consumer.vcpu.pending += 1
            if not self.held:
                producer, self.held_by = self.held_by, None
                if producer is not None:
                    self.sim._unblock(producer.vcpu, self)
        return msg


class _Saturate:
    """A source that always has a fresh message."""

    __slots__ = ("source", "sim", "consumer")
    is_queue = False
    saturating = True

    def __init__(self, source, sim, consumer):
        self.source = source
        self.sim = sim
        self.consumer = consumer

    def count(self) -> int:
        return 1

    def head_time(self) -> int:
        return self.sim.now

    def take(self, now: int) -> _Msg:
        return self.sim._new_msg(self.source, now)


class _Node:
    __slots__ = ("id", "graph", "wcet", "batch", "inputs", "outputs", "vcpu",
                 "sandbox", "async_", "seen")

    def __init__(self, pid, graph, wcet, batch, sandbox, async_):
        self.id = pid
        self.graph = graph
        self.wcet = wcet
        self.batch = batch
        self.sandbox = sandbox
        self.async_ = async_
        self.inputs: list = []
        self.outputs: list = []
        self.vcpu = None
        self.seen = False


class _Vcpu:
    __slots__ = ("name", "kind", "style", "pcpu", "rank", "C", "T", "u_io", "budget",
                 "pending_repl", "io_armed", "chunk_start", "next_release", "job_left",
                 "job", "blocked", "was_ready", "deadline", "nodes", "pending", "row")

    def __init__(self, name, kind, style, pcpu, rank, budget, period, u_io=Fraction(0)):
        self.name = name
        self.kind = kind  # main | io | background
        self.style = style
        self.pcpu = pcpu
        self.rank = rank
        self.C = budget
        self.T = period
        self.u_io = u_io
        self.budget = budget
        self.pending_repl = 0
        self.io_armed = False
        self.chunk_start = None
        self.next_release = 0
        self.job_left = None
        self.job = None
        self.blocked = 0
        self.was_ready = False
        self.deadline = 0
        self.nodes: List[_Node] = []
        self.pending = 0


class Simulator:
    def __init__(self, pipelines: Sequence[Pipeline], platform: Platform,
                 workload: Mapping[str, ArrivalSpec], horizon: int, seed: int = 0,
                 scheduler: str = EDF, options: SimOptions = SimOptions()):
        if scheduler not in (RMS, EDF):
            raise ValueError(f"unknown scheduler {scheduler!r}")
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        self.pipelines = list(pipelines)
        self.platform = platform
        self.workload = dict(workload)
        self.horizon = horizon
        self.seed = seed
        self.edf = scheduler == EDF
        self.scheduler = scheduler
        self.opts = options
        self.now = 0
        self.dirty: set = set()
        self.heap: list = []
        self.seq = 0
        self.msg_seq = 0
        self.messages: List[MessageRecord] = []
        self.events: List[SchedEvent] = []
        self.vcpus: Dict[str, _Vcpu] = {}
        self.entries: Dict[str, list] = {}
        self.path_rows: List[PathRow] = []
        self._rng = random.Random(f"{seed}:exec")
        self._build()

    # -- construction --------------------------------------------------------

    def _build(self) -> None:
        ranks = self.platform.ranks
        order: List[str] = []

        def rank_of(name: str) -> int:
            return ranks.get(name, 0)

        def add(v: _Vcpu) -> _Vcpu:
            self.vcpus[v.name] = v
            order.append(v.name)
            return v

        for v in self.platform.background:
            add(_Vcpu(v.name, "background", _BG, v.pcpu, rank_of(v.name), v.budget, v.period))
            self.vcpus[v.name].next_release = v.offset

        task_names: Dict[str, int] = {}
        for g, _ in self.pipelines:
            for p in g.task_pipes:
                task_names[p.id] = task_names.get(p.id, 0) + 1

        max_bound = 0
        for g, a in self.pipelines:
            if a.graph_hash and a.graph_hash != graph_hash(g):
                raise ConfigMismatch(f"{g.name}: assignment was solved for a different graph")
            missing = [p.id for p in g.task_pipes if p.id not in a.pipes]
            if missing:
                raise ConfigMismatch(f"{g.name}: no parameters for {', '.join(missing)}")
            async_ = g.mode is Mode.ASYNC
            nodes: Dict[str, _Node] = {}
            for pid, p in g.pipes.items():
                if p.is_task:
                    pp = a.pipes[pid]
                    if pp.budget != pp.batch * p.function.wcet:
                        raise ConfigMismatch(f"{pid}: budget {pp.budget} != batch x wcet")
                    node = _Node(pid, g.name, p.function.wcet, pp.batch, p.sandbox, async_)
                    name = pid if task_names[pid] == 1 else f"{g.name}.{pid}"
                    v = add(_Vcpu(name, "main", _TASK, pp.pcpu, rank_of(name), pp.budget, pp.period))
                    v.next_release = self.platform.offsets.get(name, 0)
                else:
                    if p.vcpu not in self.platform.vcpus:
                        raise ConfigMismatch(f"{pid}: unknown device VCPU {p.vcpu!r}")
                    node = _Node(pid, g.name, p.function.wcet, 1, p.sandbox, async_)
                    v = self.vcpus.get(p.vcpu) or add(self._device_vcpu(p.vcpu, rank_of(p.vcpu)))
                node.vcpu = v
                v.nodes.append(node)
                nodes[pid] = node
            for pid in g.pipes:
                node = nodes[pid]
                for succ in g.successors(pid):
                    c = nodes[succ]
                    if async_:
                        buf = _Slot(c, self, c.sandbox)
                    else:
                        buf = _Queue(c, self, c.sandbox, a.buffers.get((pid, succ)))
                    node.outputs.append(buf)
                    c.inputs.append(buf)
            for pid in g.sources():
                node = nodes[pid]
                p = g.pipes[pid]
                src = p.device if (not p.is_task and p.device) else pid
                spec = self.workload.get(src)
                if spec is not None and spec.saturate:
                    if not p.is_task:
                        raise ConfigMismatch(f"{src}: device sources cannot saturate")
                    buf = _Saturate(src, self, node)
                elif p.is_task and async_:
                    buf = _Slot(node, self, node.sandbox)
                else:
                    buf = _Queue(node, self, node.sandbox)
                node.inputs.append(buf)
                self.entries.setdefault(src, []).append(buf)
            bounds = e2e_delay_bound(g, a)
            for path, b in bounds.items():
                self.path_rows.append(PathRow(g.name, path, b, a.feasible, g.mode.value))
                max_bound = max(max_bound, b)
        unknown = sorted(set(self.workload) - set(self.entries))
        if unknown:
            raise ConfigMismatch(f"workload names unknown sources: {', '.join(unknown)}")
        self.drain = self.opts.drain if self.opts.drain is not None else 2 * max_bound + 1000
        self.by_pcpu: Dict[int, List[_Vcpu]] = {}
        for name in order:
            v = self.vcpus[name]
            self.by_pcpu.setdefault(v.pcpu, []).append(v)
        for vs in self.by_pcpu.values():
            vs.sort(key=lambda v: (v.rank, v.name))
        self.running: Dict[int, Optional[_Vcpu]] = {p: None for p in sorted(self.by_pcpu)}
        self.order = order

    def _device_vcpu(self, name: str, rank: int) -> _Vcpu:
        vp = self.platform.vcpus[name]
        if vp.kind is VcpuKind.IO:
            served = self.platform.vcpus.get(vp.serves) if vp.serves else None
            period = served.period if served else vp.period
            full = max(1, int(vp.u_io * period))
            return _Vcpu(name, "io", _DEV, vp.pcpu, rank, full, period, vp.u_io)
        return _Vcpu(name, "main", _DEV, vp.pcpu, rank, vp.budget, vp.period)

    # -- bookkeeping ---------------------------------------------------------

    def _push(self, t: int, kind: int, a=None, b=None) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, kind, self.seq, a, b))

    def _log(self, v: _Vcpu, kind: str, detail: str = "", pcpu: Optional[int] = None) -> None:
        self.events.append(SchedEvent(self.now, v.pcpu if pcpu is None else pcpu,
                                      v.name if v else "", kind, detail))

    def _new_msg(self, src: str, now: int) -> _Msg:
        self.msg_seq += 1
        return _Msg(self.msg_seq, src, now, [])

    def _lost(self, msg: _Msg, at: str) -> None:
        self.messages.append(MessageRecord(msg.id, msg.src, msg.t_arr, tuple(msg.hops), None, at))

    def _block(self, v: _Vcpu, buf) -> None:
        v.blocked += 1
        self._log(v, "block", buf.consumer.id)

    def _unblock(self, v: _Vcpu, buf) -> None:
        v.blocked -= 1
        self.dirty.add(v.pcpu)
        self._log(v, "unblock", buf.consumer.id)

    def _work(self, wcet: int, n: int = 1) -> int:
        j = self.opts.exec_jitter
        if not j:
            return wcet * n
        lo = max(1, int(round(wcet * (1 - j))))
        return sum(self._rng.randint(lo, wcet) for _ in range(n))

    # -- job lifecycle -------------------------------------------------------

    def _start_job(self, v: _Vcpu) -> bool:
        now = self.now
        if v.style == _BG:
            v.job_left, v.job = v.C, None
            v.next_release = now + v.T
            self._push(v.next_release, _RELEASE, v)
            return True
        if v.style == _TASK:
            node = v.nodes[0]
            msgs = []
            if node.async_:
                for buf in node.inputs:
                    if len(msgs) < node.batch and buf.count():
                        msgs.append(buf.take(now))
            else:
                while len(msgs) < node.batch:
                    best = None
                    for buf in node.inputs:
                        if buf.count() and (best is None or buf.head_time() < best.head_time()):
                            best = buf
                    if best is None:
                        break
                    msgs.append(best.take(now))
            v.next_release = now + v.T
            self._push(v.next_release, _RELEASE, v)
            if not msgs and not node.async_:
                if node.seen:
                    self._log(v, "starve", node.id)
                return False
            node.seen = node.seen or bool(msgs)
            v.job = [(node, m, now) for m in msgs]
            v.job_left = v.C if node.async_ else self._work(node.wcet, len(msgs))
            return True
        # device: one message from the oldest non-empty input of any served node
        best, best_node = None, None
        for node in v.nodes:
            for buf in node.inputs:
                if buf.count() and (best is None or buf.head_time() < best.head_time()):
                    best, best_node = buf, node
        if best is None:
            return False
        v.job = [(best_node, best.take(now), now)]
        v.job_left = self._work(best_node.wcet)
        return True

    def _complete(self, v: _Vcpu) -> None:
        now = self.now
        job, v.job, v.job_left = v.job, None, None
        if not job:
            return
        for node, msg, t_read in job:
            msg.hops.append((node.id, t_read, now))
            outs = node.outputs
            if not outs:
                self.messages.append(MessageRecord(msg.id, msg.src, msg.t_arr,
                                                   tuple(msg.hops), now, None))
                continue
            last = len(outs) - 1
            for i, buf in enumerate(outs):
                m = msg if i == last else msg.fork()
                if self.opts.xfer_latency and buf.sandbox != node.sandbox:
                    self._push(now + self.opts.xfer_latency, _XFER, buf, (m, node))
                else:
                    buf.put(m, now, node)

    # -- scheduling ----------------------------------------------------------

    def _ready(self, v: _Vcpu) -> bool:
        if v.budget <= 0 or v.blocked:
            return False
        if v.job_left is not None:
            return True
        if v.style == _DEV:
            return v.pending > 0
        return self.now >= v.next_release

    def _switch_out(self, v: _Vcpu, reason: str) -> None:
        used = self.now - v.chunk_start
        if v.kind != "io" and used > 0:
            v.pending_repl += used
            if v.budget + v.pending_repl > v.C:
                raise AssertionError(f"{v.name}: budget {v.budget} + pending {v.pending_repl} > C {v.C}")
            self._push(v.chunk_start + v.T, _REPL, v, used)
        self._log(v, "stop", f"{reason}:{v.chunk_start}")
        v.chunk_start = None

    def _dispatch(self, p: int) -> None:
        now = self.now
        cur = self.running[p]
        vs = self.by_pcpu[p]
        edf = self.edf
        while True:
            best, bkey, ready = None, None, []
            for v in vs:
                # inlined _ready()
                if v.budget > 0 and not v.blocked and (
                        v.job_left is not None
                        or (v.pending > 0 if v.style is _DEV else now >= v.next_release)):
                    if not v.was_ready:
                        v.was_ready = True
                        v.deadline = now + v.T
                    key = (v.deadline if edf else v.T, v.rank, v.name)
                    ready.append((key, v))
                    if best is None or key < bkey:
                        best, bkey = v, key
                else:
                    v.was_ready = False
            if best is not None and best.job_left is None and best.style == _TASK:
                node = best.nodes[0]
                if not node.async_ and not any(b.count() for b in node.inputs):
                    # empty queue: the period is skipped at no cost
                    self._start_job(best)
                    best.was_ready = False
                    continue
            if best is not cur:
                if cur is not None:
                    if cur.budget <= 0:
                        reason = "deplete"
                    elif cur.blocked:
                        reason = "block"
                    elif self._ready(cur):
                        reason = "preempt"
                    else:
                        reason = "yield"
                    self._switch_out(cur, reason)
                self.running[p] = best
                if best is None:
                    self.events.append(SchedEvent(now, p, "", "idle", ""))
                    return
                best.chunk_start = now
                if best.kind == "io" and not best.io_armed:
                    best.io_armed = True
                    self._push(now + best.T, _IOREPL, best)
                    self._log(best, "activate", str(best.C))
                detail = ""
                if self.opts.record_ready:
                    detail = " ".join(f"{k[1].name}@{k[0][0]}" for k in sorted(ready, key=lambda r: r[0]))
                self._log(best, "dispatch", detail)
                if self.opts.ctx_switch and best.job_left is not None:
                    best.job_left += self.opts.ctx_switch
                cur = best
            if best is None:
                return
            if best.job_left is None:
                if not self._start_job(best):
                    continue
                if self.opts.ctx_switch and best.chunk_start == now:
                    best.job_left += self.opts.ctx_switch
            return

    # -- main loop -----------------------------------------------------------

    def _schedule_arrivals(self) -> None:
        for src in sorted(self.workload):
            spec = self.workload[src]
            if spec.saturate or spec.rate <= 0:
                continue
            rng = random.Random(f"{self.seed}:{src}")
            period = spec.period
            k = 0
            while spec.count is None or k < spec.count:
                base = spec.offset + k * period
                if base >= self.horizon:
                    break
                t = base + (rng.randint(0, spec.jitter) if spec.jitter else 0)
                self._push(t, _ARRIVE, src)
                k += 1

    def _apply(self, kind: int, a, b) -> None:
        now = self.now
        if kind == _ARRIVE:
            entries = self.entries[a]
            msg = self._new_msg(a, now)
            last = len(entries) - 1
            for i, buf in enumerate(entries):
                if buf.saturating:
                    continue
                buf.put(msg if i == last else msg.fork(), now)
        elif kind == _XFER:
            m, node = b
            a.put(m, now, node)
        elif kind == _REPL:
            a.pending_repl -= b
            a.budget += b
            self.dirty.add(a.pcpu)
        elif kind == _IOREPL:
            a.budget = a.C
            a.io_armed = False
            self.dirty.add(a.pcpu)
        else:
            self.dirty.add(a.pcpu)

    def run(self) -> TraceLog:
        self._schedule_arrivals()
        end = self.horizon + self.drain
        heap = self.heap
        running = self.running
        pcpus = list(running)
        for name in self.order:
            v = self.vcpus[name]
            if v.style != _DEV:
                self._push(v.next_release, _RELEASE, v)
        while True:
            t_next = heap[0][0] if heap else _INF
            for v in running.values():
                if v is not None:
                    tc = self.now + min(v.job_left, v.budget)
                    if tc < t_next:
                        t_next = tc
            if t_next == _INF or t_next > end:
                break
            dt = t_next - self.now
            if dt:
                for v in running.values():
                    if v is not None:
                        v.budget -= dt
                        v.job_left -= dt
            self.now = t_next
            dirty = self.dirty
            for v in running.values():
                if v is not None and (v.job_left == 0 or v.budget == 0):
                    dirty.add(v.pcpu)
                    if v.job_left == 0:
                        self._complete(v)
            while heap and heap[0][0] == t_next:
                _, kind, _, a, b = heapq.heappop(heap)
                self._apply(kind, a, b)
            while dirty:
                p = min(dirty)
                dirty.discard(p)
                self._dispatch(p)
        for p in pcpus:
            v = running[p]
            if v is not None:
                self._log(v, "stop", f"end:{v.chunk_start}")
        return self._trace()

    def _trace(self) -> TraceLog:
        t = TraceLog()
        t.meta = {"horizon": str(self.horizon), "end": str(self.now), "seed": str(self.seed),
                  "scheduler": self.scheduler, "drain": str(self.drain)}
        for name in self.order:
            v = self.vcpus[name]
            t.vcpus.append(VcpuRow(v.name, v.kind, v.C, v.T, v.u_io, v.pcpu, v.rank))
        t.paths = list(self.path_rows)
        t.messages = sorted(self.messages, key=lambda m: (m.msg_id, m.route))
        t.events = self.events
        return t


def run(pipelines: Union[Pipeline, Sequence[Pipeline]], platform: Optional[Platform] = None,
        workload: Optional[Mapping[str, ArrivalSpec]] = None, horizon: int = 1_000_000,
        seed: int = 0, scheduler: str = EDF, options: SimOptions = SimOptions()) -> TraceLog:
    """Simulate one or more tuned pipelines and return the trace."""
    if isinstance(pipelines, tuple) and len(pipelines) == 2 and isinstance(pipelines[0], PipelineGraph):
        pipelines = [pipelines]
    sim = Simulator(pipelines, platform or Platform(), workload or {}, horizon, seed,
                    scheduler, options)
    return sim.run()
