"""Shared builders and oracles for the test suite."""
from __future__ import annotations

import itertools
import math
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

from tpipes.analysis import schedulable
from tpipes.model import (
    Edge,
    FunctionProfile,
    FunctionRepository,
    Mode,
    PipelineGraph,
    Role,
    VcpuParams,
    make_task_pipe,
)
from tpipes.parser import parse_pipeline


def repo_of(**wcets: int) -> FunctionRepository:
    return FunctionRepository(FunctionProfile(n, w) for n, w in wcets.items())


def chain(wcets: Sequence[int], spec_tail: str = "", fifo: bool = False,
          pcpus: Sequence[int] = ()) -> PipelineGraph:
    """A linear task pipeline F0 | F1 | ... with the given WCETs."""
    names = [f"F{i}" for i in range(len(wcets))]
    repo = FunctionRepository(FunctionProfile(n, w) for n, w in zip(names, wcets))
    g = parse_pipeline(("*" if fifo else "") + " | ".join(names) + spec_tail, repo, "g")
    if pcpus:
        pipes = dict(g.pipes)
        for pid, pcpu in zip(names, pcpus):
            p = pipes[pid]
            pipes[pid] = type(p)(p.id, p.kind, p.function, p.input_endpoint, p.output_endpoint,
                                 p.sandbox, pcpu)
        g = PipelineGraph(pipes, g.edges, g.mode, g.qos, g.name)
    return g


def dag(n: int, edges: Sequence[Tuple[int, int]], mode: Mode = Mode.ASYNC) -> PipelineGraph:
    """Graph on nodes N0..N{n-1} with edges i -> j (i < j), arity unconstrained."""
    pipes = {}
    for i in range(n):
        f = FunctionProfile(f"N{i}", 10, max_inputs=n, max_outputs=n, role=Role.INTERIOR)
        pipes[f"N{i}"] = make_task_pipe(f"N{i}", f, i)
    es = [Edge(f"N{a}", f"N{b}", mode.buffer_kind) for a, b in edges]
    return PipelineGraph(pipes, es, mode)


def brute_paths(g: PipelineGraph) -> List[Tuple[str, ...]]:
    """Every maximal path, found by extending all partial paths until none grows."""
    succ: Dict[str, List[str]] = {p: [] for p in g.pipes}
    pred: Dict[str, List[str]] = {p: [] for p in g.pipes}
    for e in g.edges:
        succ[e.producer].append(e.consumer)
        pred[e.consumer].append(e.producer)
    partial = [(p,) for p in g.pipes if not pred[p]]
    done = []
    while partial:
        nxt = []
        for path in partial:
            if succ[path[-1]]:
                nxt.extend(path + (s,) for s in succ[path[-1]])
            else:
                done.append(path)
        partial = nxt
    return sorted(done)


def grid_feasible(wcets: Sequence[int], pcpus: Sequence[int], delay: int, tput: float,
                  scheduler: str, step: int) -> bool:
    """Exhaustive search over periods that are multiples of ``step`` for a Fifo chain.

    For a fixed period the smallest batch meeting the rate minimises both the
    budget and the utilization, so only periods need enumerating; the last
    pipe is chosen through a prefix minimum over its admissible periods.
    """
    K = delay // step

    def best(w: int, T: int):
        m = max(1, math.ceil(Fraction(tput) * T / 1_000_000))
        return Fraction(m * w, T) if m * w < T else None

    opts = [[None] + [best(w, k * step) for k in range(1, K + 1)] for w in wcets]
    prefix, cur = [], None
    for o in opts[-1]:
        if o is not None and (cur is None or o < cur):
            cur = o
        prefix.append(cur)
    for ks in itertools.product(range(1, K + 1), repeat=len(wcets) - 1):
        rest = K - sum(ks)
        if rest < 1 or prefix[rest] is None:
            continue
        us = [opts[i][k] for i, k in enumerate(ks)]
        if None in us:
            continue
        us.append(prefix[rest])
        per: Dict[int, List[VcpuParams]] = {}
        for i, (u, pcpu) in enumerate(zip(us, pcpus)):
            # a stand-in reservation with the same utilization
            per.setdefault(pcpu, []).append(
                VcpuParams(f"v{i}", budget=u.numerator, period=u.denominator, pcpu=pcpu))
        if all(schedulable(vs, scheduler) for vs in per.values()):
            return True
    return False


def random_instance(rng) -> Tuple[PipelineGraph, str]:
    """A seeded random staged pipeline of at most 8 pipes on PCPUs 0-1, with a QoS spec."""
    while True:
        names, parts = [], []
        for s in range(rng.randint(1, 4)):
            chains = []
            for c in range(rng.randint(1, 2)):
                ids = [f"S{s}C{c}N{k}" for k in range(rng.randint(1, 2))]
                names += ids
                chains.append(ids[0] if len(ids) == 1 else "(" + " | ".join(ids) + ")")
            parts.append(", ".join(chains))
        if len(names) <= 8:
            break
    repo = FunctionRepository(
        FunctionProfile(n, rng.choice([50, 100, 200, 500]), max_inputs=2, max_outputs=2)
        for n in names)
    fifo = rng.random() < 0.5
    delay = rng.randint(2, 40) * 1000
    if fifo:
        qos = f"[{rng.choice([50, 100, 125, 250, 500])}/s, {delay}us]"
    else:
        qos = f"[{rng.choice([0, 0.1, 0.2, 0.5])}, {delay}us]"
    g = parse_pipeline(("*" if fifo else "") + " | ".join(parts) + " " + qos, repo, "r")
    pipes = {}
    for pid, p in g.pipes.items():
        pipes[pid] = type(p)(p.id, p.kind, p.function, p.input_endpoint, p.output_endpoint,
                             p.sandbox, rng.randint(0, 1))
    return PipelineGraph(pipes, g.edges, g.mode, g.qos, g.name), rng.choice(["edf", "rms"])
