"""tpipes command line: check | solve | simulate | stress | sweep.

Exit codes: 0 pass, 1 user error, 2 bound violation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
import time
from typing import List, Optional, Sequence

from . import comm
from .analysis import EDF, RMS, TunedAssignment, size_fifo_buffer
from .metrics import audit_trace, collect_metrics
from .model import Mode
from .parser import ParseError
from .report import (
    buffer_rows,
    format_table,
    latency_table,
    read_assignment,
    utilization_rows,
    verdicts,
    write_assignment,
)
from .scenario import Scenario, ScenarioError, load
from .sim import ConfigMismatch, SimError
from .solver import Infeasible, NonConvergent

OK, USER_ERROR, VIOLATION = 0, 1, 2


class UsageError(Exception):
    pass


def _scenario(args) -> Scenario:
    sc = load(args.scenario)
    if getattr(args, "seed", None) is not None:
        sc.seed = args.seed
    if getattr(args, "horizon", None) is not None:
        sc.horizon = round(args.horizon * 1_000_000)
    if getattr(args, "scheduler", None):
        sc.scheduler = args.scheduler
    if getattr(args, "alpha", None) is not None:
        sc.alpha = args.alpha
    return sc


def _reference_buffers(sc: Scenario):
    return {d.name: d.reference_buffers for d in sc.pipelines if d.reference_buffers}


def cmd_check(args, out) -> int:
    sc = _scenario(args)
    graphs = sc.graphs()
    for g in graphs:
        tasks = [p.id for p in g.task_pipes]
        print(f"pipeline {g.name}: {g.mode.value}, {len(tasks)} task pipes, "
              f"{len(g.device_pipes)} device pipes, {len(g.paths())} paths", file=out)
        for path in g.paths():
            print(f"  path {'>'.join(path)}", file=out)
    # fixed load: device VCPUs, background and pinned pipes
    from .solver import device_params, pinned_params
    fixed: List[TunedAssignment] = []
    unpinned = 0
    for decl, g in zip(sc.pipelines, graphs):
        params = device_params(g, sc.vcpus)
        params.update(pinned_params(g, decl.pins))
        unpinned += sum(1 for p in g.task_pipes if p.id not in params)
        fixed.append(TunedAssignment(params))
    rows = utilization_rows(fixed, sc.background)
    print(format_table(["pcpu", "utilization", "vcpus", "rms_schedulable", "edf_schedulable"],
                       [[p, f"{float(u):.6f}", n, str(r).lower(), str(e).lower()]
                        for p, u, n, r, e in rows]), file=out)
    if unpinned:
        print(f"{unpinned} unpinned task pipe(s) are tuned by 'solve'", file=out)
    ok = all((r if sc.scheduler == RMS else e) for _, _, _, r, e in rows)
    print(f"scheduler {sc.scheduler}: {'schedulable' if ok else 'NOT schedulable'}", file=out)
    return OK if ok else USER_ERROR


def _solve(sc: Scenario, out):
    solved = sc.solve()
    for decl, (g, a) in zip(sc.pipelines, solved):
        q = g.qos
        print(f"pipeline {g.name} (graph {a.graph_hash}):", file=out)
        rows = [[pid, pp.budget, pp.period, pp.batch, pp.pcpu, "pinned" if pid in decl.pins else "tuned"]
                for pid, pp in sorted(a.pipes.items()) if g.pipes[pid].is_task]
        print(format_table(["pipe", "C(us)", "T(us)", "batch", "pcpu", "source"], rows), file=out)
        if q.best_effort:
            print("  requested: none requested (best effort)", file=out)
        else:
            second = (f"throughput >= {q.e2e_tput}/s" if g.mode is Mode.FIFO
                      else f"loss <= {q.loss_rate}")
            print(f"  requested: delay <= {q.e2e_delay}us, {second}", file=out)
        ach = a.achieved
        second = (f"min throughput {ach['min_tput']:.2f}/s" if "min_tput" in ach
                  else f"max loss {ach['max_loss']:.4f}")
        print(f"  achieved:  delay bound {ach['delay_us']}us, {second}", file=out)
    rows = buffer_rows(solved, _reference_buffers(sc))
    if rows:
        print(format_table(["graph", "edge", "formula slots", "reference slots"], rows), file=out)
    return solved


def cmd_solve(args, out) -> int:
    sc = _scenario(args)
    try:
        solved = _solve(sc, out)
    except Infeasible as exc:
        print(f"Infeasible: {exc.condition}", file=out)
        return VIOLATION
    except NonConvergent as exc:
        print(f"NonConvergent: {exc}", file=out)
        return VIOLATION
    if args.out:
        files = write_assignment(solved, args.out, _reference_buffers(sc))
        for f in files.values():
            print(f"wrote {f}", file=out)
    return OK


def _simulate(sc: Scenario, assignment_path: Optional[str], out_dir: Optional[str], out,
              quiet: bool = False):
    graphs = sc.graphs()
    if assignment_path:
        loaded = read_assignment(assignment_path)
        solved = []
        for g in graphs:
            if g.name not in loaded:
                raise ConfigMismatch(f"assignment has no entry for pipeline {g.name}")
            solved.append((g, loaded[g.name]))
    else:
        solved = sc.solve()
    t0 = time.perf_counter()
    trace = sc.simulate(solved=solved)
    elapsed = time.perf_counter() - t0
    metrics = collect_metrics(trace)
    audit = audit_trace(trace)
    if out_dir:
        trace.write(out_dir)
        metrics.write(out_dir)
    byname = {g.name: g for g in graphs}
    if not quiet:
        print(f"{sc.name}: {trace.horizon / 1e6:g}s simulated in {elapsed:.2f}s "
              f"({sc.scheduler}, seed {trace.meta['seed']})", file=out)
        print(latency_table(metrics, byname), file=out)
        blocks = sum(1 for e in trace.events if e.kind == "block")
        starves = sum(1 for e in trace.events if e.kind == "starve")
        print(f"fifo events: {blocks} producer blocks, {starves} consumer starvations", file=out)
        if audit.ok:
            print("audit: PASS", file=out)
        else:
            print(f"audit: FAIL ({len(audit.violations)} violations)", file=out)
            for v in audit.violations[:20]:
                print(f"  {v}", file=out)
        for n in audit.notes:
            print(f"note: {n}", file=out)
        if out_dir:
            print(f"wrote trace and metrics CSVs to {out_dir}", file=out)
    passed = audit.ok and all(ok for _, ok, _ in verdicts(metrics, byname))
    return trace, metrics, passed


def cmd_simulate(args, out) -> int:
    sc = _scenario(args)
    try:
        _, _, passed = _simulate(sc, args.assignment, args.out, out)
    except Infeasible as exc:
        print(f"Infeasible: {exc.condition}", file=out)
        return VIOLATION
    return OK if passed else VIOLATION


def cmd_stress(args, out) -> int:
    if args.primitive == "fourslot":
        rep = comm.fourslot_stress(args.ops, args.seed)
        print(format_table(["writes", "reads", "integrity", "freshness", "order",
                            "max_write_steps", "max_read_steps"],
                           [[rep.writes, rep.reads, rep.integrity_failures, rep.freshness_failures,
                             rep.order_failures, rep.max_write_steps, rep.max_read_steps]]), file=out)
        enum = comm.enumerate_fourslot(2, 2)
        print(f"interleavings: {enum.states} states, {enum.reads_checked} reads checked, "
              f"{len(enum.violations)} violations", file=out)
        return OK if rep.violations == 0 and not enum.violations else VIOLATION
    tp, tc = args.producer_period_us, args.consumer_period_us
    capacity = args.capacity
    if capacity is None:
        capacity = size_fifo_buffer((args.batch_producer, max(tp, 1)), (args.batch_consumer, max(tc, 1)))
    rep = comm.fifo_stress(args.ops, capacity, tp / 1e6, tc / 1e6, args.batch_producer,
                           args.batch_consumer, args.timeout_ms / 1e3)
    print(format_table(["capacity", "pushed", "popped", "timed_out", "order", "producer_blocks"],
                       [[rep.capacity, rep.pushed, rep.popped, rep.timed_out, rep.order_failures,
                         rep.producer_blocks]]), file=out)
    return OK if rep.violations == 0 and rep.timed_out == 0 else VIOLATION


def _values(args) -> List[str]:
    if args.values:
        return [v.strip() for v in args.values.split(",") if v.strip()]
    start, stop, step = (float(x) for x in args.range.split(":"))
    if step <= 0:
        raise UsageError("--range step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [repr(round(start + i * step, 12)) for i in range(max(n, 0))]


def _apply_param(sc: Scenario, param: str, value: str) -> None:
    if param in ("alpha", "horizon", "seed", "scheduler"):
        if param == "alpha":
            sc.alpha = float(value)
        elif param == "horizon":
            sc.horizon = round(float(value) * 1_000_000)
        elif param == "seed":
            sc.seed = int(float(value))
        else:
            sc.scheduler = value
        return
    field_name, _, src = param.partition(".")
    if field_name in ("rate", "jitter", "offset") and src in sc.workload:
        spec = sc.workload[src]
        v = float(value) if field_name == "rate" else int(float(value))
        sc.workload[src] = dataclasses.replace(spec, **{field_name: v})
        return
    raise UsageError(f"cannot sweep {param!r}; use alpha, horizon, seed, scheduler, "
                     f"rate.SRC, jitter.SRC or offset.SRC")


def cmd_sweep(args, out) -> int:
    values = _values(args)
    rows = []
    worst = OK
    for value in values:
        sc = _scenario(args)
        _apply_param(sc, args.param, value)
        try:
            _, metrics, passed = _simulate(sc, None, None, out, quiet=True)
        except Infeasible as exc:
            rows.append([args.param, value, "", "", "", "", "", "", "", "", f"infeasible: {exc.condition}"])
            worst = VIOLATION
            continue
        for pm in metrics.paths:
            rows.append([args.param, value, pm.graph, pm.path, pm.offered, pm.lost,
                         "" if pm.max_us is None else pm.max_us,
                         "" if pm.mean_us is None else f"{pm.mean_us:.3f}",
                         f"{pm.throughput:.3f}", pm.bound_us, "pass" if passed else "fail"])
        if not passed:
            worst = VIOLATION
        print(f"{args.param}={value}: {'PASS' if passed else 'FAIL'}", file=out)
    header = ["param", "value", "graph", "path", "offered", "lost", "max_us", "mean_us",
              "throughput", "bound_us", "verdict"]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "sweep.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        print(f"wrote {path}", file=out)
    return worst


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tpipes", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, solve=True):
        p.add_argument("scenario", help="shipped scenario name or path to an .ini file")
        p.add_argument("--scheduler", choices=[RMS, EDF])
        if solve:
            p.add_argument("--alpha", type=float, help="period scaling factor (> 1)")
        p.add_argument("--out", help="output directory for CSV files")

    p = sub.add_parser("check", help="validate a scenario and report per-PCPU utilization")
    common(p, solve=False)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("solve", help="tune budgets and periods, write assignment CSV")
    common(p)
    p.set_defaults(fn=cmd_solve)

    for name, fn, helptext in (("simulate", cmd_simulate, "simulate and summarise latency/loss"),
                               ("sweep", cmd_sweep, "vary one parameter and collect metrics")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--seed", type=int)
        p.add_argument("--horizon", type=float, help="simulated seconds")
        if name == "simulate":
            p.add_argument("--assignment", help="assignment.csv (or its directory) from 'solve'")
        else:
            p.add_argument("--param", required=True,
                           help="alpha | horizon | seed | scheduler | rate.SRC | jitter.SRC | offset.SRC")
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--values", help="comma-separated values")
            g.add_argument("--range", help="start:stop:step")
        p.set_defaults(fn=fn)

    p = sub.add_parser("stress", help="concurrent stress of the communication primitives")
    p.add_argument("primitive", choices=["fourslot", "fifo"])
    p.add_argument("--ops", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity", type=int, help="fifo slots (default: sizing formula)")
    p.add_argument("--producer-period-us", type=int, default=0)
    p.add_argument("--consumer-period-us", type=int, default=0)
    p.add_argument("--batch-producer", type=int, default=1)
    p.add_argument("--batch-consumer", type=int, default=1)
    p.add_argument("--timeout-ms", type=float, default=1000.0)
    p.set_defaults(fn=cmd_stress)
    return ap


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USER_ERROR if exc.code else OK
    try:
        return args.fn(args, out)
    except ParseError as exc:
        print(f"{type(exc).__name__}: {exc}", file=out)
    except (ScenarioError, ConfigMismatch, UsageError, SimError, ValueError, OSError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=out)
    return USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
