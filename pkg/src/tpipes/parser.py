"""Pipeline specification language.

    pipeline := ['*'] stage ('|' stage)* [qos]
    stage    := chain (',' chain)*
    chain    := NAME | '(' NAME ('|' NAME)* ')'
    qos      := '[' value [unit] ',' value unit ']'

A leading ``*`` selects lossless FIFO buffering and makes the first QoS value
a throughput (``/s``); otherwise buffering is four-slot and the first value
is a loss fraction. Adjacent stages are fully cross-connected.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .model import (
    BEST_EFFORT,
    Edge,
    FunctionRepository,
    Mode,
    PipelineGraph,
    QosSpec,
    make_task_pipe,
)


class ParseError(Exception):
    def __init__(self, position: int, message: str):
        super().__init__(f"at {position}: {message}")
        self.position = position


class SpecSyntaxError(ParseError):
    def __init__(self, position: int, expected: str):
        super().__init__(position, f"expected {expected}")
        self.expected = expected


class EmptyStage(ParseError):
    def __init__(self, position: int):
        super().__init__(position, "empty stage")


class UnknownFunction(ParseError):
    def __init__(self, position: int, name: str):
        super().__init__(position, f"unknown function {name!r}")
        self.name = name


class NotStageStructured(Exception):
    pass


class Tok(enum.Enum):
    STAR = "*"
    NAME = "name"
    PIPE = "|"
    COMMA = ","
    LPAREN = "("
    RPAREN = ")"
    LBRACKET = "["
    RBRACKET = "]"
    NUMBER = "number"
    UNIT = "unit"
    SLASH = "/"
    END = "end"


@dataclass(frozen=True)
class SpecToken:
    kind: Tok
    text: str
    position: int


_PUNCT = {"*": Tok.STAR, "|": Tok.PIPE, ",": Tok.COMMA, "(": Tok.LPAREN,
          ")": Tok.RPAREN, "[": Tok.LBRACKET, "]": Tok.RBRACKET, "/": Tok.SLASH}
_NUMBER = re.compile(r"\d+(\.\d+)?([eE][-+]?\d+)?")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_UNITS = {"us", "ms", "s"}


def tokenize(text: str) -> List[SpecToken]:
    toks: List[SpecToken] = []
    i, n = 0, len(text)
    in_qos = False
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in _PUNCT:
            kind = _PUNCT[c]
            if kind is Tok.LBRACKET:
                in_qos = True
            elif kind is Tok.RBRACKET:
                in_qos = False
            toks.append(SpecToken(kind, c, i))
            i += 1
            continue
        m = _NUMBER.match(text, i)
        if m and (in_qos or not _WORD.match(text, i)):
            toks.append(SpecToken(Tok.NUMBER, m.group(), i))
            i = m.end()
            continue
        m = _WORD.match(text, i)
        if m:
            word = m.group()
            kind = Tok.UNIT if in_qos and word in _UNITS else Tok.NAME
            toks.append(SpecToken(kind, word, i))
            i = m.end()
            continue
        raise SpecSyntaxError(i, "name, operator or QoS clause")
    toks.append(SpecToken(Tok.END, "", n))
    return toks


@dataclass(frozen=True)
class QosClause:
    first: float
    first_unit: Optional[str]
    delay: float
    delay_unit: str


@dataclass(frozen=True)
class SpecAst:
    lossless: bool
    # stage -> chains -> (name, position)
    stages: Tuple[Tuple[Tuple[Tuple[str, int], ...], ...], ...]
    qos: Optional[QosClause]


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def cur(self) -> SpecToken:
        return self.toks[self.i]

    def take(self, kind: Tok, expected: str) -> SpecToken:
        tok = self.cur
        if tok.kind is not kind:
            raise SpecSyntaxError(tok.position, expected)
        self.i += 1
        return tok

    def parse(self) -> SpecAst:
        lossless = False
        if self.cur.kind is Tok.STAR:
            lossless = True
            self.i += 1
        stages = [self.stage()]
        while self.cur.kind is Tok.PIPE:
            self.i += 1
            stages.append(self.stage())
        qos = None
        if self.cur.kind is Tok.LBRACKET:
            qos = self.qos()
        if self.cur.kind is not Tok.END:
            raise SpecSyntaxError(self.cur.position, "'|', ',' or end of input")
        return SpecAst(lossless, tuple(stages), qos)

    def stage(self):
        if self.cur.kind in (Tok.PIPE, Tok.COMMA):
            raise EmptyStage(self.cur.position)
        chains = [self.chain()]
        while self.cur.kind is Tok.COMMA:
            self.i += 1
            chains.append(self.chain())
        return tuple(chains)

    def chain(self):
        tok = self.cur
        if tok.kind is Tok.NAME:
            self.i += 1
            return ((tok.text, tok.position),)
        if tok.kind is Tok.LPAREN:
            self.i += 1
            if self.cur.kind is Tok.RPAREN:
                raise EmptyStage(self.cur.position)
            names = [self.take(Tok.NAME, "name inside group")]
            while self.cur.kind is Tok.PIPE:
                self.i += 1
                names.append(self.take(Tok.NAME, "name after '|' inside group"))
            self.take(Tok.RPAREN, "')' (groups hold a single '|' chain)")
            return tuple((t.text, t.position) for t in names)
        raise SpecSyntaxError(tok.position, "chain (name or '(')")

    def value(self) -> Tuple[float, Optional[str]]:
        num = self.take(Tok.NUMBER, "number")
        unit = None
        if self.cur.kind is Tok.SLASH:
            self.i += 1
            u = self.take(Tok.UNIT, "'s' after '/'")
            if u.text != "s":
                raise SpecSyntaxError(u.position, "'/s'")
            unit = "/s"
        elif self.cur.kind is Tok.UNIT:
            unit = self.cur.text
            self.i += 1
        return float(num.text), unit

    def qos(self) -> QosClause:
        self.take(Tok.LBRACKET, "'['")
        first, first_unit = self.value()
        self.take(Tok.COMMA, "',' (exactly one of throughput or loss rate)")
        delay_pos = self.cur.position
        delay, unit = self.value()
        if unit not in ("us", "ms", "s"):
            raise SpecSyntaxError(delay_pos, "delay with unit us, ms or s")
        self.take(Tok.RBRACKET, "']'")
        return QosClause(first, first_unit, delay, unit)


def parse_ast(text: str) -> SpecAst:
    return _Parser(text).parse()


_TO_US = {"us": 1, "ms": 1000, "s": 1_000_000}


def _qos_from_clause(clause: Optional[QosClause], lossless: bool, pos: int) -> QosSpec:
    if clause is None:
        return BEST_EFFORT
    delay = round(clause.delay * _TO_US[clause.delay_unit])
    if delay <= 0:
        raise SpecSyntaxError(pos, "positive delay")
    if lossless:
        if clause.first_unit not in (None, "/s") or clause.first <= 0:
            raise SpecSyntaxError(pos, "positive throughput in msgs/s")
        return QosSpec(e2e_delay=delay, e2e_tput=clause.first)
    if clause.first_unit is not None or not 0 <= clause.first <= 1:
        raise SpecSyntaxError(pos, "loss rate fraction in [0, 1]")
    return QosSpec(e2e_delay=delay, loss_rate=clause.first)


def parse_pipeline(text: str, repo: FunctionRepository, name: str = "pipeline") -> PipelineGraph:
    ast = parse_ast(text)
    qpos = text.find("[")
    qos = _qos_from_clause(ast.qos, ast.lossless, max(qpos, 0))
    mode = Mode.FIFO if ast.lossless else Mode.ASYNC
    kind = mode.buffer_kind

    pipes = {}
    seen: Dict[str, int] = {}
    stage_chains: List[List[List[str]]] = []
    for stage in ast.stages:
        chains = []
        for chain in stage:
            ids = []
            for fname, pos in chain:
                if fname not in repo:
                    raise UnknownFunction(pos, fname)
                seen[fname] = seen.get(fname, 0) + 1
                pid = fname if seen[fname] == 1 else f"{fname}#{seen[fname]}"
                pipes[pid] = make_task_pipe(pid, repo.get(fname), len(pipes))
                ids.append(pid)
            chains.append(ids)
        stage_chains.append(chains)

    edges: List[Edge] = []
    for chains in stage_chains:
        for ids in chains:
            edges.extend(Edge(a, b, kind) for a, b in zip(ids, ids[1:]))
    for left, right in zip(stage_chains, stage_chains[1:]):
        for lc in left:
            for rc in right:
                edges.append(Edge(lc[-1], rc[0], kind))
    return PipelineGraph(pipes, edges, mode, qos, name)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def unparse(graph: PipelineGraph) -> str:
    """Render the task-pipe part of ``graph`` in the pipeline spec language.

    Raises NotStageStructured when the edges are not a stage-wise full
    cross-connection of linear chains.
    """
    tasks = {p.id for p in graph.task_pipes}
    succ = {t: [s for s in graph.successors(t) if s in tasks] for t in tasks}
    pred = {t: [s for s in graph.predecessors(t) if s in tasks] for t in tasks}

    def continues(a: str) -> Optional[str]:
        if len(succ[a]) == 1:
            b = succ[a][0]
            if len(pred[b]) == 1:
                return b
        return None

    heads = sorted(t for t in tasks if not (len(pred[t]) == 1 and continues(pred[t][0]) == t))
    chains: Dict[str, List[str]] = {}
    covered = set()
    for h in heads:
        ids = [h]
        while (nxt := continues(ids[-1])) is not None:
            ids.append(nxt)
        chains[h] = ids
        covered.update(ids)
    if covered != tasks:
        raise NotStageStructured("cycle among task pipes")

    tail_of = {c[-1]: h for h, c in chains.items()}
    level: Dict[str, int] = {}

    def lvl(h: str, depth: int = 0) -> int:
        if depth > len(chains):
            raise NotStageStructured("cycle among task pipes")
        if h not in level:
            preds = {tail_of[p] for p in pred[h]}
            levels = {lvl(p, depth + 1) for p in preds}
            if len(levels) > 1:
                raise NotStageStructured(f"{h} is fed from different stages")
            level[h] = levels.pop() + 1 if levels else 0
        return level[h]

    for h in chains:
        lvl(h)
    nstages = max(level.values()) + 1 if level else 0
    stages = [sorted(h for h in chains if level[h] == k) for k in range(nstages)]
    for k, heads_k in enumerate(stages):
        nxt = set(stages[k + 1]) if k + 1 < nstages else set()
        prv = {chains[h][-1] for h in stages[k - 1]} if k > 0 else set()
        for h in heads_k:
            if {s for s in succ[chains[h][-1]]} != nxt:
                raise NotStageStructured(f"{h} does not feed every chain of the next stage")
            if set(pred[h]) != prv:
                raise NotStageStructured(f"{h} is not fed by every chain of the previous stage")

    def fname(pid: str) -> str:
        return graph.pipes[pid].function.name

    def chain_text(ids: List[str]) -> str:
        if len(ids) == 1:
            return fname(ids[0])
        return "(" + " | ".join(fname(i) for i in ids) + ")"

    if all(len(s) == 1 for s in stages):
        body = " | ".join(fname(i) for s in stages for i in chains[s[0]])
    else:
        body = " | ".join(", ".join(chain_text(chains[h]) for h in s) for s in stages)
    text = ("*" if graph.mode is Mode.FIFO else "") + body
    q = graph.qos
    if not q.best_effort:
        first = f"{_fmt_num(q.e2e_tput)}/s" if graph.mode is Mode.FIFO else _fmt_num(q.loss_rate)
        text += f" [{first}, {q.e2e_delay}us]"
    return text
