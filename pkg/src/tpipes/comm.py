"""Wait-free four-slot register and a bounded blocking FIFO.

The four-slot register follows Simpson's single-writer/single-reader
scheme: two pairs of two slots, a per-pair ``slot`` index, a ``latest``
pair written last and a ``reading`` pair claimed by the reader. Neither side
loops or waits. Control words are plain attributes; CPython's GIL makes each
store/load sequentially consistent.
"""
from __future__ import annotations

import random
import sys
import threading
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional, Tuple


class EmptyBeforeFirstWrite(LookupError):
    pass


class TimedOut(TimeoutError):
    pass


class IntegrityError(AssertionError):
    pass


def checksum(seq: int, body: bytes) -> int:
    return zlib.crc32(seq.to_bytes(8, "little") + body)


@dataclass(frozen=True)
class Message:
    seq: int
    body: bytes
    crc: int

    @classmethod
    def make(cls, seq: int, body: bytes) -> "Message":
        return cls(seq, body, checksum(seq, body))

    @property
    def intact(self) -> bool:
        return checksum(self.seq, self.body) == self.crc


class _Cell:
    """A message slot written field by field, so an unprotected concurrent
    read can observe a mix of two writes."""

    __slots__ = ("seq", "body", "crc")

    def __init__(self, size: int):
        self.seq = -1
        self.body = bytearray(size)
        self.crc = 0

    def store(self, msg: Message, yield_hook=None) -> None:
        self.seq = msg.seq
        if yield_hook:
            yield_hook()
        half = len(msg.body) // 2
        self.body[:half] = msg.body[:half]
        if yield_hook:
            yield_hook()
        self.body[half:] = msg.body[half:]
        self.crc = msg.crc

    def load(self, yield_hook=None) -> Message:
        seq = self.seq
        if yield_hook:
            yield_hook()
        body = bytes(self.body)
        return Message(seq, body, self.crc)


class FourSlotRegister:
    WRITE_STEPS = 5
    READ_STEPS = 4

    def __init__(self, payload_size: int = 32, yield_hook=None):
        if payload_size < 2:
            raise ValueError("payload_size must be >= 2")
        self.payload_size = payload_size
        self._data = [[_Cell(payload_size), _Cell(payload_size)],
                      [_Cell(payload_size), _Cell(payload_size)]]
        self._slot = [0, 0]
        self._latest = 0
        self._reading = 0
        self._written = False
        self._yield = yield_hook
        self.max_write_steps = 0
        self.max_read_steps = 0

    def write(self, msg: Message) -> None:
        if len(msg.body) != self.payload_size:
            raise ValueError(f"payload must be exactly {self.payload_size} bytes")
        steps = 0
        pair = 1 - self._reading
        steps += 1
        index = 1 - self._slot[pair]
        steps += 1
        self._data[pair][index].store(msg, self._yield)
        steps += 1
        self._slot[pair] = index
        steps += 1
        self._latest = pair
        self._written = True
        steps += 1
        if steps > self.max_write_steps:
            self.max_write_steps = steps

    def read(self) -> Message:
        if not self._written:
            raise EmptyBeforeFirstWrite("register read before first write")
        steps = 0
        pair = self._latest
        steps += 1
        self._reading = pair
        steps += 1
        index = self._slot[pair]
        steps += 1
        msg = self._data[pair][index].load(self._yield)
        steps += 1
        if steps > self.max_read_steps:
            self.max_read_steps = steps
        return msg


class SingleSlotRegister:
    """Unprotected single cell; used to show the stress oracle detects tearing."""

    def __init__(self, payload_size: int = 32, yield_hook=None):
        self.payload_size = payload_size
        self._cell = _Cell(payload_size)
        self._written = False
        self._yield = yield_hook

    def write(self, msg: Message) -> None:
        self._cell.store(msg, self._yield)
        self._written = True

    def read(self) -> Message:
        if not self._written:
            raise EmptyBeforeFirstWrite("register read before first write")
        return self._cell.load(self._yield)


class BoundedFifo:
    """Single-producer/single-consumer ring buffer with blocking push/pop."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._ring: List[object] = [None] * capacity
        self._head = 0
        self._count = 0
        self._cv = threading.Condition()
        self.pushed = 0
        self.popped = 0
        self.producer_blocks = 0
        self.consumer_blocks = 0

    def __len__(self) -> int:
        return self._count

    def push(self, item, timeout: Optional[float] = None) -> None:
        with self._cv:
            if self._count == self.capacity:
                self.producer_blocks += 1
                if not self._cv.wait_for(lambda: self._count < self.capacity, timeout):
                    raise TimedOut("fifo full")
            self._ring[(self._head + self._count) % self.capacity] = item
            self._count += 1
            self.pushed += 1
            self._cv.notify_all()

    def pop(self, timeout: Optional[float] = None):
        with self._cv:
            if self._count == 0:
                self.consumer_blocks += 1
                if not self._cv.wait_for(lambda: self._count > 0, timeout):
                    raise TimedOut("fifo empty")
            item = self._ring[self._head]
            self._ring[self._head] = None
            self._head = (self._head + 1) % self.capacity
            self._count -= 1
            self.popped += 1
            self._cv.notify_all()
            return item

    def try_pop(self):
        with self._cv:
            if self._count == 0:
                return None
        return self.pop(0)


# -- stress harnesses ---------------------------------------------------------

@contextmanager
def _switch_interval(seconds: float):
    old = sys.getswitchinterval()
    sys.setswitchinterval(seconds)
    try:
        yield
    finally:
        sys.setswitchinterval(old)


@dataclass
class FourSlotStressReport:
    writes: int
    reads: int
    integrity_failures: int = 0
    freshness_failures: int = 0
    order_failures: int = 0
    max_write_steps: int = 0
    max_read_steps: int = 0
    samples: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return self.integrity_failures + self.freshness_failures + self.order_failures


def fourslot_stress(ops: int = 1_000_000, seed: int = 0, payload_size: int = 16,
                    register_cls=FourSlotRegister, yield_prob: float = 0.01,
                    keep_samples: int = 0) -> FourSlotStressReport:
    """Run ``ops`` operations split between one writer and one reader thread.

    The writer publishes ``done`` after each write returns; the reader samples
    it before each read, so any read returning an older sequence number is a
    freshness violation.
    """
    n_writes = ops // 2
    n_reads = ops - n_writes
    done = [-1]
    rng_w, rng_r = random.Random(seed), random.Random(seed + 1)

    def hook():
        # randomized delays widen the interleaving space
        if rng_w.random() < yield_prob:
            time.sleep(0)

    reg = register_cls(payload_size, hook)
    bodies = [bytes([i]) * payload_size for i in range(256)]
    report = FourSlotStressReport(n_writes, n_reads)
    first = Message.make(0, bodies[0])
    reg.write(first)
    done[0] = 0
    start = threading.Barrier(2)

    def writer():
        start.wait()
        for seq in range(1, n_writes + 1):
            reg.write(Message.make(seq, bodies[seq & 0xFF]))
            done[0] = seq

    def reader():
        start.wait()
        last = -1
        integrity = fresh = order = 0
        samples = report.samples
        for i in range(n_reads):
            floor_seq = done[0]
            msg = reg.read()
            if not msg.intact:
                integrity += 1
                continue
            if msg.seq < floor_seq:
                fresh += 1
            if msg.seq < last:
                order += 1
            last = msg.seq
            if i < keep_samples:
                samples.append((floor_seq, msg.seq, time.perf_counter_ns()))
            if rng_r.random() < yield_prob:
                time.sleep(0)
        report.integrity_failures = integrity
        report.freshness_failures = fresh
        report.order_failures = order

    with _switch_interval(1e-5):
        tw = threading.Thread(target=writer, name="fourslot-writer")
        tr = threading.Thread(target=reader, name="fourslot-reader")
        tw.start()
        tr.start()
        tw.join()
        tr.join()
    report.max_write_steps = getattr(reg, "max_write_steps", 0)
    report.max_read_steps = getattr(reg, "max_read_steps", 0)
    return report


@dataclass
class FifoStressReport:
    pushed: int
    popped: int
    timed_out: int
    order_failures: int
    producer_blocks: int
    capacity: int

    @property
    def violations(self) -> int:
        return self.order_failures + (self.pushed - self.popped if self.timed_out == 0 else 0)


def fifo_stress(messages: int, capacity: int, producer_period: float = 0.0,
                consumer_period: float = 0.0, batch_producer: int = 1,
                batch_consumer: int = 1, timeout: Optional[float] = 1.0) -> FifoStressReport:
    """Producer and consumer threads exchanging ``messages`` items.

    With positive periods both sides are paced against absolute release times
    (``batch`` items per period). A push that stays blocked beyond ``timeout``
    counts as TimedOut and the item is dropped.
    """
    fifo = BoundedFifo(capacity)
    timed_out = [0]
    order_bad = [0]
    t0 = time.perf_counter() + 0.01

    def sleep_until(t):
        d = t - time.perf_counter()
        if d > 0:
            time.sleep(d)

    def producer():
        seq = 0
        k = 0
        while seq < messages:
            if producer_period:
                sleep_until(t0 + k * producer_period)
            for _ in range(batch_producer):
                if seq >= messages:
                    break
                try:
                    fifo.push(seq, timeout)
                except TimedOut:
                    timed_out[0] += 1
                seq += 1
            k += 1
        fifo.push(None, None)

    def consumer():
        last = -1
        k = 0
        while True:
            if consumer_period:
                sleep_until(t0 + k * consumer_period)
            for _ in range(batch_consumer):
                item = fifo.pop(None)
                if item is None:
                    return
                if item <= last:
                    order_bad[0] += 1
                last = item
            k += 1

    tp = threading.Thread(target=producer, name="fifo-producer")
    tc = threading.Thread(target=consumer, name="fifo-consumer")
    tp.start()
    tc.start()
    tp.join()
    tc.join()
    return FifoStressReport(fifo.pushed - 1, fifo.popped - 1, timed_out[0], order_bad[0],
                            fifo.producer_blocks, capacity)


# -- exhaustive interleaving check -------------------------------------------

@dataclass
class InterleavingReport:
    states: int
    reads_checked: int
    violations: List[str]


def enumerate_fourslot(n_writes: int = 2, n_reads: int = 2,
                       mutation: Optional[str] = None) -> InterleavingReport:
    """Explore every interleaving of the four-slot state machine.

    Each data copy is split into begin/end steps so overlaps are visible.
    A read is correct if its slot was not being written at any point during
    its copy (integrity) and the value is at least the newest write that had
    completed before the read began (freshness). Initial slot contents are a
    completed write with sequence 0.

    ``mutation="same_slot"`` makes the writer overwrite the pair's current
    slot instead of the other one; used to check the enumerator catches it.
    """
    # writer pcs: 0 pair, 1 index, 2 copy-begin, 3 copy-end, 4 slot, 5 latest, 6 next write
    # reader pcs: 0 pair, 1 reading, 2 index, 3 copy-begin, 4 copy-end, 5 next read
    init = (
        0, 0, 0, 0,        # writer: write number, pc, pair, index
        0, 0, 0, 0,        # reader: read number, pc, pair, index
        (0, 0), 0, 0,      # slot[2], latest, reading
        ((0, 0), (0, 0)),  # data seq per cell
        ((False, False), (False, False)),  # cell being written
        0,                 # newest completed write
        -1, False,         # reader: freshness floor, saw concurrent write on its cell
    )
    seen = set()
    stack = [init]
    violations: List[str] = []
    reads = 0

    def set2(t, i, j, v):
        row = list(t[i])
        row[j] = v
        out = list(t)
        out[i] = tuple(row)
        return tuple(out)

    while stack:
        s = stack.pop()
        if s in seen:
            continue
        seen.add(s)
        (wn, wpc, wpair, widx, rn, rpc, rpair, ridx, slot, latest, reading,
         data, busy, completed, floor_seq, torn) = s

        if wn < n_writes:
            seq = wn + 1
            if wpc == 0:
                nxt = (wn, 1, 1 - reading, widx)
                stack.append(nxt + s[4:])
            elif wpc == 1:
                idx = slot[wpair] if mutation == "same_slot" else 1 - slot[wpair]
                nxt = (wn, 2, wpair, idx)
                stack.append(nxt + s[4:])
            elif wpc == 2:
                nb = set2(busy, wpair, widx, True)
                # a reader mid-copy on this cell is now torn
                t2 = torn or (rpc == 4 and (rpair, ridx) == (wpair, widx))
                stack.append((wn, 3, wpair, widx) + s[4:11] + (data, nb, completed, floor_seq, t2))
            elif wpc == 3:
                nd = set2(data, wpair, widx, seq)
                nb = set2(busy, wpair, widx, False)
                stack.append((wn, 4, wpair, widx) + s[4:11] + (nd, nb, completed, floor_seq, torn))
            elif wpc == 4:
                ns = list(slot)
                ns[wpair] = widx
                stack.append((wn, 5, wpair, widx) + s[4:8] + (tuple(ns), latest, reading)
                             + s[11:])
            elif wpc == 5:
                stack.append((wn + 1, 0, 0, 0) + s[4:8] + (slot, wpair, reading, data, busy,
                                                           seq, floor_seq, torn))
        if rn < n_reads:
            head = s[:4]
            if rpc == 0:
                stack.append(head + (rn, 1, latest, ridx) + s[8:14] + (completed, False))
            elif rpc == 1:
                stack.append(head + (rn, 2, rpair, ridx) + (slot, latest, rpair) + s[11:])
            elif rpc == 2:
                stack.append(head + (rn, 3, rpair, slot[rpair]) + s[8:])
            elif rpc == 3:
                t2 = busy[rpair][ridx]
                stack.append(head + (rn, 4, rpair, ridx) + s[8:15] + (t2,))
            elif rpc == 4:
                reads += 1
                value = data[rpair][ridx]
                if torn or busy[rpair][ridx]:
                    violations.append(f"torn read of cell {rpair}{ridx} in state {s}")
                elif value < floor_seq:
                    violations.append(f"stale read {value} < {floor_seq} in state {s}")
                stack.append(head + (rn + 1, 0, 0, 0) + s[8:14] + (-1, False))
    return InterleavingReport(len(seen), reads, violations)
