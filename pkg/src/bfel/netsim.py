"""Deterministic discrete-event message simulator with byte and time accounting.

Virtual time is integer milliseconds. Two link classes exist:

* ``edge`` links (worker <-> miner / aggregator) cost
  ``base_latency_ms + ceil(size / bytes_per_ms)`` plus optional seeded jitter;
* ``committee`` links (miner <-> miner) are delivered inside the fixed
  consensus window: their bytes are traced but their time is covered by
  ``consensus_delay_ms`` rather than charged per message.

Only communication and consensus delay are modelled; local computation is
treated as instantaneous.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BFELError, ConfigurationError

TRACE_COLUMNS = ("time_ms", "src", "dst", "msg_type", "size_bytes")
EDGE_UP, EDGE_DOWN = "update", "global"
CONSENSUS_END = ("block", "abort")


class TimeTravel(BFELError):
    """An event was scheduled before the current simulated time."""


class BudgetExceeded(BFELError):
    """run_until processed its maximum number of events without the condition holding."""


@dataclass(frozen=True)
class CostModel:
    bytes_per_ms: float = 1250.0  # 10 Mbit/s
    base_latency_ms: float = 10.0
    consensus_delay_ms: int = 500
    jitter_ms: float = 0.0

    def __post_init__(self):
        if not self.bytes_per_ms > 0:
            raise ConfigurationError("bytes_per_ms must be positive")
        if self.base_latency_ms < 0 or self.consensus_delay_ms < 0 or self.jitter_ms < 0:
            raise ConfigurationError("latencies and delays must be non-negative")

    def transfer_ms(self, size_bytes: int) -> int:
        return int(math.ceil(self.base_latency_ms + size_bytes / self.bytes_per_ms))


@dataclass(frozen=True)
class SimEvent:
    deliver_at: int
    src: str
    dst: str
    msg_type: str
    message: object = field(repr=False, compare=False)
    size_bytes: int = 0
    sent_at: int = 0
    link: str = "edge"


@dataclass(frozen=True)
class TraceRow:
    time_ms: int
    src: str
    dst: str
    msg_type: str
    size_bytes: int

    def as_tuple(self):
        return (self.time_ms, self.src, self.dst, self.msg_type, self.size_bytes)


class EventQueue:
    """Priority queue ordered by (deliver_at, insertion sequence)."""

    def __init__(self):
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self.now = 0

    def schedule(self, event: SimEvent) -> "EventQueue":
        if event.deliver_at < self.now:
            raise TimeTravel(f"event at {event.deliver_at} ms scheduled at time {self.now} ms")
        heapq.heappush(self._heap, (event.deliver_at, self._seq, event))
        self._seq += 1
        return self

    def pop(self) -> SimEvent:
        t, _, ev = heapq.heappop(self._heap)
        self.now = t
        return ev

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)


def schedule(queue: EventQueue, event: SimEvent) -> EventQueue:
    return queue.schedule(event)


Handler = Callable[["Simulator", SimEvent], None]


class Simulator:
    """Event loop: delivers messages to per-node handlers and records a trace."""

    def __init__(self, cost: CostModel | None = None, seed: int = 0):
        self.cost = cost or CostModel()
        self.queue = EventQueue()
        self.trace: list[TraceRow] = []
        self.dropped: list[SimEvent] = []
        self._handlers: dict[str, Handler] = {}
        self._rng = np.random.default_rng(seed)
        self.events_processed = 0

    @property
    def now(self) -> int:
        return self.queue.now

    def register(self, node_id: str, handler: Handler) -> None:
        self._handlers[node_id] = handler

    def send(self, src: str, dst: str, msg_type: str, message, size_bytes: int,
             link: str = "edge", drop: bool = False) -> SimEvent:
        if link == "edge":
            delay = self.cost.transfer_ms(size_bytes)
            if self.cost.jitter_ms > 0:
                delay += int(self._rng.integers(0, int(self.cost.jitter_ms) + 1))
        elif link == "committee":
            delay = 0
        else:
            raise ConfigurationError(f"unknown link class {link!r}")
        ev = SimEvent(self.now + delay, src, dst, msg_type, message, size_bytes, self.now, link)
        if drop:
            self.dropped.append(ev)
        else:
            self.queue.schedule(ev)
        return ev

    def timer(self, at: int, node_id: str, tag: str, payload=None) -> SimEvent:
        """Local wake-up for ``node_id``; not a message, so never traced."""
        ev = SimEvent(at, node_id, node_id, tag, payload, 0, self.now, "timer")
        self.queue.schedule(ev)
        return ev

    def step(self) -> SimEvent:
        ev = self.queue.pop()
        self.events_processed += 1
        if ev.link != "timer":
            self.trace.append(TraceRow(ev.deliver_at, ev.src, ev.dst, ev.msg_type, ev.size_bytes))
        handler = self._handlers.get(ev.dst)
        if handler is not None:
            handler(self, ev)
        return ev

    def run_until(self, condition: Callable[["Simulator"], bool] | None = None,
                  max_events: int = 10_000_000) -> list[TraceRow]:
        """Process events until ``condition`` holds or the queue drains."""
        budget = max_events
        while self.queue:
            if condition is not None and condition(self):
                break
            if budget == 0:
                raise BudgetExceeded(f"no termination after {max_events} events")
            self.step()
            budget -= 1
        return self.trace


def run_until(sim: Simulator, condition=None, max_events: int = 10_000_000) -> list[TraceRow]:
    return sim.run_until(condition, max_events)


# -- trace utilities ------------------------------------------------------------

def write_trace_csv(trace: Iterable[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow(row.as_tuple())


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = tuple(next(r))
        if header != TRACE_COLUMNS:
            raise ConfigurationError(f"unexpected trace columns {header}")
        return [TraceRow(int(t), s, d, m, int(n)) for t, s, d, m, n in r]


def trace_digest(trace: Iterable[TraceRow]) -> str:
    h = hashlib.sha256()
    for row in trace:
        h.update(("%d,%s,%s,%s,%d\n" % row.as_tuple()).encode())
    return h.hexdigest()


def task_of(node_id: str) -> str:
    """Entities are named ``<task>.<node>``; the prefix identifies the subchain."""
    return node_id.split(".", 1)[0]


@dataclass
class CostSummary:
    total_time_ms: int
    total_bytes: int
    edge_bytes: int
    rounds: int
    consensus_attempts: int


def _round_critical_paths(rows: Sequence[TraceRow], cost: CostModel):
    """Split one task's edge traffic into rounds of (uplink phase, downlink phase)."""
    rounds, up, down = [], [], []
    for row in rows:
        if row.msg_type == EDGE_UP:
            if down:
                rounds.append((up, down))
                up, down = [], []
            up.append(row)
        elif row.msg_type == EDGE_DOWN:
            down.append(row)
    if up or down:
        rounds.append((up, down))
    return [max((cost.transfer_ms(r.size_bytes) for r in u), default=0)
            + max((cost.transfer_ms(r.size_bytes) for r in d), default=0)
            for u, d in rounds]


def communication_cost(trace: Sequence[TraceRow], cost: CostModel,
                       rounds: int | None = None, consensus: bool = False) -> CostSummary:
    """Recompute bytes and simulated time from a trace.

    Time per task is the sum over rounds of the slowest uplink plus the slowest
    downlink; consensus runs add ``consensus_delay_ms`` once per consensus
    attempt (one per round unless a round had to be retried). Tasks run
    concurrently, so the total is the slowest task. ``rounds`` when given is
    checked against the round count found in the trace.
    """
    if cost.jitter_ms:
        raise ConfigurationError("time cannot be recomputed from a trace when jitter is on")
    total_bytes = sum(r.size_bytes for r in trace)
    edge = [r for r in trace if r.msg_type in (EDGE_UP, EDGE_DOWN)]
    by_task: dict[str, list[TraceRow]] = {}
    for r in edge:
        worker_side = r.src if r.msg_type == EDGE_UP else r.dst
        by_task.setdefault(task_of(worker_side), []).append(r)
    attempts: dict[str, set] = {}
    if consensus:
        for r in trace:
            if r.msg_type in CONSENSUS_END:
                attempts.setdefault(task_of(r.src), set()).add((r.src, r.time_ms, r.msg_type))
    times, n_rounds = [], 0
    for task, rows in sorted(by_task.items()):
        paths = _round_critical_paths(rows, cost)
        n_rounds = max(n_rounds, len(paths))
        t = sum(paths)
        if consensus:
            t += len(attempts.get(task, ())) * cost.consensus_delay_ms
        times.append(t)
    if rounds is not None and n_rounds != rounds:
        raise ConfigurationError(f"trace holds {n_rounds} rounds, expected {rounds}")
    n_attempts = sum(len(v) for v in attempts.values())
    return CostSummary(max(times, default=0), total_bytes, sum(r.size_bytes for r in edge),
                       n_rounds, n_attempts)
