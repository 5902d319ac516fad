"""Deterministic discrete-event core.

Events fire in ``(time, seq)`` order; ``seq`` is a per-engine counter assigned
at scheduling time, so simultaneous events run in the order they were queued.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable


class EventKind(str, Enum):
    CHUNK_COMPLETE = "ChunkComplete"
    FAULT_INJECT = "FaultInject"
    OOB_NOTIFY = "OobNotify"
    PROBE_RESULT = "ProbeResult"
    TIMEOUT = "Timeout"
    RECOVERY = "Recovery"


class SchedulingError(ValueError):
    pass


@dataclass(order=True)
class Event:
    time: float
    seq: int = field(default=-1)
    kind: EventKind = field(default=EventKind.TIMEOUT, compare=False)
    action: Callable[["Event"], Any] | None = field(default=None, compare=False, repr=False)
    label: str = field(default="", compare=False)
    cancelled: bool = field(default=False, compare=False)

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(frozen=True)
class TraceRecord:
    time: float
    seq: int
    kind: str
    label: str


class Engine:
    def __init__(self, start: float = 0.0):
        self.now = float(start)
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self.trace: list[TraceRecord] = []

    def schedule(self, ev: Event) -> Event:
        if ev.time < self.now:
            raise SchedulingError(f"cannot schedule at {ev.time} < now={self.now}")
        ev.seq = next(self._seq)
        heapq.heappush(self._queue, ev)
        return ev

    def at(self, time: float, kind: EventKind, action=None, label: str = "") -> Event:
        return self.schedule(Event(time=time, kind=kind, action=action, label=label))

    def after(self, delay: float, kind: EventKind, action=None, label: str = "") -> Event:
        return self.at(self.now + delay, kind, action, label)

    def pending(self) -> int:
        return sum(not e.cancelled for e in self._queue)

    def peek_time(self) -> float | None:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def step(self) -> Event | None:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.time
            self.trace.append(TraceRecord(ev.time, ev.seq, ev.kind.value, ev.label))
            if ev.action is not None:
                ev.action(ev)
            return ev
        return None

    def run_until(self, t_end: float) -> list[TraceRecord]:
        """Process every event with ``time <= t_end`` and park the clock at ``t_end``."""
        if t_end < self.now:
            raise SchedulingError(f"t_end={t_end} is before now={self.now}")
        start = len(self.trace)
        while True:
            t = self.peek_time()
            if t is None or t > t_end:
                break
            self.step()
        self.now = t_end
        return self.trace[start:]

    def run(self, max_events: int | None = None) -> list[TraceRecord]:
        """Drain the queue; the clock stays at the last event time."""
        start = len(self.trace)
        count = 0
        while self.step() is not None:
            count += 1
            if max_events is not None and count >= max_events:
                break
        return self.trace[start:]
