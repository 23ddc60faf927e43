"""Injected clocks and a discrete-event scheduler.

Every component stamps messages from one injected clock, so KPI timings are
skew-free by construction: a shared wall clock in distributed runs, a
virtual clock in deterministic in-process runs.
"""

from __future__ import annotations

import heapq
import itertools
import time
from typing import Callable

EPOCH_BASE_MS = 1_700_000_000_000


class SystemClock:
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000


class VirtualClock:
    """Clock owned by a Scheduler; advances only when events run."""

    def __init__(self, start_ms: int = EPOCH_BASE_MS):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now


class Scheduler:
    """Deterministic event loop over a VirtualClock.

    Events at equal times run in scheduling order (a monotonic tiebreaker
    guarantees a total order).
    """

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._counter = itertools.count()

    def call_at(self, at_ms: int, fn: Callable[[], None]) -> None:
        if at_ms < self.clock.now_ms():
            at_ms = self.clock.now_ms()
        heapq.heappush(self._heap, (int(at_ms), next(self._counter), fn))

    def call_later(self, delay_ms: float, fn: Callable[[], None]) -> None:
        self.call_at(self.clock.now_ms() + round(delay_ms), fn)

    def run_until(self, t_ms: int) -> None:
        while self._heap and self._heap[0][0] <= t_ms:
            at, _, fn = heapq.heappop(self._heap)
            self.clock._now = max(self.clock._now, at)
            fn()
        self.clock._now = max(self.clock._now, t_ms)

    def run_all(self, limit: int = 10_000_000) -> None:
        n = 0
        while self._heap:
            at, _, fn = heapq.heappop(self._heap)
            self.clock._now = max(self.clock._now, at)
            fn()
            n += 1
            if n >= limit:
                raise RuntimeError("scheduler event limit exceeded")

    @property
    def pending(self) -> int:
        return len(self._heap)
