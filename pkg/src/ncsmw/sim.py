"""Discrete-event clock shared by simulated nodes, links and experiments."""

from __future__ import annotations

import heapq
import itertools
import time
from typing import Callable


class SimClock:
    """Integer-millisecond event queue.  Ties run in scheduling order."""

    simulated = True

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._queue: list = []
        self._seq = itertools.count()

    def now_ms(self) -> int:
        return self._now

    def call_at(self, t_ms: int, fn: Callable[[], None]) -> None:
        if t_ms < self._now:
            t_ms = self._now
        heapq.heappush(self._queue, (int(t_ms), next(self._seq), fn))

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> None:
        self.call_at(self._now + int(delay_ms), fn)

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        t, _, fn = heapq.heappop(self._queue)
        self._now = t
        fn()
        return True

    def run_until(self, t_end_ms: int) -> None:
        while self._queue and self._queue[0][0] <= t_end_ms:
            self.step()
        self._now = max(self._now, t_end_ms)

    def run(self, max_events: int = 10_000_000) -> None:
        for _ in range(max_events):
            if not self.step():
                return
        raise RuntimeError("event budget exhausted")


class RealClock:
    """Wall-clock milliseconds since construction."""

    simulated = False

    def __init__(self):
        self._t0 = time.monotonic()

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)
