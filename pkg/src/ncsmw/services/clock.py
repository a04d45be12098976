"""Peer clock offset/skew estimation from two-way Ping/Response exchanges."""

from __future__ import annotations

import logging
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 16


@dataclass(frozen=True)
class PingSample:
    """t1 local send, t2 peer receive, t3 peer send, t4 local receive (ms)."""

    t1: float
    t2: float
    t3: float
    t4: float

    def __post_init__(self):
        if self.t4 < self.t1:
            raise ValueError("t4 must not precede t1")
        if self.t3 < self.t2:
            raise ValueError("t3 must not precede t2")

    @property
    def offset(self) -> float:
        return ((self.t2 - self.t1) + (self.t3 - self.t4)) / 2.0

    @property
    def local_time(self) -> float:
        return (self.t1 + self.t4) / 2.0

    @property
    def round_trip(self) -> float:
        return (self.t4 - self.t1) - (self.t3 - self.t2)


@dataclass
class ClockModel:
    """Estimate of ``peer_clock - local_clock`` for one peer.

    ``offset_ms`` is the window median and holds at local time
    ``ref_local_ms``; ``skew_ppm`` is the regression slope of the window.
    """

    peer_node_id: str
    window: int = DEFAULT_WINDOW
    offset_ms: float = 0.0
    skew_ppm: float = 0.0
    last_update_ms: Optional[float] = None
    ref_local_ms: float = 0.0
    samples: deque = field(default=None)

    def __post_init__(self):
        if self.samples is None:
            self.samples = deque(maxlen=self.window)

    @property
    def empty(self) -> bool:
        return not self.samples

    def offset_at(self, local_ms: float) -> float:
        return self.offset_ms + self.skew_ppm * 1e-6 * (local_ms - self.ref_local_ms)

    def to_local(self, ts_remote_ms: float) -> float:
        ref_peer = self.ref_local_ms + self.offset_ms
        return ts_remote_ms - self.offset_ms - self.skew_ppm * 1e-6 * (ts_remote_ms - ref_peer)


def _slope(xs, ys) -> float:
    n = len(xs)
    if n < 2:
        return 0.0
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0:
        return 0.0
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx


def record_ping_sample(cm: ClockModel, s: PingSample) -> ClockModel:
    cm.samples.append(s)
    offsets = [p.offset for p in cm.samples]
    times = [p.local_time for p in cm.samples]
    cm.offset_ms = statistics.median(offsets)
    cm.ref_local_ms = statistics.median(times)
    cm.skew_ppm = _slope(times, offsets) * 1e6
    cm.last_update_ms = s.t4
    return cm


def translate_timestamp(ts_remote_ms: float, cm: ClockModel, now_local_ms: float | None = None) -> float:
    """Map a peer timestamp onto the local clock.

    With no samples yet the timestamp passes through unchanged and a
    warning is logged.
    """
    if cm.empty:
        log.warning("no clock samples for %s; passing timestamp through", cm.peer_node_id)
        return float(ts_remote_ms)
    return cm.to_local(ts_remote_ms)
