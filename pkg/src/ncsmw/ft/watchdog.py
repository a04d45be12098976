"""Watchdog detection of late or missing responses between components."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional

from .ftshell import FaultEvent


@dataclass(frozen=True)
class WatchdogSpec:
    request_type: str
    response_type: str
    deadline_ms: int
    target: Optional[str] = None  # profile notified of timing faults

    def __post_init__(self):
        if self.deadline_ms <= 0:
            raise ValueError("deadline_ms must be > 0")


def watchdog_check(w: WatchdogSpec, pending: dict, now_ms: int, reported: Optional[set] = None) -> list[FaultEvent]:
    """Timing faults for requests in ``pending`` (id -> sent time) older than
    the deadline.  Ids in ``reported`` are skipped and new ones are added."""
    reported = set() if reported is None else reported
    events = []
    for rid, sent in sorted(pending.items(), key=lambda kv: (kv[1], str(kv[0]))):
        due = sent + w.deadline_ms
        if now_ms > due and rid not in reported:
            reported.add(rid)
            events.append(
                FaultEvent("timing", str(rid), f"no {w.response_type} for {w.request_type}", now_ms, expected_by_ms=due)
            )
    return events


@dataclass
class Watchdog:
    """Tracks outstanding requests; each expired one is reported exactly once."""

    spec: WatchdogSpec
    pending: dict = field(default_factory=dict)
    reported: set = field(default_factory=set)
    late: list = field(default_factory=list)  # (id, response time, lateness)
    faults: list = field(default_factory=list)

    def request(self, rid: Hashable, sent_ms: int) -> None:
        self.pending[rid] = sent_ms

    def response(self, rid: Hashable, at_ms: int) -> None:
        sent = self.pending.pop(rid, None)
        if sent is None:
            return
        if rid in self.reported:
            self.late.append((rid, at_ms, at_ms - sent - self.spec.deadline_ms))
            self.reported.discard(rid)

    def check(self, now_ms: int) -> list[FaultEvent]:
        events = watchdog_check(self.spec, self.pending, now_ms, self.reported)
        self.faults.extend(events)
        return events

    def observe(self, msg_type: str, rid: Hashable, at_ms: int) -> None:
        if msg_type == self.spec.request_type:
            self.request(rid, at_ms)
        elif msg_type == self.spec.response_type:
            self.response(rid, at_ms)
