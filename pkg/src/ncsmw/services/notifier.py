"""Time-triggered notifications."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

from ..message import Message, QoSSpec

NOTIFY = "Notify"


@dataclass
class NotificationSchedule:
    """Activation k (k = 1, 2, ...) is due at ``phase_ms + k * period_ms``.

    ``fired`` counts activations already emitted; it moves with the
    schedule when the target component migrates.
    """

    target_profile: str
    period_ms: int
    phase_ms: int = 0
    qos: Optional[QoSSpec] = None
    count: Optional[int] = None
    fired: int = 0
    payload: Any = None

    def __post_init__(self):
        if self.period_ms <= 0:
            raise ValueError("period_ms must be positive")

    def nominal(self, k: int) -> int:
        return self.phase_ms + k * self.period_ms

    def next_due_ms(self) -> Optional[int]:
        if self.exhausted:
            return None
        return self.nominal(self.fired + 1)

    @property
    def exhausted(self) -> bool:
        return self.count is not None and self.fired >= self.count


def notifier_due(sched: NotificationSchedule, now_ms: int) -> list[Message]:
    """Emit one Notify per activation that has come due by ``now_ms``.

    Timestamps are the nominal activation times, so a stalled caller gets
    late notifications carrying the times they were due.
    """
    out = []
    while not sched.exhausted and sched.nominal(sched.fired + 1) <= now_ms:
        sched.fired += 1
        content = {"activation": sched.fired}
        if sched.payload is not None:
            content["payload"] = sched.payload
        out.append(
            Message(
                msg_type=NOTIFY,
                profile_name=sched.target_profile,
                content=content,
                timestamp_ms=sched.nominal(sched.fired),
                qos=sched.qos,
            )
        )
    return out
