"""Simulated lossy links and the per-link sequencing/ack layer.

Reliable frames are retransmitted with exponential backoff until acked and
are handed to the receiver exactly once, in sequence order.  Best-effort
frames are numbered in their own sequence space so the receiver can drop
channel duplicates (at-most-once), but they are never retransmitted.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from typing import Callable, Optional

from ..message import Message
from .framing import (
    FLAG_RELIABLE,
    FrameError,
    MAX_FRAME_BYTES,
    encode_ack,
    pack_frame,
    unpack_frame,
)
from ..message import serialize_message

log = logging.getLogger(__name__)

BACKOFF_INITIAL_MS = 50
BACKOFF_FACTOR = 2
BACKOFF_CAP_MS = 1000


@dataclass(frozen=True)
class ChannelModel:
    """Per-frame delay ``fixed + U[0, jitter]`` (rounded up to whole ms),
    independent loss, and optional duplication."""

    fixed_delay_ms: float = 2.0
    jitter_ms: float = 1.0
    loss_probability: float = 0.005
    duplicate_probability: float = 0.0

    def __post_init__(self):
        for name in ("loss_probability", "duplicate_probability"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.fixed_delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("delays must be non-negative")

    @property
    def duplicates(self) -> bool:
        return self.duplicate_probability > 0

    def delay(self, rng: random.Random) -> int:
        return math.ceil(self.fixed_delay_ms + rng.uniform(0.0, self.jitter_ms))

    def sample(self, rng: random.Random) -> list[int]:
        """Delivery delays for one frame: [] if lost, two entries if duplicated."""
        lost = rng.random() < self.loss_probability
        dup = rng.random() < self.duplicate_probability
        if lost:
            return []
        delays = [self.delay(rng)]
        if dup:
            delays.append(self.delay(rng))
        return delays


class SimLink:
    """One direction of a simulated wire."""

    def __init__(self, clock, channel: ChannelModel, rng: random.Random, deliver: Callable[[bytes], None]):
        self.clock = clock
        self.channel = channel
        self.rng = rng
        self.deliver = deliver
        self.up = True
        self.frames_sent = 0
        self.frames_dropped = 0

    def send(self, data: bytes) -> None:
        self.frames_sent += 1
        if len(data) > MAX_FRAME_BYTES or not self.up:
            self.frames_dropped += 1
            return
        delays = self.channel.sample(self.rng)
        if not delays:
            self.frames_dropped += 1
        for d in delays:
            self.clock.call_later(d, lambda data=data: self.deliver(data))


class LinkEndpoint:
    """Sequencing, ack and retransmission for one end of a link.

    ``send_raw`` puts bytes on the wire; ``on_message`` receives decoded
    messages.  Call :meth:`receive_raw` with every frame arriving from the
    peer.
    """

    def __init__(
        self,
        clock,
        send_raw: Callable[[bytes], None],
        on_message: Callable[[Message], None],
        max_attempts: Optional[int] = None,
    ):
        self.clock = clock
        self.send_raw = send_raw
        self.on_message = on_message
        self.max_attempts = max_attempts
        self._next_reliable = 1
        self._next_best_effort = 1
        self._unacked: dict[int, bytes] = {}
        self._expected = 1
        self._held: dict[int, Message] = {}
        self._seen_best_effort: set[int] = set()
        self.retransmissions = 0
        self.frame_errors = 0
        self.gave_up: list[int] = []

    # -- sending ----------------------------------------------------------
    def send(self, m: Message) -> int:
        payload = serialize_message(m).encode("utf-8")
        if m.reliable:
            seq = self._next_reliable
            self._next_reliable += 1
            data = pack_frame(payload, FLAG_RELIABLE, seq)
            self._unacked[seq] = data
            self.send_raw(data)
            self._arm(seq, BACKOFF_INITIAL_MS, 1)
        else:
            seq = self._next_best_effort
            self._next_best_effort += 1
            self.send_raw(pack_frame(payload, 0, seq))
        return seq

    def _arm(self, seq: int, backoff: int, attempts: int) -> None:
        def fire():
            data = self._unacked.get(seq)
            if data is None:
                return
            if self.max_attempts is not None and attempts >= self.max_attempts:
                del self._unacked[seq]
                self.gave_up.append(seq)
                log.warning("giving up on reliable frame %d after %d attempts", seq, attempts)
                return
            self.retransmissions += 1
            self.send_raw(data)
            self._arm(seq, min(backoff * BACKOFF_FACTOR, BACKOFF_CAP_MS), attempts + 1)

        self.clock.call_later(backoff, fire)

    @property
    def in_flight(self) -> int:
        return len(self._unacked)

    # -- receiving --------------------------------------------------------
    def receive_raw(self, data: bytes) -> None:
        try:
            frame = unpack_frame(data)
        except FrameError as exc:
            self.frame_errors += 1
            log.warning("dropping bad frame: %s", exc)
            return
        if frame.is_ack:
            self._unacked.pop(frame.sequence, None)
            return
        if frame.is_reliable:
            self.send_raw(encode_ack(frame.sequence))
            seq = frame.sequence
            if seq < self._expected or seq in self._held:
                return
            self._held[seq] = frame.message
            while self._expected in self._held:
                msg = self._held.pop(self._expected)
                self._expected += 1
                self.on_message(msg)
        else:
            if frame.sequence in self._seen_best_effort:
                return
            self._seen_best_effort.add(frame.sequence)
            self.on_message(frame.message)


def connect_endpoints(clock, channel: ChannelModel, rng: random.Random, on_a, on_b, reverse_channel=None):
    """Wire two endpoints through a pair of simulated links.

    Returns ``(endpoint_a, endpoint_b, link_ab, link_ba)``.
    """
    holder = {}
    link_ab = SimLink(clock, channel, rng, lambda d: holder["b"].receive_raw(d))
    link_ba = SimLink(clock, reverse_channel or channel, rng, lambda d: holder["a"].receive_raw(d))
    a = LinkEndpoint(clock, link_ab.send, on_a)
    b = LinkEndpoint(clock, link_ba.send, on_b)
    holder["a"], holder["b"] = a, b
    return a, b, link_ab, link_ba
