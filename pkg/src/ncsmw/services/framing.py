"""Length-prefixed frames carrying message wire text between nodes.

Layout (big-endian)::

    +---------+-------+-------------+------------------------+
    | length  | flags | sequence    | payload (UTF-8 text)   |
    | 4 bytes | 1     | 7 bytes     | length - 8 bytes       |
    +---------+-------+-------------+------------------------+

``length`` counts the 8 header bytes plus the payload.  Best-effort frames
carry sequence 0.  An ACK frame has an empty payload and echoes the
sequence number it acknowledges.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from ..message import Message, MessageError, parse_message, serialize_message

PREFIX = struct.Struct(">I")
PREFIX_SIZE = 4
HEADER_SIZE = 8
MAX_FRAME_BYTES = 1 << 20
MAX_SEQUENCE = (1 << 56) - 1

FLAG_RELIABLE = 0x01
FLAG_ACK = 0x02


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    flags: int
    sequence: int
    message: Optional[Message]

    @property
    def is_ack(self) -> bool:
        return bool(self.flags & FLAG_ACK)

    @property
    def is_reliable(self) -> bool:
        return bool(self.flags & FLAG_RELIABLE)


def pack_frame(payload: bytes, flags: int = 0, sequence: int = 0) -> bytes:
    if not 0 <= sequence <= MAX_SEQUENCE:
        raise FrameError(f"sequence {sequence} out of range")
    length = HEADER_SIZE + len(payload)
    if PREFIX_SIZE + length > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {PREFIX_SIZE + length} bytes exceeds {MAX_FRAME_BYTES}")
    return PREFIX.pack(length) + bytes([flags & 0xFF]) + sequence.to_bytes(7, "big") + payload


def encode_frame(m: Message, sequence: int = 0) -> bytes:
    flags = FLAG_RELIABLE if m.reliable else 0
    return pack_frame(serialize_message(m).encode("utf-8"), flags, sequence if m.reliable else 0)


def encode_ack(sequence: int) -> bytes:
    return pack_frame(b"", FLAG_ACK, sequence)


def unpack_frame(data: bytes) -> Frame:
    if len(data) < PREFIX_SIZE + HEADER_SIZE:
        raise FrameError(f"truncated frame ({len(data)} bytes)")
    (length,) = PREFIX.unpack_from(data)
    if PREFIX_SIZE + length > MAX_FRAME_BYTES:
        raise FrameError(f"oversize frame ({PREFIX_SIZE + length} bytes)")
    if length < HEADER_SIZE:
        raise FrameError(f"length {length} shorter than header")
    if len(data) < PREFIX_SIZE + length:
        raise FrameError(f"truncated frame: need {PREFIX_SIZE + length} bytes, have {len(data)}")
    if len(data) > PREFIX_SIZE + length:
        raise FrameError(f"length mismatch: prefix says {length}, got {len(data) - PREFIX_SIZE}")
    flags = data[PREFIX_SIZE]
    sequence = int.from_bytes(data[PREFIX_SIZE + 1:PREFIX_SIZE + HEADER_SIZE], "big")
    payload = data[PREFIX_SIZE + HEADER_SIZE:]
    if flags & FLAG_ACK:
        if payload:
            raise FrameError("ack frame with payload")
        return Frame(flags, sequence, None)
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"bad UTF-8 payload ({exc})") from None
    try:
        msg = parse_message(text)
    except MessageError as exc:
        raise FrameError(f"bad payload: {exc}") from None
    return Frame(flags, sequence, msg)


def decode_frame(data: bytes) -> Message:
    frame = unpack_frame(data)
    if frame.message is None:
        raise FrameError("ack frame carries no message")
    return frame.message


class FrameReader:
    """Reassembles frames from an arbitrary byte stream (e.g. a TCP socket)."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[bytes]:
        self._buf.extend(chunk)
        frames = []
        while len(self._buf) >= PREFIX_SIZE:
            (length,) = PREFIX.unpack_from(self._buf)
            if PREFIX_SIZE + length > MAX_FRAME_BYTES:
                self._buf.clear()
                raise FrameError(f"oversize frame ({PREFIX_SIZE + length} bytes) on stream")
            end = PREFIX_SIZE + length
            if len(self._buf) < end:
                break
            frames.append(bytes(self._buf[:end]))
            del self._buf[:end]
        return frames
