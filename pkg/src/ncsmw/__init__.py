"""Real-time middleware for networked control systems."""

from .message import Message, MessageError, QoSSpec, Reliability, parse_message, serialize_message

__all__ = ["Message", "MessageError", "QoSSpec", "Reliability", "parse_message", "serialize_message"]
__version__ = "0.1.0"
