"""Message data model and its canonical XML wire text.

A message document looks like::

    <EtherMsg type="Ping" rel="best_effort"><profile name="NetworkTime@nodeB"/>
    <content/><ts value="0"/></EtherMsg>

(shown wrapped; canonical text has no insignificant whitespace).  Content
entries are typed child elements keyed by ``k``: ``int``, ``float``, ``str``,
``bool``, ``null``, ``map`` and ``list``.
"""

from __future__ import annotations

import enum
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

__all__ = [
    "Message",
    "MessageError",
    "QoSSpec",
    "Reliability",
    "parse_message",
    "serialize_message",
]

ROOT_TAG = "EtherMsg"

# Characters that cannot be represented in XML 1.0 at all.
_INVALID_XML = re.compile("[\x00-\x08\x0b\x0c\x0e-\x1f\ud800-\udfff\ufffe\uffff]")
_TOKEN = re.compile(r"^[A-Za-z_][A-Za-z0-9_.:\-]*$")


class MessageError(ValueError):
    """Invalid message or malformed message document.

    ``where`` names the offending field or document location.
    """

    def __init__(self, where: str, detail: str):
        super().__init__(f"{where}: {detail}")
        self.where = where
        self.detail = detail


class Reliability(str, enum.Enum):
    BEST_EFFORT = "best_effort"
    RELIABLE = "reliable"


@dataclass(frozen=True)
class QoSSpec:
    """Scheduling attributes attached to a message.

    Absent attributes are ``None`` and are omitted on the wire.
    """

    crit: int = 0
    period_ms: Optional[int] = None
    deadline_ms: Optional[int] = None
    wcet_ms: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.crit, bool) or not isinstance(self.crit, int) or self.crit < 0:
            raise MessageError("qos.crit", f"must be a non-negative integer, got {self.crit!r}")
        for name in ("period_ms", "deadline_ms", "wcet_ms"):
            v = getattr(self, name)
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise MessageError(f"qos.{name}", f"must be a positive integer, got {v!r}")
        if self.wcet_ms is not None and self.deadline_ms is not None and self.wcet_ms > self.deadline_ms:
            raise MessageError("qos.wcet_ms", "wcet exceeds deadline")


@dataclass(frozen=True, eq=False)
class Message:
    """A profile-addressed, timestamped unit of component interaction.

    ``content`` is opaque to the kernel.  Treat it as read-only once the
    message is built; messages are shared between dispatchers and nodes.
    ``extra`` keeps unknown root children (raw XML) so they survive a
    parse/serialize cycle.
    """

    msg_type: str
    profile_name: str
    content: Mapping[str, Any] = field(default_factory=dict)
    timestamp_ms: int = 0
    reliability: Reliability = Reliability.BEST_EFFORT
    qos: Optional[QoSSpec] = None
    extra: tuple = ()

    def __post_init__(self):
        if not isinstance(self.msg_type, str) or not _TOKEN.match(self.msg_type):
            raise MessageError("msg_type", f"must be a non-empty token, got {self.msg_type!r}")
        if not isinstance(self.profile_name, str) or not self.profile_name:
            raise MessageError("profile_name", "must be non-empty")
        if _INVALID_XML.search(self.profile_name):
            raise MessageError("profile_name", "contains characters not representable in XML")
        if isinstance(self.timestamp_ms, bool) or not isinstance(self.timestamp_ms, int):
            raise MessageError("timestamp_ms", f"must be an integer, got {self.timestamp_ms!r}")
        if self.timestamp_ms < 0:
            raise MessageError("timestamp_ms", "must be >= 0")
        if not isinstance(self.reliability, Reliability):
            object.__setattr__(self, "reliability", Reliability(self.reliability))
        _check_content(self.content, "content")

    def _key(self):
        return (
            self.msg_type,
            self.profile_name,
            _freeze(self.content),
            self.timestamp_ms,
            self.reliability,
            self.qos,
            tuple(self.extra),
        )

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def replace(self, **changes) -> "Message":
        from dataclasses import replace

        return replace(self, **changes)

    @property
    def reliable(self) -> bool:
        return self.reliability is Reliability.RELIABLE


def _freeze(value: Any):
    # Order- and type-sensitive: equal keys <=> identical wire text.
    if isinstance(value, Mapping):
        return ("map", tuple((k, _freeze(v)) for k, v in value.items()))
    if isinstance(value, (list, tuple)):
        return ("list", tuple(_freeze(v) for v in value))
    if isinstance(value, float):
        return ("float", repr(value))
    return (type(value).__name__, value)


def _check_content(value: Any, where: str) -> None:
    if isinstance(value, Mapping):
        for k, v in value.items():
            if not isinstance(k, str):
                raise MessageError(where, f"keys must be strings, got {k!r}")
            if _INVALID_XML.search(k):
                raise MessageError(f"{where}.{k}", "key not representable in XML")
            _check_content(v, f"{where}.{k}")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _check_content(v, f"{where}[{i}]")
    elif isinstance(value, str):
        if _INVALID_XML.search(value):
            raise MessageError(where, "string not representable in XML")
    elif value is None or isinstance(value, (bool, int, float)):
        pass
    else:
        raise MessageError(where, f"unsupported content value type {type(value).__name__}")


# -- serialization ---------------------------------------------------------

def _attr(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\n", "&#10;")
        .replace("\r", "&#13;")
        .replace("\t", "&#9;")
    )


def _text(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace("\r", "&#13;")


def _value(tag_key: str, v: Any, out: list) -> None:
    if v is None:
        out.append(f"<null{tag_key}/>")
    elif isinstance(v, bool):
        out.append(f"<bool{tag_key}>{'true' if v else 'false'}</bool>")
    elif isinstance(v, int):
        out.append(f"<int{tag_key}>{v}</int>")
    elif isinstance(v, float):
        out.append(f"<float{tag_key}>{v!r}</float>")
    elif isinstance(v, str):
        out.append(f"<str{tag_key}>{_text(v)}</str>" if v else f"<str{tag_key}/>")
    elif isinstance(v, Mapping):
        if not v:
            out.append(f"<map{tag_key}/>")
            return
        out.append(f"<map{tag_key}>")
        _entries(v, out)
        out.append("</map>")
    else:
        if not v:
            out.append(f"<list{tag_key}/>")
            return
        out.append(f"<list{tag_key}>")
        for item in v:
            _value("", item, out)
        out.append("</list>")


def _entries(content: Mapping[str, Any], out: list) -> None:
    for k, v in content.items():
        _value(f' k="{_attr(k)}"', v, out)


def serialize_message(m: Message) -> str:
    """Return the canonical wire text of ``m``.

    Equal messages always produce identical text.
    """
    out = [f'<{ROOT_TAG} type="{_attr(m.msg_type)}" rel="{m.reliability.value}">']
    out.append(f'<profile name="{_attr(m.profile_name)}"/>')
    if m.content:
        out.append("<content>")
        _entries(m.content, out)
        out.append("</content>")
    else:
        out.append("<content/>")
    out.append(f'<ts value="{m.timestamp_ms}"/>')
    if m.qos is not None:
        q = m.qos
        attrs = [f'crit="{q.crit}"']
        for name, v in (("period", q.period_ms), ("deadline", q.deadline_ms), ("wcet", q.wcet_ms)):
            if v is not None:
                attrs.append(f'{name}="{v}"')
        out.append(f"<QoS {' '.join(attrs)}/>")
    out.extend(m.extra)
    out.append(f"</{ROOT_TAG}>")
    return "".join(out)


# -- parsing ---------------------------------------------------------------

def _int_attr(el: ET.Element, name: str, where: str) -> Optional[int]:
    raw = el.get(name)
    if raw is None:
        return None
    try:
        return int(raw.strip())
    except ValueError:
        raise MessageError(f"{where}@{name}", f"not an integer: {raw!r}") from None


def _parse_value(el: ET.Element, where: str) -> Any:
    tag = el.tag
    text = el.text or ""
    if tag == "null":
        return None
    if tag == "bool":
        if text not in ("true", "false"):
            raise MessageError(where, f"bad bool {text!r}")
        return text == "true"
    if tag == "int":
        try:
            return int(text)
        except ValueError:
            raise MessageError(where, f"bad int {text!r}") from None
    if tag == "float":
        try:
            return float(text)
        except ValueError:
            raise MessageError(where, f"bad float {text!r}") from None
    if tag == "str":
        return text
    if tag == "map":
        return _parse_entries(el, where)
    if tag == "list":
        return [_parse_value(child, f"{where}[{i}]") for i, child in enumerate(el)]
    raise MessageError(where, f"unknown content element <{tag}>")


def _parse_entries(el: ET.Element, where: str) -> dict:
    result = {}
    for child in el:
        key = child.get("k")
        if key is None:
            raise MessageError(where, f"<{child.tag}> entry without key")
        result[key] = _parse_value(child, f"{where}.{key}")
    return result


def parse_message(text: str | bytes) -> Message:
    """Parse a message document.  Raises :class:`MessageError`."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MessageError("document", f"malformed XML ({exc})") from None
    if root.tag != ROOT_TAG:
        raise MessageError("document", f"missing {ROOT_TAG} root (found <{root.tag}>)")
    msg_type = root.get("type")
    if not msg_type:
        raise MessageError(f"{ROOT_TAG}@type", "missing type")
    rel_raw = root.get("rel", Reliability.BEST_EFFORT.value)
    try:
        rel = Reliability(rel_raw)
    except ValueError:
        raise MessageError(f"{ROOT_TAG}@rel", f"unknown reliability {rel_raw!r}") from None

    profile = content = ts = qos = None
    extra = []
    for child in root:
        if child.tag == "profile" and profile is None:
            profile = child.get("name")
            if not profile:
                raise MessageError("profile@name", "missing name")
        elif child.tag == "content" and content is None:
            content = _parse_entries(child, "content")
        elif child.tag == "ts" and ts is None:
            ts = _int_attr(child, "value", "ts")
            if ts is None:
                raise MessageError("ts@value", "missing value")
        elif child.tag == "QoS" and qos is None:
            qos = QoSSpec(
                crit=_int_attr(child, "crit", "QoS") or 0,
                period_ms=_int_attr(child, "period", "QoS"),
                deadline_ms=_int_attr(child, "deadline", "QoS"),
                wcet_ms=_int_attr(child, "wcet", "QoS"),
            )
        else:
            child.tail = None
            extra.append(ET.tostring(child, encoding="unicode", short_empty_elements=True))
    if profile is None:
        raise MessageError("profile", "missing profile")
    if ts is None:
        raise MessageError("ts", "missing ts")
    return Message(
        msg_type=msg_type,
        profile_name=profile,
        content=content or {},
        timestamp_ms=ts,
        reliability=rel,
        qos=qos,
        extra=tuple(extra),
    )
