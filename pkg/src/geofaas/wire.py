"""Topics, message envelopes and the length-prefixed frame codec.

Frame layout::

    +----------------------+-------------------------------+
    | length (4 bytes, BE) | body: UTF-8 JSON, `length` B  |
    +----------------------+-------------------------------+

Every body is a JSON object whose first key is ``type``. Keys are written in
a fixed order per type (see the ``_*_FIELDS`` tuples) so encodings are
byte-stable. Payloads travel base64-encoded; points as ``[lat, lon]``;
geofences in their text form.

Before any frame, a stream opener sends a two byte preamble: one role byte
(client, bridge or peer broker) followed by the protocol version byte.
"""

from __future__ import annotations

import base64
import enum
import itertools
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

from .geo import Geofence, GeoPoint, format_geofence, parse_geofence

MAX_FRAME = 16 * 1024 * 1024
HEADER = struct.Struct(">I")

PROTOCOL_VERSION = 1
ROLE_CLIENT = b"C"
ROLE_BRIDGE = b"B"
ROLE_PEER = b"P"
ROLES = (ROLE_CLIENT, ROLE_BRIDGE, ROLE_PEER)

# prefix marking a Result payload as an error report rather than function output
ERROR_PREFIX = b"!error:"


class TopicKind(enum.Enum):
    CALL = "call"
    ACK = "ack"
    RESULT = "result"
    NACK = "nack"
    CALL_RETRY = "call/retry"


def check_function_name(name: str) -> str:
    if not isinstance(name, str) or not name or "/" in name or any(c.isspace() for c in name):
        raise ValueError(f"invalid function name {name!r}: must be a non-empty token without '/'")
    return name


@dataclass(frozen=True)
class Topic:
    function: str
    kind: TopicKind

    def __post_init__(self):
        check_function_name(self.function)

    def __str__(self):
        return f"/{self.function}/{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "Topic":
        if not text.startswith("/"):
            raise ValueError(f"topic {text!r} must start with '/'")
        function, sep, rest = text[1:].partition("/")
        if not sep:
            raise ValueError(f"topic {text!r} has no kind")
        try:
            kind = TopicKind(rest)
        except ValueError:
            raise ValueError(f"topic {text!r} has unknown kind {rest!r}") from None
        return cls(function, kind)


def topics_for_function(name: str) -> frozenset[Topic]:
    """The five per-function topics: call, ack, result, nack and call/retry."""
    check_function_name(name)
    return frozenset(Topic(name, kind) for kind in TopicKind)


@dataclass(frozen=True)
class Message:
    msg_id: str
    correlation_id: str
    sender_id: str
    sender_location: GeoPoint
    topic: Topic
    payload: bytes = b""
    reply_broker: Optional[str] = None

    @property
    def target_client(self) -> str:
        return correlation_target(self.correlation_id)

    def is_error(self) -> bool:
        return self.payload.startswith(ERROR_PREFIX)


class ControlKind(enum.Enum):
    CONNECT = "connect"
    CONNECT_ACK = "connect_ack"
    LOCATION_UPDATE = "location_update"
    HANDOFF = "handoff"
    SUBSCRIBE = "subscribe"
    UNSUBSCRIBE = "unsubscribe"
    PING = "ping"
    PONG = "pong"
    DISCONNECT = "disconnect"
    NO_SUBSCRIBER = "no_subscriber"


@dataclass(frozen=True)
class ControlMessage:
    """Session-level signalling. Which optional fields matter depends on ``kind``:

    connect: client_id (or broker_id for a peer hello), location
    connect_ack: broker_id
    location_update: location
    handoff: broker_id (the broker to reconnect to)
    subscribe / unsubscribe: topic, geofence, subscriber_id, broker_id (peer dissemination)
    no_subscriber: correlation_id
    """

    kind: ControlKind
    client_id: Optional[str] = None
    location: Optional[GeoPoint] = None
    broker_id: Optional[str] = None
    topic: Optional[Topic] = None
    geofence: Optional[Geofence] = None
    subscriber_id: Optional[str] = None
    correlation_id: Optional[str] = None
    reason: Optional[str] = None


class InvokeStatus(enum.Enum):
    OK = "ok"
    OVERLOADED = "overloaded"
    FUNCTION_ERROR = "function_error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class InvokeRequest:
    """Executor endpoint request: a function name instead of a topic."""

    request_id: str
    function: str
    payload: bytes
    deadline_ms: float


@dataclass(frozen=True)
class InvokeReply:
    request_id: str
    status: InvokeStatus
    payload: bytes = b""
    message: str = ""


@dataclass(frozen=True)
class ListFunctions:
    request_id: str


@dataclass(frozen=True)
class FunctionList:
    request_id: str
    functions: tuple[str, ...]


Frame = Union[Message, ControlMessage, InvokeRequest, InvokeReply, ListFunctions, FunctionList]


class FrameError(ValueError):
    rule = "frame"

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.rule}: {detail}" if detail else self.rule)


class TruncatedFrame(FrameError):
    rule = "truncated frame"


class OversizeFrame(FrameError):
    rule = "oversize frame"


class MalformedFrame(FrameError):
    rule = "malformed body"


# -- ids -------------------------------------------------------------------------

class IdGenerator:
    """Message ids of the form ``<sender_id>-<counter>``."""

    def __init__(self, sender_id: str):
        self.sender_id = sender_id
        self._counter = itertools.count(1)

    def next(self) -> str:
        return f"{self.sender_id}-{next(self._counter)}"


def correlation_target(correlation_id: str) -> str:
    """The client that issued a call, recovered from its message id."""
    sender, sep, _ = correlation_id.rpartition("-")
    return sender if sep else correlation_id


# -- codec -----------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _point(p: Optional[GeoPoint]):
    return None if p is None else [p.lat, p.lon]


def _body(frame: Frame) -> dict:
    if isinstance(frame, Message):
        return {
            "type": "message",
            "msg_id": frame.msg_id,
            "correlation_id": frame.correlation_id,
            "sender_id": frame.sender_id,
            "sender_location": _point(frame.sender_location),
            "topic": str(frame.topic),
            "payload": _b64(frame.payload),
            "reply_broker": frame.reply_broker,
        }
    if isinstance(frame, ControlMessage):
        body = {"type": "control", "kind": frame.kind.value}
        if frame.client_id is not None:
            body["client_id"] = frame.client_id
        if frame.location is not None:
            body["location"] = _point(frame.location)
        if frame.broker_id is not None:
            body["broker_id"] = frame.broker_id
        if frame.topic is not None:
            body["topic"] = str(frame.topic)
        if frame.geofence is not None:
            body["geofence"] = format_geofence(frame.geofence)
        if frame.subscriber_id is not None:
            body["subscriber_id"] = frame.subscriber_id
        if frame.correlation_id is not None:
            body["correlation_id"] = frame.correlation_id
        if frame.reason is not None:
            body["reason"] = frame.reason
        return body
    if isinstance(frame, InvokeRequest):
        return {
            "type": "invoke",
            "request_id": frame.request_id,
            "function": frame.function,
            "payload": _b64(frame.payload),
            "deadline_ms": frame.deadline_ms,
        }
    if isinstance(frame, InvokeReply):
        return {
            "type": "invoke_reply",
            "request_id": frame.request_id,
            "status": frame.status.value,
            "payload": _b64(frame.payload),
            "message": frame.message,
        }
    if isinstance(frame, ListFunctions):
        return {"type": "list_functions", "request_id": frame.request_id}
    if isinstance(frame, FunctionList):
        return {"type": "functions", "request_id": frame.request_id, "functions": list(frame.functions)}
    raise TypeError(f"cannot encode {type(frame).__name__}")


def encode(frame: Frame) -> bytes:
    body = json.dumps(_body(frame), separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise OversizeFrame(f"body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def _get(body: dict, key: str, types):
    if key not in body:
        raise MalformedFrame(f"missing field {key!r}")
    value = body[key]
    if not isinstance(value, types):
        raise MalformedFrame(f"field {key!r} has wrong type {type(value).__name__}")
    return value


def _opt(body: dict, key: str, types):
    if body.get(key) is None:
        return None
    return _get(body, key, types)


def _unb64(value: str) -> bytes:
    try:
        return base64.b64decode(value.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as exc:
        raise MalformedFrame(f"payload is not base64: {exc}") from None


def _unpoint(value) -> GeoPoint:
    if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, (int, float)) for v in value)):
        raise MalformedFrame(f"location must be [lat, lon], got {value!r}")
    try:
        return GeoPoint(value[0], value[1])
    except ValueError as exc:
        raise MalformedFrame(f"invalid location: {exc}") from None


def _untopic(value: str) -> Topic:
    try:
        return Topic.parse(value)
    except ValueError as exc:
        raise MalformedFrame(str(exc)) from None


def _from_body(body) -> Frame:
    if not isinstance(body, dict):
        raise MalformedFrame("body must be a JSON object")
    kind = _get(body, "type", str)
    if kind == "message":
        return Message(
            msg_id=_get(body, "msg_id", str),
            correlation_id=_get(body, "correlation_id", str),
            sender_id=_get(body, "sender_id", str),
            sender_location=_unpoint(_get(body, "sender_location", list)),
            topic=_untopic(_get(body, "topic", str)),
            payload=_unb64(_get(body, "payload", str)),
            reply_broker=_opt(body, "reply_broker", str),
        )
    if kind == "control":
        try:
            ckind = ControlKind(_get(body, "kind", str))
        except ValueError:
            raise MalformedFrame(f"unknown control kind {body['kind']!r}") from None
        location = _opt(body, "location", list)
        topic = _opt(body, "topic", str)
        fence = _opt(body, "geofence", str)
        try:
            fence = None if fence is None else parse_geofence(fence)
        except ValueError as exc:
            raise MalformedFrame(str(exc)) from None
        return ControlMessage(
            kind=ckind,
            client_id=_opt(body, "client_id", str),
            location=None if location is None else _unpoint(location),
            broker_id=_opt(body, "broker_id", str),
            topic=None if topic is None else _untopic(topic),
            geofence=fence,
            subscriber_id=_opt(body, "subscriber_id", str),
            correlation_id=_opt(body, "correlation_id", str),
            reason=_opt(body, "reason", str),
        )
    if kind == "invoke":
        return InvokeRequest(
            request_id=_get(body, "request_id", str),
            function=_get(body, "function", str),
            payload=_unb64(_get(body, "payload", str)),
            deadline_ms=float(_get(body, "deadline_ms", (int, float))),
        )
    if kind == "invoke_reply":
        try:
            status = InvokeStatus(_get(body, "status", str))
        except ValueError:
            raise MalformedFrame(f"unknown invoke status {body['status']!r}") from None
        return InvokeReply(
            request_id=_get(body, "request_id", str),
            status=status,
            payload=_unb64(_get(body, "payload", str)),
            message=_get(body, "message", str),
        )
    if kind == "list_functions":
        return ListFunctions(request_id=_get(body, "request_id", str))
    if kind == "functions":
        names = _get(body, "functions", list)
        if not all(isinstance(n, str) for n in names):
            raise MalformedFrame("functions must be a list of strings")
        return FunctionList(request_id=_get(body, "request_id", str), functions=tuple(names))
    raise MalformedFrame(f"unknown frame type {kind!r}")


def _decode_body(raw: bytes) -> Frame:
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedFrame(f"body is not UTF-8 JSON: {exc}") from None
    return _from_body(body)


def _frame_length(data, offset: int) -> int:
    (length,) = HEADER.unpack_from(data, offset)
    if length > MAX_FRAME:
        raise OversizeFrame(f"declared length {length} exceeds {MAX_FRAME}")
    return length


def decode(data: bytes) -> Frame:
    """Decode exactly one frame."""
    if len(data) < HEADER.size:
        raise TruncatedFrame(f"need {HEADER.size} header bytes, got {len(data)}")
    length = _frame_length(data, 0)
    end = HEADER.size + length
    if len(data) < end:
        raise TruncatedFrame(f"declared {length} body bytes, got {len(data) - HEADER.size}")
    if len(data) > end:
        raise MalformedFrame(f"{len(data) - end} trailing bytes after frame")
    return _decode_body(bytes(data[HEADER.size:end]))


def decode_all(data: bytes) -> list[Frame]:
    decoder = FrameDecoder()
    frames = decoder.feed(data)
    if decoder.pending:
        raise TruncatedFrame(f"{decoder.pending} bytes of an incomplete frame")
    return frames


class FrameDecoder:
    """Incremental decoder for a byte stream; holds at most one partial frame."""

    def __init__(self):
        self._buf = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        pos = 0
        while len(self._buf) - pos >= HEADER.size:
            length = _frame_length(self._buf, pos)
            end = pos + HEADER.size + length
            if len(self._buf) < end:
                break
            frames.append(_decode_body(bytes(self._buf[pos + HEADER.size:end])))
            pos = end
        del self._buf[:pos]
        return frames
