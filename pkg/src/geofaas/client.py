"""Client library: function calls that look local.

A call is published on ``/f/call`` from the client's current location. The
library then waits for the ack and the result. If the ack never arrives,
or the broker reports no subscriber, or the result times out, it retries
once (by default) on ``/f/call/retry``, which only the cloud serves.
Handoffs are followed transparently. The new session is established before
``update_location`` returns. The old session stays readable until the
broker closes it, so results of calls made there still arrive.
"""

from __future__ import annotations

import asyncio
import enum
import threading
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .events import EventLog, NullLog
from .geo import GeoPoint
from .registry import Registry
from .transport import Channel, open_channel
from .wire import ControlKind, ControlMessage, Message, Topic, TopicKind


class Phase(enum.Enum):
    SENT = "sent"
    ACKED = "acked"
    RESOLVED = "resolved"
    FAILED = "failed"


_ORDER = {Phase.SENT: 0, Phase.ACKED: 1, Phase.RESOLVED: 2, Phase.FAILED: 2}


class Stage(enum.Enum):
    SEND_FAILED = "SendFailed"
    NO_ACK = "NoAck"
    NO_RESULT = "NoResult"
    CLOUD_RETRY_FAILED = "CloudRetryFailed"
    FUNCTION_ERROR = "FunctionError"


class ClientError(Exception):
    pass


class ConnectError(ClientError):
    pass


class CallFailed(ClientError):
    def __init__(self, stage: Stage, correlation_id: str, detail: str = ""):
        self.stage = stage
        self.correlation_id = correlation_id
        self.detail = detail
        super().__init__(f"{stage.value} for {correlation_id}" + (f": {detail}" if detail else ""))


@dataclass
class ClientConfig:
    client_id: str
    bootstrap_broker: str
    ack_timeout_ms: float = 2000.0
    result_timeout_ms: float = 10_000.0
    max_retries: int = 1

    def __post_init__(self):
        if self.ack_timeout_ms > self.result_timeout_ms:
            raise ValueError("ack_timeout_ms must not exceed result_timeout_ms")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


@dataclass
class CallState:
    correlation_id: str
    phase: Phase = Phase.SENT
    attempts: int = 0
    serving_node_hint: Optional[str] = None
    payload: Optional[bytes] = None
    reason: Optional[str] = None
    trace: list = field(default_factory=lambda: [Phase.SENT])

    def advance(self, phase: Phase):
        if self.phase in (Phase.RESOLVED, Phase.FAILED):
            return
        if _ORDER[phase] < _ORDER[self.phase]:
            raise ValueError(f"phase regression {self.phase.value} -> {phase.value}")
        if phase is not self.phase:
            self.phase = phase
            self.trace.append(phase)


class _Pending:
    def __init__(self, state: CallState):
        self.state = state
        self.acked = asyncio.Event()
        self.nosub = asyncio.Event()
        self.result: asyncio.Future = asyncio.get_running_loop().create_future()
        self.ack_from: Optional[str] = None


@dataclass(eq=False)
class _Session:
    broker_id: str
    channel: Channel
    reader: Optional[asyncio.Task] = None
    replies: Optional[asyncio.Queue] = None


class CallHandle:
    """Start/poll view of an in-flight call."""

    def __init__(self, state: CallState, task: asyncio.Task):
        self.state = state
        self.task = task

    def done(self) -> bool:
        return self.task.done()

    def result(self) -> bytes:
        return self.task.result()

    def __await__(self):
        return self.task.__await__()


class Client:
    def __init__(self, config: ClientConfig, registry: Registry, net=None, events: Optional[EventLog] = None):
        self.config = config
        self.client_id = config.client_id
        self.registry = registry
        self.net = net
        self.events = events or NullLog()
        self.location: Optional[GeoPoint] = None
        self.session: Optional[_Session] = None
        self._old_sessions: list[_Session] = []
        self._functions: set[str] = set()
        self._pending: dict[str, _Pending] = {}
        self._ids = wire.IdGenerator(config.client_id)
        self.handoffs = 0

    @property
    def broker_id(self) -> Optional[str]:
        return self.session.broker_id if self.session else None

    # -- connection management ---------------------------------------------------

    def _address(self, broker_id: str) -> str:
        return self.registry.get(broker_id).address

    async def connect(self, location: GeoPoint) -> str:
        """Connect via the bootstrap broker and follow handoffs to the responsible one."""
        self.location = location
        await self._connect_to(self.config.bootstrap_broker, None)
        return self.broker_id

    async def _connect_to(self, address: str, broker_id: Optional[str]):
        hops = 0
        while True:
            try:
                channel = await open_channel(self.net, address, wire.ROLE_CLIENT)
            except (ConnectionError, OSError) as exc:
                raise ConnectError(f"cannot reach broker at {address}: {exc}") from exc
            session = _Session(broker_id or address, channel, replies=asyncio.Queue())
            session.reader = asyncio.ensure_future(self._read_loop(session))
            channel.send(ControlMessage(ControlKind.CONNECT, client_id=self.client_id, location=self.location))
            reply = await session.replies.get()
            if reply is None:
                raise ConnectError(f"broker at {address} closed the connection")
            if reply.kind is ControlKind.CONNECT_ACK:
                session.broker_id = reply.broker_id
                self._adopt(session)
                return
            if reply.kind is ControlKind.HANDOFF:
                hops += 1
                if hops > len(self.registry.records):
                    raise ConnectError("handoff loop exceeds registry size; registries disagree?")
                self.events.emit("redirect_connect", self.client_id, to=reply.broker_id)
                self._old_sessions.append(session)
                address, broker_id = self._address(reply.broker_id), reply.broker_id
                continue
            raise ConnectError(f"unexpected connect reply {reply.kind.value}: {reply.reason or ''}")

    def _adopt(self, session: _Session):
        previous = self.session
        if previous is not None:
            self._old_sessions.append(previous)
        self.session = session
        for name in sorted(self._functions):
            self._subscribe(session, name)
        self.events.emit("connected", self.client_id, broker=session.broker_id,
                         prev=previous.broker_id if previous else "-")

    def _subscribe(self, session: _Session, function: str):
        for kind in (TopicKind.ACK, TopicKind.RESULT):
            session.channel.send(ControlMessage(ControlKind.SUBSCRIBE, topic=Topic(function, kind)))

    async def update_location(self, p: GeoPoint) -> str:
        """Report a new position; reconnects if the broker hands the client off."""
        if self.session is None:
            raise ClientError("not connected")
        self.location = p
        session = self.session
        self.events.emit("location_update", self.client_id, broker=session.broker_id, lat=f"{p.lat:.6f}", lon=f"{p.lon:.6f}")
        try:
            session.channel.send(ControlMessage(ControlKind.LOCATION_UPDATE, location=p))
        except (ConnectionError, OSError) as exc:
            raise ClientError(f"session with {session.broker_id} lost: {exc}") from exc
        reply = await session.replies.get()
        if reply is None:
            raise ClientError(f"session with {session.broker_id} closed")
        if reply.kind is ControlKind.HANDOFF:
            self.handoffs += 1
            self.events.emit("handoff", self.client_id, frm=session.broker_id, to=reply.broker_id)
            await self._connect_to(self._address(reply.broker_id), reply.broker_id)
        return self.broker_id

    async def _read_loop(self, session: _Session):
        try:
            while True:
                frame = await session.channel.recv()
                if frame is None:
                    break
                if isinstance(frame, Message):
                    self._on_message(frame)
                elif isinstance(frame, ControlMessage):
                    if frame.kind is ControlKind.NO_SUBSCRIBER:
                        pending = self._pending.get(frame.correlation_id)
                        if pending is not None:
                            pending.nosub.set()
                    elif frame.kind in (ControlKind.CONNECT_ACK, ControlKind.HANDOFF, ControlKind.DISCONNECT):
                        session.replies.put_nowait(frame)
        except wire.FrameError:
            pass
        finally:
            session.replies.put_nowait(None)
            if session in self._old_sessions:
                self._old_sessions.remove(session)

    def _on_message(self, m: Message):
        pending = self._pending.get(m.correlation_id)
        if pending is None:
            return
        if m.topic.kind is TopicKind.ACK:
            if pending.ack_from is None:
                pending.ack_from = m.sender_id
            pending.state.advance(Phase.ACKED)
            pending.acked.set()
        elif m.topic.kind is TopicKind.RESULT and not pending.result.done():
            pending.result.set_result(m)

    async def close(self):
        for session in [self.session, *self._old_sessions]:
            if session is None:
                continue
            try:
                session.channel.send(ControlMessage(ControlKind.DISCONNECT))
            except (ConnectionError, OSError):
                pass
            session.channel.close()
            if session.reader is not None:
                session.reader.cancel()
        self.session = None
        self._old_sessions = []

    # -- calls ---------------------------------------------------------------------

    def start_call(self, function: str, payload: bytes, location: Optional[GeoPoint] = None) -> CallHandle:
        wire.check_function_name(function)
        corr = self._ids.next()
        state = CallState(corr)
        task = asyncio.ensure_future(self._call(function, payload, location, state))
        return CallHandle(state, task)

    async def call(self, function: str, payload: bytes, location: Optional[GeoPoint] = None) -> bytes:
        return await self.start_call(function, payload, location)

    async def _call(self, function: str, payload: bytes, location: Optional[GeoPoint], state: CallState) -> bytes:
        if self.session is None:
            raise ClientError("not connected")
        if location is not None:
            self.location = location
        loc = self.location
        if function not in self._functions:
            self._functions.add(function)
            self._subscribe(self.session, function)
        corr = state.correlation_id
        pending = _Pending(state)
        self._pending[corr] = pending
        loop = asyncio.get_running_loop()
        start = loop.time()
        self.events.emit("call_start", self.client_id, corr, fn=function, broker=self.session.broker_id,
                         lat=f"{loc.lat:.6f}", lon=f"{loc.lon:.6f}")
        stage = Stage.NO_ACK
        try:
            for attempt in range(1 + self.config.max_retries):
                kind = TopicKind.CALL if attempt == 0 else TopicKind.CALL_RETRY
                msg_id = corr if attempt == 0 else self._ids.next()
                m = Message(msg_id, corr, self.client_id, loc, Topic(function, kind), payload)
                state.attempts += 1
                try:
                    self.session.channel.send(m)
                except (ConnectionError, OSError):
                    stage = Stage.SEND_FAILED
                    continue
                self.events.emit("publish", self.client_id, corr, topic=kind.value, broker=self.session.broker_id)
                outcome = await self._await_reply(pending)
                if outcome is None:
                    result = pending.result.result()
                    state.serving_node_hint = result.sender_id
                    latency = (loop.time() - start) * 1000.0
                    if result.is_error():
                        detail = result.payload[len(wire.ERROR_PREFIX):].decode("utf-8", "replace")
                        state.reason = detail
                        state.advance(Phase.FAILED)
                        self.events.emit("failed", self.client_id, corr, stage=Stage.FUNCTION_ERROR.value,
                                         by=result.sender_id, latency_ms=latency)
                        raise CallFailed(Stage.FUNCTION_ERROR, corr, detail)
                    state.payload = result.payload
                    state.advance(Phase.RESOLVED)
                    self.events.emit("resolved", self.client_id, corr, by=result.sender_id, latency_ms=latency,
                                     attempts=state.attempts)
                    return result.payload
                stage = outcome
                self.events.emit("timeout", self.client_id, corr, stage=stage.value, attempt=attempt + 1)
            final = Stage.CLOUD_RETRY_FAILED if self.config.max_retries > 0 else stage
            state.reason = final.value
            state.advance(Phase.FAILED)
            self.events.emit("failed", self.client_id, corr, stage=final.value,
                             latency_ms=(loop.time() - start) * 1000.0)
            raise CallFailed(final, corr, f"last stage {stage.value}")
        finally:
            self._pending.pop(corr, None)

    async def _await_reply(self, pending: _Pending) -> Optional[Stage]:
        """Wait for ack then result. ``None`` means the result has arrived."""
        pending.acked.clear()
        pending.nosub.clear()
        ack_wait = asyncio.ensure_future(pending.acked.wait())
        nosub_wait = asyncio.ensure_future(pending.nosub.wait())
        try:
            await asyncio.wait({ack_wait, nosub_wait, pending.result},
                               timeout=self.config.ack_timeout_ms / 1000.0,
                               return_when=asyncio.FIRST_COMPLETED)
            if pending.result.done():
                return None
            if not ack_wait.done():
                return Stage.NO_ACK
            await asyncio.wait({nosub_wait, pending.result}, timeout=self.config.result_timeout_ms / 1000.0,
                               return_when=asyncio.FIRST_COMPLETED)
            if pending.result.done():
                return None
            return Stage.NO_RESULT
        finally:
            ack_wait.cancel()
            nosub_wait.cancel()


class BlockingClient:
    """Thread-backed wrapper for callers without an event loop (real sockets only)."""

    def __init__(self, config: ClientConfig, registry: Registry, net, events: Optional[EventLog] = None):
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)
        self._thread.start()
        self.client = self._run(self._make(config, registry, net, events))

    async def _make(self, config, registry, net, events):
        return Client(config, registry, net, events)

    def _run(self, coro):
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result()

    def connect(self, location: GeoPoint) -> str:
        return self._run(self.client.connect(location))

    def update_location(self, p: GeoPoint) -> str:
        return self._run(self.client.update_location(p))

    def call(self, function: str, payload: bytes) -> bytes:
        return self._run(self.client.call(function, payload))

    def close(self):
        self._run(self.client.close())
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
