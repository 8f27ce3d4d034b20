"""The bridge between a broker and the FaaS servers of one node.

An edge bridge subscribes to each function's call topic, fenced to its
service area. It acknowledges a call on receipt, then tries the local
executors in order. If all of them fail it offloads by publishing a nack
that carries the whole original call. The cloud bridge subscribes with a
world fence to call, nack and call/retry. It is the last resort and
answers failures with an error result.
"""

from __future__ import annotations

import asyncio
import enum
import inspect
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import wire
from .events import EventLog, NullLog
from .executor import InvokeResult
from .geo import Geofence, World, WORLD
from .transport import Channel, open_channel
from .wire import ControlKind, ControlMessage, Message, Topic, TopicKind

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    EDGE = "edge"
    CLOUD = "cloud"


class Origin(enum.Enum):
    DIRECT = "direct"
    OFFLOADED = "offloaded"
    RETRY = "retry"


@dataclass
class BridgeConfig:
    bridge_id: str
    mode: Mode
    service_area: Geofence
    executors: list = field(default_factory=list)
    offload_deadline_ms: float = 10_000.0
    broker_address: str = ""
    heartbeat_interval: float = 0.5
    max_workers: int = 64
    dedup_retention: float = 600.0
    # planned shutdown after this many results; calls arriving in the grace
    # window before the disconnect are dropped unprocessed
    shutdown_after: Optional[int] = None
    shutdown_grace: float = 1.0

    def __post_init__(self):
        if self.mode is Mode.CLOUD and not isinstance(self.service_area, World):
            raise ValueError("cloud bridge must serve the whole world")
        if self.mode is Mode.EDGE and isinstance(self.service_area, World):
            raise ValueError("edge bridge needs a bounded service area")


@dataclass
class PendingCall:
    correlation_id: str
    client_id: str
    function: str
    payload: bytes
    origin: Origin
    attempts: list = field(default_factory=list)


def subscribe_all(config: BridgeConfig, functions) -> list[tuple[Topic, Geofence]]:
    """Subscriptions a bridge holds for the given functions."""
    names = sorted(functions)
    if not names:
        log.warning("%s: no functions to subscribe to", config.bridge_id)
    subs = []
    for name in names:
        if config.mode is Mode.EDGE:
            subs.append((Topic(name, TopicKind.CALL), config.service_area))
        else:
            for kind in (TopicKind.CALL, TopicKind.NACK, TopicKind.CALL_RETRY):
                subs.append((Topic(name, kind), WORLD))
    return subs


def ordered_failover(executors: Sequence, call: PendingCall) -> list:
    """Server selection policy: configured order, each server tried once."""
    return list(executors)


Policy = Callable[[Sequence, PendingCall], list]


class Bridge:
    def __init__(self, config: BridgeConfig, net=None, events: Optional[EventLog] = None, policy: Policy = ordered_failover):
        self.config = config
        self.bridge_id = config.bridge_id
        self.net = net
        self.events = events or NullLog()
        self.policy = policy
        self.state = "new"  # new | running | stopping | stopped | crashed
        self.channel: Optional[Channel] = None
        self.functions: dict[str, list] = {}
        self.results_published = 0
        self._ids = wire.IdGenerator(config.bridge_id)
        self._seen: OrderedDict[str, float] = OrderedDict()
        self._workers = asyncio.Semaphore(config.max_workers)
        self._tasks: set[asyncio.Task] = set()
        self._heartbeat: Optional[asyncio.Task] = None
        self._reader: Optional[asyncio.Task] = None

    @property
    def is_cloud(self) -> bool:
        return self.config.mode is Mode.CLOUD

    # -- lifecycle -------------------------------------------------------------

    async def discover(self) -> dict[str, list]:
        """Ask every executor for its functions; map name -> executors serving it."""
        table: dict[str, list] = {}
        for ex in self.config.executors:
            names = ex.list_functions()
            if inspect.isawaitable(names):
                names = await names
            for name in sorted(names):
                table.setdefault(name, []).append(ex)
        self.functions = table
        return table

    async def start(self):
        await self.discover()
        try:
            self.channel = await open_channel(self.net, self.config.broker_address, wire.ROLE_BRIDGE)
        except (ConnectionError, OSError) as exc:
            raise ConnectionError(f"{self.bridge_id}: broker {self.config.broker_address} unreachable: {exc}") from exc
        self.channel.send(ControlMessage(ControlKind.CONNECT, client_id=self.bridge_id))
        reply = await self.channel.recv()
        if not (isinstance(reply, ControlMessage) and reply.kind is ControlKind.CONNECT_ACK):
            raise ConnectionError(f"{self.bridge_id}: broker refused bridge connection: {reply!r}")
        for topic, fence in subscribe_all(self.config, self.functions):
            self.channel.send(ControlMessage(ControlKind.SUBSCRIBE, topic=topic, geofence=fence))
        self.state = "running"
        self._heartbeat = asyncio.ensure_future(self.heartbeat_loop(self.config.heartbeat_interval))
        self._reader = asyncio.ensure_future(self._read_loop())
        self.events.emit("bridge_up", self.bridge_id, mode=self.config.mode.value,
                         functions=",".join(sorted(self.functions)) or "-")

    async def heartbeat_loop(self, interval: float):
        while self.channel is not None and not self.channel.closed:
            self.channel.send(ControlMessage(ControlKind.PING))
            await asyncio.sleep(interval)

    async def shutdown(self, grace: float = 0.0):
        """Planned shutdown: stop taking work, then tell the broker and leave."""
        if self.state not in ("running", "new"):
            return
        self.state = "stopping"
        self.events.emit("shutdown", self.bridge_id, results=self.results_published)
        if grace > 0:
            await asyncio.sleep(grace)
        if self._heartbeat is not None:
            self._heartbeat.cancel()
        if self.channel is not None and not self.channel.closed:
            self.channel.send(ControlMessage(ControlKind.DISCONNECT))
            self.channel.close()
        self.state = "stopped"
        self.events.emit("disconnect", self.bridge_id)

    def crash(self):
        """Stop silently: no heartbeats, no processing, connection left dangling."""
        self.state = "crashed"
        self.events.emit("crash", self.bridge_id)
        for task in [self._heartbeat, *self._tasks]:
            if task is not None:
                task.cancel()

    def close(self):
        for task in [self._heartbeat, self._reader, *self._tasks]:
            if task is not None:
                task.cancel()
        if self.channel is not None:
            self.channel.close()

    async def _read_loop(self):
        while True:
            frame = await self.channel.recv()
            if frame is None:
                break
            if not isinstance(frame, Message):
                continue
            if self.state != "running":
                self.events.emit("drop", self.bridge_id, frame.correlation_id, state=self.state)
                continue
            if frame.topic.kind is TopicKind.NACK:
                self.handle_nack(frame)
            elif frame.topic.kind in (TopicKind.CALL, TopicKind.CALL_RETRY):
                self.handle_call(frame)

    # -- publishing --------------------------------------------------------------

    def _publish(self, kind: TopicKind, call: Message, payload: bytes = b"") -> Message:
        m = Message(
            msg_id=self._ids.next(),
            correlation_id=call.correlation_id,
            sender_id=self.bridge_id,
            sender_location=call.sender_location,
            topic=Topic(call.topic.function, kind),
            payload=payload,
            reply_broker=call.reply_broker,
        )
        if self.channel is not None and not self.channel.closed:
            self.channel.send(m)
        return m

    def _claim(self, correlation_id: str) -> bool:
        now = asyncio.get_running_loop().time()
        horizon = now - self.config.dedup_retention
        while self._seen and next(iter(self._seen.values())) < horizon:
            self._seen.popitem(last=False)
        if correlation_id in self._seen:
            return False
        self._seen[correlation_id] = now
        return True

    def _spawn(self, coro):
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    # -- call handling -------------------------------------------------------------

    def handle_call(self, call: Message) -> Optional[asyncio.Task]:
        origin = Origin.RETRY if call.topic.kind is TopicKind.CALL_RETRY else Origin.DIRECT
        self.events.emit("recv", self.bridge_id, call.correlation_id, topic=call.topic.kind.value)
        self._publish(TopicKind.ACK, call)
        self.events.emit("ack", self.bridge_id, call.correlation_id)
        if not self._claim(call.correlation_id):
            self.events.emit("duplicate", self.bridge_id, call.correlation_id, topic=call.topic.kind.value)
            return None
        pending = PendingCall(call.correlation_id, call.target_client, call.topic.function, call.payload, origin)
        return self._spawn(self._serve(call, pending))

    def handle_nack(self, nack: Message) -> Optional[asyncio.Task]:
        if not self.is_cloud:
            log.warning("%s: edge bridge ignoring nack %s", self.bridge_id, nack.correlation_id)
            return None
        self.events.emit("recv", self.bridge_id, nack.correlation_id, topic="nack", by=nack.sender_id)
        try:
            call = wire.decode(nack.payload)
        except wire.FrameError:
            call = None
        if not isinstance(call, Message):
            self._finish(nack, wire.ERROR_PREFIX + b"undecodable offloaded call", ok=False)
            return None
        if not self._claim(call.correlation_id):
            self.events.emit("duplicate", self.bridge_id, call.correlation_id, topic="nack")
            return None
        pending = PendingCall(call.correlation_id, call.target_client, call.topic.function, call.payload, Origin.OFFLOADED)
        return self._spawn(self._serve(call, pending))

    async def _serve(self, call: Message, pending: PendingCall):
        async with self._workers:
            result = await self.execute(pending)
        if self.state not in ("running", "stopping"):
            return
        if result is not None and result.ok:
            self._finish(call, result.payload, ok=True)
        elif self.is_cloud:
            reason = result.message if result is not None else "no executor serves this function"
            if result is not None and result.status is wire.InvokeStatus.FUNCTION_ERROR and result.message == "unknown function":
                reason = "unknown function"
            self._finish(call, wire.ERROR_PREFIX + reason.encode("utf-8"), ok=False)
        else:
            self._publish(TopicKind.NACK, call, wire.encode(call))
            self.events.emit("nack", self.bridge_id, call.correlation_id,
                             tried=",".join(pending.attempts) or "-",
                             status=result.status.value if result is not None else "none")

    async def execute(self, pending: PendingCall) -> Optional[InvokeResult]:
        """Try each eligible executor once; the first success wins."""
        candidates = self.functions.get(pending.function, [])
        if not candidates and self.is_cloud:
            # no local server lists it; ask the first one anyway so the error is reported uniformly
            candidates = list(self.config.executors[:1])
        deadline = self.config.offload_deadline_ms / 1000.0
        result = None
        for ex in self.policy(candidates, pending):
            name = getattr(ex, "name", repr(ex))
            if name in pending.attempts:
                continue
            pending.attempts.append(name)
            result = await ex.invoke(pending.function, pending.payload, deadline)
            self.events.emit("invoke", self.bridge_id, pending.correlation_id, executor=name, status=result.status.value)
            if result.ok:
                return result
        return result

    def _finish(self, call: Message, payload: bytes, ok: bool):
        self._publish(TopicKind.RESULT, call, payload)
        self.results_published += 1
        self.events.emit("result", self.bridge_id, call.correlation_id, ok=int(ok))
        limit = self.config.shutdown_after
        if limit is not None and self.results_published >= limit and self.state == "running":
            self._spawn(self.shutdown(self.config.shutdown_grace))
