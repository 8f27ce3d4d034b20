"""Geo-aware pub/sub broker; all instances together form the distributed broker.

Each broker owns one area of the registry. It keeps sessions for the
clients located there and the subscriptions of its co-located bridges. It
also keeps a replicated view of every other broker's bridge subscriptions.
Publications are routed to exactly one subscriber. When that subscriber
sits on another broker, the message is forwarded once to that broker,
which acts as rendezvous point next to the subscriber. Forwarded messages
are never forwarded again.

Routing rules:

* call / call-retry / nack go to a bridge subscription whose geofence
  contains the publisher location. Edge areas beat the world fence, and
  the responsible broker's own bridge beats the rest. A dead local bridge
  is skipped, so its calls fall through to the cloud.
* ack / result go to the client session on ``reply_broker``: the broker
  that accepted the original call, which stamps its id on it.
"""

from __future__ import annotations

import asyncio
import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .events import EventLog, NullLog
from .geo import Geofence, GeoPoint, World, WORLD
from .registry import Registry, responsible_broker
from .transport import Channel, accept_channel, open_channel
from .wire import ControlKind, ControlMessage, Message, Topic, TopicKind

log = logging.getLogger(__name__)

HEARTBEAT_TIMEOUT = 2.0
HANDOFF_DRAIN = 3.0

_BRIDGE_BOUND = (TopicKind.CALL, TopicKind.CALL_RETRY, TopicKind.NACK)
_CLIENT_BOUND = (TopicKind.ACK, TopicKind.RESULT)


class SubKind(enum.Enum):
    CLIENT = "client"
    BRIDGE = "bridge"


@dataclass(frozen=True)
class Subscription:
    subscriber_id: str
    topic: Topic
    geofence: Geofence
    kind: SubKind
    broker_id: str


class Liveness(enum.Enum):
    ALIVE = "alive"
    SUSPECTED = "suspected"
    DEAD = "dead"


@dataclass
class BridgeLiveness:
    bridge_id: str
    last_ping: float
    status: Liveness = Liveness.ALIVE
    disconnected: bool = False


def monitor_bridge(liveness: BridgeLiveness, now: float, timeout: float = HEARTBEAT_TIMEOUT) -> Liveness:
    """Two-stage detector: suspected after one silent timeout, dead after two."""
    if liveness.disconnected:
        return Liveness.DEAD
    silent = now - liveness.last_ping
    if silent >= 2 * timeout:
        return Liveness.DEAD
    if silent >= timeout:
        return Liveness.SUSPECTED
    return Liveness.ALIVE


@dataclass(eq=False)
class ClientSession:
    client_id: str
    channel: Optional[Channel]
    last_location: GeoPoint
    subscriptions: set = field(default_factory=set)
    state: str = "active"  # active | draining | closed

    def send(self, frame) -> bool:
        if self.state == "closed" or self.channel is None:
            return False
        try:
            self.channel.send(frame)
        except (ConnectionError, OSError):
            return False
        return True


@dataclass(eq=False)
class BridgeLink:
    bridge_id: str
    channel: Optional[Channel]
    liveness: BridgeLiveness

    def usable(self) -> bool:
        return self.liveness.status is not Liveness.DEAD and self.channel is not None and not self.channel.closed


@dataclass(frozen=True)
class Route:
    action: str  # deliver | forward | no_subscriber | undeliverable
    target: Optional[str] = None
    redirected: bool = False


class Broker:
    def __init__(
        self,
        broker_id: str,
        registry: Registry,
        net=None,
        events: Optional[EventLog] = None,
        heartbeat_timeout: float = HEARTBEAT_TIMEOUT,
        handoff_drain: float = HANDOFF_DRAIN,
        monitor_interval: Optional[float] = None,
        peer_retry: float = 1.0,
    ):
        self.broker_id = broker_id
        self.registry = registry
        self.record = registry.get(broker_id)
        self.net = net
        self.events = events or NullLog()
        self.heartbeat_timeout = heartbeat_timeout
        self.handoff_drain = handoff_drain
        self.monitor_interval = monitor_interval or heartbeat_timeout / 4
        self.peer_retry = peer_retry
        # (broker_id, subscriber_id, topic) -> bridge subscription, local and replicated
        self.bridge_subs: dict[tuple[str, str, str], Subscription] = {}
        self.bridges: dict[str, BridgeLink] = {}
        self.sessions: dict[str, list[ClientSession]] = {}
        self.peers: dict[str, Channel] = {}
        self._tasks: set[asyncio.Task] = set()
        self._server = None

    # -- lifecycle ---------------------------------------------------------------

    async def start(self, connect_peers: bool = True):
        self._server = await self.net.serve(self.record.address, self._on_connection)
        self._spawn(self._monitor_loop())
        if connect_peers:
            self.connect_peers()
        self.events.emit("broker_up", self.broker_id, address=self.record.address)

    def connect_peers(self):
        for rec in self.registry.records:
            if rec.broker_id != self.broker_id:
                self._spawn(self._peer_link(rec.broker_id, rec.address))

    async def stop(self):
        if self._server is not None:
            self._server.close()
        for task in list(self._tasks):
            task.cancel()
        for link in self.bridges.values():
            if link.channel is not None:
                link.channel.close()
        for sessions in list(self.sessions.values()):
            for s in list(sessions):
                self._close_session(s)
        for ch in self.peers.values():
            ch.close()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    def _now(self) -> float:
        return asyncio.get_running_loop().time()

    # -- connections -------------------------------------------------------------

    async def _on_connection(self, conn):
        role, channel = await accept_channel(conn)
        try:
            if role == wire.ROLE_CLIENT:
                await self._serve_client(channel)
            elif role == wire.ROLE_BRIDGE:
                await self._serve_bridge(channel)
            elif role == wire.ROLE_PEER:
                await self._serve_peer(channel)
        except wire.FrameError as exc:
            log.warning("%s: dropping connection after bad frame: %s", self.broker_id, exc)
        finally:
            channel.close()

    async def _serve_client(self, channel: Channel):
        hello = await channel.recv()
        if not (isinstance(hello, ControlMessage) and hello.kind is ControlKind.CONNECT
                and hello.client_id and hello.location is not None):
            channel.send(ControlMessage(ControlKind.DISCONNECT, reason="protocol error: expected connect with location"))
            return
        session, _ = self.handle_connect(hello.client_id, hello.location, channel)
        while True:
            frame = await channel.recv()
            if frame is None:
                break
            if isinstance(frame, Message):
                if frame.topic.kind in (TopicKind.CALL, TopicKind.CALL_RETRY):
                    self.route_publish(frame, session=session)
                else:
                    log.warning("%s: client %s may not publish %s", self.broker_id, session.client_id, frame.topic)
            elif isinstance(frame, ControlMessage):
                kind = frame.kind
                if kind is ControlKind.LOCATION_UPDATE and frame.location is not None:
                    self.handle_location_update(session, frame.location)
                elif kind is ControlKind.SUBSCRIBE and frame.topic is not None:
                    session.subscriptions.add(frame.topic)
                elif kind is ControlKind.UNSUBSCRIBE and frame.topic is not None:
                    session.subscriptions.discard(frame.topic)
                elif kind is ControlKind.PING:
                    session.send(ControlMessage(ControlKind.PONG))
                elif kind is ControlKind.DISCONNECT:
                    break
        self._close_session(session)

    async def _serve_bridge(self, channel: Channel):
        hello = await channel.recv()
        if not (isinstance(hello, ControlMessage) and hello.kind is ControlKind.CONNECT and hello.client_id):
            channel.send(ControlMessage(ControlKind.DISCONNECT, reason="protocol error: expected bridge connect"))
            return
        link = self.register_bridge(hello.client_id, channel)
        channel.send(ControlMessage(ControlKind.CONNECT_ACK, broker_id=self.broker_id))
        while True:
            frame = await channel.recv()
            if frame is None:
                break
            if isinstance(frame, Message):
                self.route_publish(frame, bridge=link)
            elif not isinstance(frame, ControlMessage):
                continue
            elif frame.kind is ControlKind.PING:
                self.handle_ping(link)
            elif frame.kind is ControlKind.SUBSCRIBE and frame.topic is not None:
                self.add_bridge_subscription(link.bridge_id, frame.topic, frame.geofence or WORLD)
            elif frame.kind is ControlKind.UNSUBSCRIBE and frame.topic is not None:
                self._remove_bridge_sub(self.broker_id, link.bridge_id, frame.topic)
            elif frame.kind is ControlKind.DISCONNECT:
                link.liveness.disconnected = True
                self._set_status(link, Liveness.DEAD)
                break

    async def _serve_peer(self, channel: Channel):
        hello = await channel.recv()
        if not (isinstance(hello, ControlMessage) and hello.kind is ControlKind.CONNECT and hello.broker_id):
            return
        peer = hello.broker_id
        while True:
            frame = await channel.recv()
            if frame is None:
                break
            if isinstance(frame, Message):
                self.route_publish(frame, from_peer=peer)
            elif not isinstance(frame, ControlMessage):
                continue
            elif frame.kind is ControlKind.SUBSCRIBE and frame.topic is not None:
                sub = Subscription(frame.subscriber_id, frame.topic, frame.geofence or WORLD, SubKind.BRIDGE, peer)
                self.bridge_subs[(peer, sub.subscriber_id, str(sub.topic))] = sub
            elif frame.kind is ControlKind.UNSUBSCRIBE and frame.topic is not None:
                self._remove_bridge_sub(peer, frame.subscriber_id, frame.topic)

    async def _peer_link(self, peer_id: str, address: str):
        while True:
            try:
                channel = await open_channel(self.net, address, wire.ROLE_PEER)
            except (ConnectionError, OSError):
                await asyncio.sleep(self.peer_retry)
                continue
            channel.send(ControlMessage(ControlKind.CONNECT, broker_id=self.broker_id))
            for sub in self._local_live_subs():
                channel.send(self._sub_notice(ControlKind.SUBSCRIBE, sub))
            self.peers[peer_id] = channel
            # outbound peer streams carry no inbound traffic; wait for EOF
            while await channel.recv() is not None:
                pass
            self.peers.pop(peer_id, None)
            await asyncio.sleep(self.peer_retry)

    # -- sessions and handoff --------------------------------------------------------

    def handle_connect(self, client_id: str, location: GeoPoint, channel: Optional[Channel] = None):
        """Accept the client if this broker is responsible, else hand it off.

        A handed-off session stays open for the drain period, so a call
        pipelined behind the connect is still routed and answered.
        """
        session = ClientSession(client_id, channel, location)
        self.sessions.setdefault(client_id, []).append(session)
        target = responsible_broker(self.registry, location)
        if target == self.broker_id:
            reply = ControlMessage(ControlKind.CONNECT_ACK, broker_id=self.broker_id)
            self.events.emit("session_open", self.broker_id, client=client_id)
        else:
            reply = ControlMessage(ControlKind.HANDOFF, broker_id=target)
            self._start_drain(session)
            self.events.emit("handoff", self.broker_id, client=client_id, to=target, on="connect")
        session.send(reply)
        return session, reply

    def handle_location_update(self, session: ClientSession, p: GeoPoint) -> Optional[ControlMessage]:
        if session.state == "closed":
            log.warning("%s: location update on closed session of %s ignored", self.broker_id, session.client_id)
            return None
        session.last_location = p
        target = responsible_broker(self.registry, p)
        if target == self.broker_id and session.state == "active":
            reply = ControlMessage(ControlKind.CONNECT_ACK, broker_id=self.broker_id)
        else:
            reply = ControlMessage(ControlKind.HANDOFF, broker_id=target)
            if session.state == "active":
                self._start_drain(session)
                self.events.emit("handoff", self.broker_id, client=session.client_id, to=target, on="location")
        session.send(reply)
        return reply

    def _start_drain(self, session: ClientSession):
        session.state = "draining"
        try:
            loop = asyncio.get_running_loop()
        except RuntimeError:
            return
        loop.call_later(self.handoff_drain, self._close_session, session)

    def _close_session(self, session: ClientSession):
        if session.state == "closed":
            return
        session.state = "closed"
        if session.channel is not None:
            session.channel.close()
        sessions = self.sessions.get(session.client_id, [])
        if session in sessions:
            sessions.remove(session)
        if not sessions:
            self.sessions.pop(session.client_id, None)

    def session_for(self, client_id: str, topic: Optional[Topic] = None) -> Optional[ClientSession]:
        for s in reversed(self.sessions.get(client_id, [])):
            if s.state != "closed" and (topic is None or topic in s.subscriptions):
                return s
        return None

    def active_session(self, client_id: str) -> Optional[ClientSession]:
        for s in reversed(self.sessions.get(client_id, [])):
            if s.state == "active":
                return s
        return None

    # -- bridges and liveness ----------------------------------------------------------

    def register_bridge(self, bridge_id: str, channel: Optional[Channel]) -> BridgeLink:
        now = self._now() if _loop_running() else 0.0
        link = BridgeLink(bridge_id, channel, BridgeLiveness(bridge_id, now))
        self.bridges[bridge_id] = link
        self.events.emit("bridge_status", self.broker_id, bridge=bridge_id, status=Liveness.ALIVE.value)
        return link

    def add_bridge_subscription(self, bridge_id: str, topic: Topic, geofence: Geofence) -> Subscription:
        sub = Subscription(bridge_id, topic, geofence, SubKind.BRIDGE, self.broker_id)
        self.bridge_subs[(self.broker_id, bridge_id, str(topic))] = sub
        self._broadcast(self._sub_notice(ControlKind.SUBSCRIBE, sub))
        return sub

    def _remove_bridge_sub(self, broker_id: str, subscriber_id: Optional[str], topic: Topic):
        sub = self.bridge_subs.pop((broker_id, subscriber_id, str(topic)), None)
        if sub is not None and broker_id == self.broker_id:
            self._broadcast(self._sub_notice(ControlKind.UNSUBSCRIBE, sub))

    def handle_ping(self, link: BridgeLink):
        link.liveness.last_ping = self._now()
        link.liveness.disconnected = False
        self._set_status(link, Liveness.ALIVE)
        if link.channel is not None and not link.channel.closed:
            link.channel.send(ControlMessage(ControlKind.PONG))

    def _set_status(self, link: BridgeLink, status: Liveness):
        old = link.liveness.status
        if old is status:
            return
        link.liveness.status = status
        self.events.emit("bridge_status", self.broker_id, bridge=link.bridge_id, status=status.value)
        # peers stop routing to a dead bridge, and learn about it again on revival
        if status is Liveness.DEAD or old is Liveness.DEAD:
            kind = ControlKind.UNSUBSCRIBE if status is Liveness.DEAD else ControlKind.SUBSCRIBE
            for sub in self.bridge_subs.values():
                if sub.broker_id == self.broker_id and sub.subscriber_id == link.bridge_id:
                    self._broadcast(self._sub_notice(kind, sub))

    def check_liveness(self, now: Optional[float] = None):
        now = self._now() if now is None else now
        for link in self.bridges.values():
            self._set_status(link, monitor_bridge(link.liveness, now, self.heartbeat_timeout))

    async def _monitor_loop(self):
        while True:
            await asyncio.sleep(self.monitor_interval)
            self.check_liveness()

    def _local_live_subs(self):
        for sub in self.bridge_subs.values():
            if sub.broker_id == self.broker_id:
                link = self.bridges.get(sub.subscriber_id)
                if link is None or link.liveness.status is not Liveness.DEAD:
                    yield sub

    def _sub_notice(self, kind: ControlKind, sub: Subscription) -> ControlMessage:
        return ControlMessage(kind, topic=sub.topic, geofence=sub.geofence,
                              subscriber_id=sub.subscriber_id, broker_id=self.broker_id)

    def _broadcast(self, frame):
        for peer, channel in list(self.peers.items()):
            try:
                channel.send(frame)
            except (ConnectionError, OSError):
                self.peers.pop(peer, None)

    # -- routing -------------------------------------------------------------------------

    def subscription_table(self) -> list[Subscription]:
        """Bridge subscriptions (local and replicated) plus local client subscriptions."""
        subs = list(self.bridge_subs.values())
        for client_id in sorted(self.sessions):
            s = self.session_for(client_id)
            if s is not None:
                for topic in sorted(s.subscriptions, key=str):
                    subs.append(Subscription(client_id, topic, WORLD, SubKind.CLIENT, self.broker_id))
        return subs

    def route_publish(
        self,
        m: Message,
        session: Optional[ClientSession] = None,
        bridge: Optional[BridgeLink] = None,
        from_peer: Optional[str] = None,
    ) -> Route:
        origin = "peer" if from_peer else ("client" if session is not None else "bridge")
        if session is not None and m.reply_broker is None:
            m = dataclasses.replace(m, reply_broker=self.broker_id)
        if m.topic.kind in _CLIENT_BOUND:
            route = self._route_to_client(m, from_peer)
        else:
            route = self._route_to_bridge(m, from_peer)
        if route.action == "no_subscriber" and session is not None:
            session.send(ControlMessage(ControlKind.NO_SUBSCRIBER, correlation_id=m.correlation_id))
        self.events.emit(
            "route", self.broker_id, m.correlation_id,
            msg=m.msg_id, topic=m.topic.kind.value, origin=origin,
            action=route.action, to=route.target or "-", redirect=int(route.redirected),
        )
        return route

    def _route_to_client(self, m: Message, from_peer: Optional[str]) -> Route:
        target = m.reply_broker or responsible_broker(self.registry, m.sender_location)
        if target == self.broker_id:
            session = self.session_for(m.target_client, m.topic)
            if session is not None and session.send(m):
                return Route("deliver", m.target_client)
            return Route("undeliverable", m.target_client)
        if from_peer:
            return Route("undeliverable", target)
        return self._forward(m, target)

    def _route_to_bridge(self, m: Message, from_peer: Optional[str]) -> Route:
        loc = m.sender_location
        candidates = [
            s for s in self.bridge_subs.values()
            if s.topic == m.topic and s.geofence.contains(loc)
            and (not from_peer or s.broker_id == self.broker_id)
        ]
        live = [s for s in candidates if s.broker_id != self.broker_id or self.bridges.get(s.subscriber_id, None) is None
                or self.bridges[s.subscriber_id].usable()]
        redirected = len(live) < len(candidates)
        if not live:
            if from_peer:
                return Route("undeliverable", None, redirected)
            return Route("no_subscriber", None, redirected)
        resp = responsible_broker(self.registry, loc)
        best = min(live, key=lambda s: (isinstance(s.geofence, World), s.broker_id != resp, s.broker_id, s.subscriber_id))
        if redirected:
            self.events.emit("redirect", self.broker_id, m.correlation_id, to=best.broker_id, bridge=best.subscriber_id)
        if best.broker_id == self.broker_id:
            link = self.bridges.get(best.subscriber_id)
            if link is None or link.channel is None:
                return Route("undeliverable", best.subscriber_id, redirected)
            try:
                link.channel.send(m)
            except (ConnectionError, OSError):
                return Route("undeliverable", best.subscriber_id, redirected)
            return Route("deliver", best.subscriber_id, redirected)
        return dataclasses.replace(self._forward(m, best.broker_id), redirected=redirected)

    def _forward(self, m: Message, broker_id: str) -> Route:
        channel = self.peers.get(broker_id)
        if channel is None:
            return Route("undeliverable", broker_id)
        try:
            channel.send(m)
        except (ConnectionError, OSError):
            self.peers.pop(broker_id, None)
            return Route("undeliverable", broker_id)
        return Route("forward", broker_id)


def _loop_running() -> bool:
    try:
        asyncio.get_running_loop()
    except RuntimeError:
        return False
    return True
