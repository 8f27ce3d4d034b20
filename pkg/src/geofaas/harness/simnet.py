"""In-process network on a virtual clock.

``VirtualClockLoop`` is an asyncio loop whose clock only moves when the loop
would otherwise block. It jumps straight to the next timer. Whole scenarios
run in milliseconds of wall time and are deterministic for a given seed.

``SimNetwork`` implements the same connect/serve contract as the TCP
transport. Each node gets a host view. Bytes written on a connection
arrive after the one-way latency between the two hosts. Per-direction
FIFO order holds even with jitter.
"""

from __future__ import annotations

import asyncio
import random
import selectors
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from ..transport import Handler, split_address


class DeadlockError(RuntimeError):
    pass


class _VirtualSelector(selectors.BaseSelector):
    """Polls the real selector without blocking; a would-be wait advances the clock."""

    def __init__(self):
        self._inner = selectors.DefaultSelector()
        self.loop: Optional["VirtualClockLoop"] = None

    def register(self, fileobj, events, data=None):
        return self._inner.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._inner.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._inner.modify(fileobj, events, data)

    def get_key(self, fileobj):
        return self._inner.get_key(fileobj)

    def get_map(self):
        return self._inner.get_map()

    def close(self):
        self._inner.close()

    def select(self, timeout=None):
        ready = self._inner.select(0)
        if ready:
            return ready
        if timeout is None:
            raise DeadlockError("virtual clock: nothing scheduled and nothing ready")
        if timeout > 0:
            self.loop._now += timeout
        return []


class VirtualClockLoop(asyncio.SelectorEventLoop):
    def __init__(self):
        selector = _VirtualSelector()
        self._now = 0.0
        super().__init__(selector)
        selector.loop = self

    def time(self) -> float:
        return self._now


def run_virtual(coro):
    """Run ``coro`` to completion on a fresh virtual-clock loop."""
    loop = VirtualClockLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_all(loop)
        finally:
            asyncio.set_event_loop(None)
            loop.close()


def _cancel_all(loop):
    tasks = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for t in tasks:
        t.cancel()
    if tasks:
        loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))


# -- latency model -------------------------------------------------------------------

@dataclass
class LatencyMatrix:
    """One-way latency (seconds) between host zones; the same host costs 0.

    ``zones`` maps host -> zone name (``client``, ``edge``, ``cloud``).
    ``pairs`` holds latencies keyed by the sorted zone pair.
    """

    zones: dict = field(default_factory=dict)
    pairs: dict = field(default_factory=dict)
    default: float = 0.025
    jitter: float = 0.0

    def base(self, a: str, b: str) -> float:
        if a == b:
            return 0.0
        za, zb = self.zones.get(a, a), self.zones.get(b, b)
        key = tuple(sorted((za, zb)))
        return self.pairs.get(key, self.default)


def default_latencies(jitter_ms: float = 0.0) -> LatencyMatrix:
    ms = 0.001
    return LatencyMatrix(
        pairs={
            ("client", "edge"): 1 * ms,
            ("client", "cloud"): 25 * ms,
            ("cloud", "edge"): 25 * ms,
            ("edge", "edge"): 5 * ms,
            ("client", "client"): 1 * ms,
        },
        default=25 * ms,
        jitter=jitter_ms * ms,
    )


# -- connections ---------------------------------------------------------------------

class SimConnection:
    def __init__(self, net: "SimNetwork", local: str, remote: str):
        self.net = net
        self.local = local
        self.remote = remote
        self.peer: Optional["SimConnection"] = None
        self._inbox: deque = deque()
        self._wakeup: Optional[asyncio.Future] = None
        self._eof = False
        self._closed = False
        self._in_flight: deque = deque()  # outbound chunks not yet delivered

    @property
    def closed(self) -> bool:
        return self._closed

    def write(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionError(f"{self.local}->{self.remote}: connection closed")
        if data:
            self._send(bytes(data))

    def _send(self, item):
        self._in_flight.append(item)
        delay = self.net.delay(self.local, self.remote)
        asyncio.get_running_loop().call_later(delay, self._deliver_one)

    def _deliver_one(self):
        # timers may fire out of order under jitter; the queue keeps FIFO
        item = self._in_flight.popleft()
        peer = self.peer
        if peer is None or peer._closed:
            return
        if item is None:
            peer._eof = True
        else:
            self.net.bytes_delivered += len(item)
            peer._inbox.append(item)
        peer._wake()

    def _wake(self):
        if self._wakeup is not None and not self._wakeup.done():
            self._wakeup.set_result(None)

    async def read(self) -> bytes:
        while True:
            if self._closed:
                return b""
            if self._inbox:
                return self._inbox.popleft()
            if self._eof:
                return b""
            self._wakeup = asyncio.get_running_loop().create_future()
            await self._wakeup

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._send(None)  # EOF travels behind the data already in flight
        self._wake()


class SimServer:
    def __init__(self, net: "SimNetwork", address: str, handler: Handler):
        self.net = net
        self.address = address
        self.handler = handler
        self._tasks: set = set()

    def close(self):
        if self.net.listeners.get(self.address) is self:
            del self.net.listeners[self.address]

    def _accept(self, conn: SimConnection):
        task = asyncio.ensure_future(self._run(conn))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _run(self, conn: SimConnection):
        try:
            await self.handler(conn)
        finally:
            conn.close()


class SimNetwork:
    def __init__(self, latencies: Optional[LatencyMatrix] = None, seed: int = 0):
        self.latencies = latencies or default_latencies()
        self.rng = random.Random(seed)
        self.listeners: dict[str, SimServer] = {}
        self.bytes_delivered = 0
        self.connections = 0

    def delay(self, a: str, b: str) -> float:
        d = self.latencies.base(a, b)
        if self.latencies.jitter > 0 and a != b:
            d += self.rng.uniform(0.0, self.latencies.jitter)
        return d

    def host(self, name: str, zone: Optional[str] = None) -> "HostView":
        if zone is not None:
            self.latencies.zones[name] = zone
        return HostView(self, name)

    async def _connect(self, local: str, address: str) -> SimConnection:
        remote, _ = split_address(address)
        # SYN / SYN-ACK round trip before the stream is usable
        await asyncio.sleep(self.delay(local, remote) + self.delay(remote, local))
        server = self.listeners.get(address)
        if server is None:
            raise ConnectionRefusedError(f"{local}: nothing listening on {address}")
        a = SimConnection(self, local, remote)
        b = SimConnection(self, remote, local)
        a.peer, b.peer = b, a
        self.connections += 1
        server._accept(b)
        return a

    def _serve(self, address: str, handler: Handler) -> SimServer:
        if address in self.listeners:
            raise OSError(f"address {address} already in use")
        server = SimServer(self, address, handler)
        self.listeners[address] = server
        return server


class HostView:
    """The network as seen from one host; satisfies the transport ``Network`` contract."""

    def __init__(self, net: SimNetwork, name: str):
        self.net = net
        self.name = name

    async def connect(self, address: str) -> SimConnection:
        return await self.net._connect(self.name, address)

    async def serve(self, address: str, handler: Handler) -> SimServer:
        host, _ = split_address(address)
        if host != self.name:
            raise OSError(f"{self.name} cannot listen on {address}")
        return self.net._serve(address, handler)
