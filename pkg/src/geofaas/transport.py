"""Byte-stream transport contract and the TCP implementation.

Nodes only see :class:`Connection` objects handed out by a network: a
reliable, ordered byte stream with ``write``/``read``/``close``. The
simulated network in :mod:`geofaas.harness.simnet` honours the same contract.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Awaitable, Callable, Optional, Protocol

from . import wire

log = logging.getLogger(__name__)


class Connection(Protocol):
    def write(self, data: bytes) -> None: ...

    async def read(self) -> bytes: ...

    def close(self) -> None: ...

    @property
    def closed(self) -> bool: ...


Handler = Callable[[Connection], Awaitable[None]]


class Network(Protocol):
    async def connect(self, address: str) -> Connection: ...

    async def serve(self, address: str, handler: Handler): ...


def split_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ValueError(f"address {address!r} is not host:port")
    return host, int(port)


class Channel:
    """Frames on top of a connection."""

    def __init__(self, conn: Connection):
        self.conn = conn
        self._decoder = wire.FrameDecoder()
        self._ready: list = []

    def send(self, frame) -> None:
        self.conn.write(wire.encode(frame))

    def send_raw(self, data: bytes) -> None:
        self.conn.write(data)

    async def read_exact(self, n: int) -> Optional[bytes]:
        """Read ``n`` raw bytes ahead of framed traffic (the stream preamble)."""
        buf = bytearray()
        while len(buf) < n:
            chunk = await self.conn.read()
            if not chunk:
                return None
            buf += chunk
        self._ready.extend(self._decoder.feed(bytes(buf[n:])))
        return bytes(buf[:n])

    async def recv(self):
        """Next frame, or ``None`` once the peer has closed the stream."""
        while not self._ready:
            chunk = await self.conn.read()
            if not chunk:
                return None
            self._ready.extend(self._decoder.feed(chunk))
        return self._ready.pop(0)

    def close(self) -> None:
        self.conn.close()

    @property
    def closed(self) -> bool:
        return self.conn.closed


async def open_channel(net: Network, address: str, role: bytes) -> Channel:
    conn = await net.connect(address)
    channel = Channel(conn)
    channel.send_raw(role + bytes([wire.PROTOCOL_VERSION]))
    return channel


async def accept_channel(conn: Connection) -> tuple[Optional[bytes], Channel]:
    """Read the role/version preamble; returns (role, channel) or (None, channel)."""
    channel = Channel(conn)
    head = await channel.read_exact(2)
    if head is None:
        return None, channel
    role, version = head[:1], head[1]
    if role not in wire.ROLES or version != wire.PROTOCOL_VERSION:
        log.warning("rejecting stream with preamble %r", head)
        return None, channel
    return role, channel


# -- TCP ---------------------------------------------------------------------------

class TcpConnection:
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer
        self._closed = False

    def write(self, data: bytes) -> None:
        if self._closed or self._writer.is_closing():
            raise ConnectionError("connection closed")
        self._writer.write(data)

    async def read(self) -> bytes:
        try:
            return await self._reader.read(65536)
        except (ConnectionError, OSError):
            return b""

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._writer.close()

    @property
    def closed(self) -> bool:
        return self._closed


class TcpNetwork:
    async def connect(self, address: str) -> TcpConnection:
        host, port = split_address(address)
        reader, writer = await asyncio.open_connection(host, port)
        return TcpConnection(reader, writer)

    async def serve(self, address: str, handler: Handler):
        host, port = split_address(address)

        async def on_client(reader, writer):
            conn = TcpConnection(reader, writer)
            try:
                await handler(conn)
            finally:
                conn.close()

        return await asyncio.start_server(on_client, host, port)
