"""Single-node function runtime with admission control.

Functions are registered statically. Each one has a concurrency bound.
An invocation that would exceed it is rejected immediately with
``OVERLOADED`` rather than queued. Compute time can be modelled with a delay
(scaled by a per-node speed factor) so that simulated nodes differ in speed
the way real edge and cloud hardware do.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from . import wire
from .transport import Channel, Connection
from .wire import InvokeStatus

log = logging.getLogger(__name__)

Handler = Callable[[bytes], bytes]
# seconds of compute for a payload on a reference node, or a constant
DelayModel = Union[float, Callable[[bytes], float], None]


@dataclass(frozen=True)
class FunctionSpec:
    name: str
    handler: Handler
    max_concurrent: int = 4
    exec_delay: DelayModel = None

    def __post_init__(self):
        wire.check_function_name(self.name)
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be positive")

    def delay_for(self, payload: bytes) -> Optional[float]:
        if self.exec_delay is None:
            return None
        if callable(self.exec_delay):
            return float(self.exec_delay(payload))
        return float(self.exec_delay)


@dataclass(frozen=True)
class InvokeResult:
    status: InvokeStatus
    payload: bytes = b""
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is InvokeStatus.OK

    @classmethod
    def success(cls, payload: bytes) -> "InvokeResult":
        return cls(InvokeStatus.OK, payload)


OVERLOADED = InvokeResult(InvokeStatus.OVERLOADED, message="capacity exhausted")
TIMED_OUT = InvokeResult(InvokeStatus.TIMEOUT, message="deadline exceeded")


# -- sieve benchmark ----------------------------------------------------------------

def sieve(n: int) -> int:
    """Number of primes strictly below ``n`` (sieve of Eratosthenes)."""
    if n < 3:
        return 0
    flags = bytearray([1]) * n
    flags[0] = flags[1] = 0
    i = 2
    while i * i < n:
        if flags[i]:
            flags[i * i::i] = bytes(len(range(i * i, n, i)))
        i += 1
    return sum(flags)


# edge reference: about 6 ms for n = 10_000, linear in n
SIEVE_MS_PER_10K = 6.0


def _sieve_arg(payload: bytes) -> int:
    try:
        text = payload.decode("utf-8").strip()
        n = int(text)
    except (UnicodeDecodeError, ValueError):
        raise ValueError(f"sieve expects a decimal integer, got {payload[:32]!r}") from None
    if n < 0:
        raise ValueError("sieve argument must be non-negative")
    return n


def sieve_handler(payload: bytes) -> bytes:
    return str(sieve(_sieve_arg(payload))).encode("utf-8")


def sieve_cost(payload: bytes) -> float:
    try:
        n = _sieve_arg(payload)
    except ValueError:
        return 0.0
    return SIEVE_MS_PER_10K * n / 10_000 / 1000.0


def sieve_spec(max_concurrent: int = 4, modelled: bool = True) -> FunctionSpec:
    return FunctionSpec("sieve", sieve_handler, max_concurrent, sieve_cost if modelled else None)


# -- executor -----------------------------------------------------------------------

class Executor:
    """In-process FaaS server.

    ``speed`` multiplies modelled compute time: 0.5 means twice as fast as the
    reference node.
    """

    def __init__(self, functions=(), speed: float = 1.0, name: str = "executor"):
        if speed <= 0:
            raise ValueError("speed multiplier must be positive")
        self.name = name
        self.speed = speed
        self._functions: dict[str, FunctionSpec] = {}
        self._inflight: dict[str, int] = {}
        for spec in functions:
            self.register(spec)

    def register(self, spec: FunctionSpec) -> None:
        if spec.name in self._functions:
            raise ValueError(f"function {spec.name!r} already registered")
        self._functions[spec.name] = spec
        self._inflight[spec.name] = 0

    def list_functions(self) -> set[str]:
        return set(self._functions)

    def inflight(self, name: str) -> int:
        return self._inflight.get(name, 0)

    async def invoke(self, name: str, payload: bytes, deadline: float) -> InvokeResult:
        """Run ``name`` with at most ``deadline`` seconds of budget. Never raises."""
        spec = self._functions.get(name)
        if spec is None:
            return InvokeResult(InvokeStatus.FUNCTION_ERROR, message="unknown function")
        # check-and-increment happens without an await in between
        if self._inflight[name] >= spec.max_concurrent:
            return OVERLOADED
        self._inflight[name] += 1
        try:
            return await asyncio.wait_for(self._run(spec, payload), max(deadline, 0.0))
        except asyncio.TimeoutError:
            return TIMED_OUT
        finally:
            self._inflight[name] -= 1

    async def _run(self, spec: FunctionSpec, payload: bytes) -> InvokeResult:
        delay = spec.delay_for(payload)
        try:
            if delay is None:
                output = await asyncio.get_running_loop().run_in_executor(None, spec.handler, payload)
            else:
                await asyncio.sleep(delay * self.speed)
                output = spec.handler(payload)
        except Exception as exc:
            return InvokeResult(InvokeStatus.FUNCTION_ERROR, message=f"{type(exc).__name__}: {exc}")
        return InvokeResult.success(output)


# -- socket endpoint ------------------------------------------------------------------

async def serve_executor(executor: Executor, conn: Connection) -> None:
    """Answer invoke/list requests on one connection until it closes."""
    channel = Channel(conn)
    tasks = set()

    async def answer(req: wire.InvokeRequest):
        res = await executor.invoke(req.function, req.payload, req.deadline_ms / 1000.0)
        if not channel.closed:
            channel.send(wire.InvokeReply(req.request_id, res.status, res.payload, res.message))

    while True:
        frame = await channel.recv()
        if frame is None:
            break
        if isinstance(frame, wire.ListFunctions):
            channel.send(wire.FunctionList(frame.request_id, tuple(sorted(executor.list_functions()))))
        elif isinstance(frame, wire.InvokeRequest):
            task = asyncio.ensure_future(answer(frame))
            tasks.add(task)
            task.add_done_callback(tasks.discard)
        else:
            log.warning("executor endpoint ignoring %s", type(frame).__name__)
    for task in tasks:
        task.cancel()


class RemoteExecutor:
    """Bridge-side handle for an executor behind a socket endpoint."""

    def __init__(self, net, address: str, name: Optional[str] = None):
        self.net = net
        self.address = address
        self.name = name or address
        self._channel: Optional[Channel] = None
        self._ids = wire.IdGenerator(f"{self.name}/rpc")
        self._waiting: dict[str, asyncio.Future] = {}
        self._reader: Optional[asyncio.Task] = None

    async def _ensure(self) -> Channel:
        if self._channel is None or self._channel.closed:
            conn = await self.net.connect(self.address)
            self._channel = Channel(conn)
            self._reader = asyncio.ensure_future(self._read(self._channel))
        return self._channel

    async def _read(self, channel: Channel):
        while True:
            frame = await channel.recv()
            if frame is None:
                break
            fut = self._waiting.pop(frame.request_id, None)
            if fut is not None and not fut.done():
                fut.set_result(frame)
        for fut in self._waiting.values():
            if not fut.done():
                fut.set_exception(ConnectionError("executor connection closed"))
        self._waiting.clear()

    async def _request(self, frame):
        channel = await self._ensure()
        fut = asyncio.get_running_loop().create_future()
        self._waiting[frame.request_id] = fut
        channel.send(frame)
        return await fut

    async def list_functions(self) -> set[str]:
        reply = await self._request(wire.ListFunctions(self._ids.next()))
        return set(reply.functions)

    async def invoke(self, name: str, payload: bytes, deadline: float) -> InvokeResult:
        req = wire.InvokeRequest(self._ids.next(), name, payload, deadline * 1000.0)
        try:
            reply = await asyncio.wait_for(self._request(req), deadline + 1.0)
        except asyncio.TimeoutError:
            return TIMED_OUT
        except (ConnectionError, OSError) as exc:
            return InvokeResult(InvokeStatus.FUNCTION_ERROR, message=f"executor unreachable: {exc}")
        return InvokeResult(reply.status, reply.payload, reply.message)

    def close(self):
        if self._channel is not None:
            self._channel.close()
        if self._reader is not None:
            self._reader.cancel()
