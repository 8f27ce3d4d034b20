import asyncio
import time

import pytest

from geofaas.harness.simnet import (
    DeadlockError, LatencyMatrix, SimNetwork, VirtualClockLoop, default_latencies, run_virtual,
)


def test_virtual_clock_skips_ahead():
    async def main():
        loop = asyncio.get_running_loop()
        await asyncio.sleep(3600)
        try:
            await asyncio.wait_for(asyncio.sleep(10), 2)
        except asyncio.TimeoutError:
            pass
        return loop.time()

    started = time.perf_counter()
    assert run_virtual(main()) == pytest.approx(3602)
    assert time.perf_counter() - started < 1.0


def test_deadlock_detected():
    async def main():
        await asyncio.get_running_loop().create_future()

    with pytest.raises(DeadlockError):
        run_virtual(main())


def test_latency_matrix_zones():
    m = default_latencies()
    m.zones.update({"c": "client", "e": "edge", "k": "cloud", "e2": "edge"})
    assert m.base("c", "e") == pytest.approx(0.001)
    assert m.base("e", "k") == pytest.approx(0.025)
    assert m.base("e", "e2") == pytest.approx(0.005)
    assert m.base("e", "e") == 0.0
    assert LatencyMatrix(default=0.2).base("x", "y") == 0.2


def _echo_pair(jitter_ms, chunks):
    async def main():
        net = SimNetwork(default_latencies(jitter_ms), seed=5)
        got = []

        async def sink(conn):
            while True:
                data = await conn.read()
                if not data:
                    break
                got.append((asyncio.get_running_loop().time(), data))

        await net.host("srv", "edge").serve("srv:1", sink)
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        conn = await net.host("cli", "client").connect("srv:1")
        connect_cost = loop.time() - t0
        for c in chunks:
            conn.write(c)
        conn.close()
        await asyncio.sleep(1)
        return connect_cost, got

    return run_virtual(main())


def test_connect_costs_one_round_trip_and_data_one_way():
    cost, got = _echo_pair(0.0, [b"a", b"b"])
    assert cost == pytest.approx(0.002)
    assert [d for _, d in got] == [b"a", b"b"]
    assert got[0][0] == pytest.approx(0.003)


def test_fifo_under_jitter():
    chunks = [bytes([i]) for i in range(200)]
    _, got = _echo_pair(5.0, chunks)
    assert [d for _, d in got] == chunks
    times = [t for t, _ in got]
    assert times == sorted(times)


def test_refused_and_address_in_use():
    async def main():
        net = SimNetwork()
        with pytest.raises(ConnectionRefusedError):
            await net.host("a").connect("b:1")
        await net.host("b").serve("b:1", lambda c: asyncio.sleep(0))
        with pytest.raises(OSError):
            await net.host("b").serve("b:1", lambda c: asyncio.sleep(0))
        with pytest.raises(OSError):
            await net.host("a").serve("b:2", lambda c: asyncio.sleep(0))

    run_virtual(main())


def test_write_after_close_raises_and_reader_sees_eof():
    async def main():
        net = SimNetwork()
        server_side = []

        async def hold(conn):
            server_side.append(conn)
            return await conn.read()

        await net.host("s").serve("s:1", hold)
        conn = await net.host("c").connect("s:1")
        conn.close()
        with pytest.raises(ConnectionError):
            conn.write(b"x")
        assert await conn.read() == b""
        await asyncio.sleep(0.1)
        return server_side[0].closed

    assert run_virtual(main()) is True


def test_loop_is_a_selector_loop():
    loop = VirtualClockLoop()
    try:
        assert loop.time() == 0.0
    finally:
        loop.close()
