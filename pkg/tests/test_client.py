import asyncio

import pytest

from geofaas.client import CallFailed, CallState, ClientConfig, ClientError, ConnectError, Phase, Stage
from geofaas.executor import FunctionSpec
from geofaas.geo import GeoPoint, offset
from geofaas.harness.scenarios import BERLIN, POTSDAM_HEX, boot, berlin_registry, two_edge_registry


def test_config_validation():
    with pytest.raises(ValueError):
        ClientConfig("c", "x:1", ack_timeout_ms=5000, result_timeout_ms=1000)
    with pytest.raises(ValueError):
        ClientConfig("c", "x:1", max_retries=-1)


def test_phases_only_move_forward():
    s = CallState("c-1")
    s.advance(Phase.ACKED)
    with pytest.raises(ValueError):
        s.advance(Phase.SENT)
    s.advance(Phase.RESOLVED)
    s.advance(Phase.FAILED)  # terminal: ignored
    assert s.trace == [Phase.SENT, Phase.ACKED, Phase.RESOLVED]


def test_connect_follows_handoff_from_cloud(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        c = topo.client(bootstrap_broker="cloud:7000")
        broker = await c.connect(POTSDAM_HEX)
        handle = c.start_call("sieve", b"10000")
        out = await handle
        await topo.stop()
        return broker, out, handle.state

    broker, out, state = vrun(main())
    assert broker == "potsdam"
    assert out == b"1229"
    assert state.trace == [Phase.SENT, Phase.ACKED, Phase.RESOLVED]
    assert state.serving_node_hint == "bridge@potsdam"


def test_connect_error_when_unreachable(vrun):
    async def main():
        topo = await boot(berlin_registry())
        c = topo.client(bootstrap_broker="mars:1")
        try:
            await c.connect(BERLIN)
        finally:
            await topo.stop()

    with pytest.raises(ConnectError):
        vrun(main())


def test_not_connected(vrun):
    async def main():
        topo = await boot(berlin_registry())
        c = topo.client()
        try:
            await c.call("sieve", b"1")
        finally:
            await topo.stop()

    with pytest.raises(ClientError):
        vrun(main())


def test_no_subscriber_then_cloud_retry_failed(vrun):
    async def main():
        topo = await boot(berlin_registry())
        c = topo.client()
        await c.connect(BERLIN)
        t0 = asyncio.get_running_loop().time()
        try:
            await c.call("missing", b"")
        except CallFailed as exc:
            elapsed = asyncio.get_running_loop().time() - t0
            publishes = [e for e in topo.events.events() if e.kind == "publish"]
            await topo.stop()
            return exc, elapsed, publishes

    exc, elapsed, publishes = vrun(main())
    assert exc.stage is Stage.CLOUD_RETRY_FAILED
    # the broker says so right away; no ack timeout is spent
    assert elapsed < 0.1
    assert [p.get("topic") for p in publishes] == ["call", "call/retry"]


def test_function_error_is_not_retried(vrun):
    def boom(payload):
        raise RuntimeError("bad input")

    async def main():
        topo = await boot(berlin_registry(), extra_functions=[FunctionSpec("boom", boom, exec_delay=0.001)])
        c = topo.client()
        await c.connect(BERLIN)
        try:
            await c.call("boom", b"")
        except CallFailed as exc:
            publishes = sum(e.kind == "publish" for e in topo.events.events())
            await topo.stop()
            return exc, publishes

    exc, publishes = vrun(main())
    # the edge nacks, the cloud answers with an error result
    assert exc.stage is Stage.FUNCTION_ERROR
    assert "bad input" in exc.detail
    assert publishes == 1


def test_lost_ack_triggers_one_retry_to_cloud(vrun):
    async def main():
        topo = await boot(berlin_registry())
        topo.bridges["berlin"].crash()  # not yet detected: calls still go there
        c = topo.client()
        await c.connect(BERLIN)
        handle = c.start_call("sieve", b"10000")
        out = await handle
        await topo.stop()
        return out, handle.state

    out, state = vrun(main())
    assert out == b"1229"
    assert state.attempts == 2
    assert state.serving_node_hint == "bridge@cloud"


def test_retries_disabled_fails_with_no_ack(vrun):
    async def main():
        topo = await boot(berlin_registry())
        topo.bridges["berlin"].crash()
        c = topo.client(max_retries=0)
        await c.connect(BERLIN)
        try:
            await c.call("sieve", b"1")
        except CallFailed as exc:
            await topo.stop()
            return exc.stage

    assert vrun(main()) is Stage.NO_ACK


def test_result_of_old_session_arrives_after_handoff(vrun):
    """A call made just before moving still resolves through the draining session."""

    async def main():
        topo = await boot(two_edge_registry(), extra_functions=[FunctionSpec("slow", lambda p: p, exec_delay=1.0)])
        c = topo.client()
        await c.connect(offset(BERLIN, 0, 0))
        handle = c.start_call("slow", b"hi")
        await asyncio.sleep(0.05)
        moved = await c.update_location(POTSDAM_HEX)
        out = await handle
        await topo.stop()
        return moved, out, handle.state.serving_node_hint

    moved, out, node = vrun(main())
    assert moved == "potsdam"
    assert out == b"hi"
    assert node == "bridge@berlin"
