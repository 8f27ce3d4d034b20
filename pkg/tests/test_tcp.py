"""The same node code over real localhost sockets."""

import asyncio
import socket

from geofaas.bridge import Bridge, BridgeConfig, Mode
from geofaas.broker import Broker
from geofaas.client import BlockingClient, Client, ClientConfig
from geofaas.events import EventLog
from geofaas.executor import Executor, sieve_spec
from geofaas.geo import WORLD, GeoPoint, Hexagon
from geofaas.registry import BrokerRecord, Registry, Tier
from geofaas.transport import TcpNetwork

BERLIN = GeoPoint(52.5125, 13.3269)


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _registry():
    return Registry((
        BrokerRecord("berlin", f"127.0.0.1:{_free_port()}", Hexagon(BERLIN, 12.0), Tier.EDGE),
        BrokerRecord("cloud", f"127.0.0.1:{_free_port()}", WORLD, Tier.CLOUD),
    ))


async def _start(reg, events):
    net = TcpNetwork()
    brokers = [Broker(r.broker_id, reg, net, events, peer_retry=0.05) for r in reg.records]
    for b in brokers:
        await b.start()
    bridges = []
    for r in reg.records:
        cloud = r.tier is Tier.CLOUD
        cfg = BridgeConfig(f"bridge@{r.broker_id}", Mode.CLOUD if cloud else Mode.EDGE, r.area,
                           [Executor([sieve_spec(1, modelled=False)])], broker_address=r.address)
        bridge = Bridge(cfg, net, events)
        await bridge.start()
        bridges.append(bridge)
    for _ in range(100):
        if all(len(b.peers) == 1 for b in brokers) and all(len(b.bridge_subs) == 4 for b in brokers):
            break
        await asyncio.sleep(0.02)
    return brokers, bridges


async def _stop(brokers, bridges):
    for b in bridges:
        b.close()
    for b in brokers:
        await b.stop()
    await asyncio.sleep(0.05)


def test_tcp_call_edge_and_cloud():
    reg = _registry()

    async def main():
        events = EventLog()
        brokers, bridges = await _start(reg, events)
        try:
            near = Client(ClientConfig("near", reg.get("cloud").address), reg, TcpNetwork(), events)
            far = Client(ClientConfig("far", reg.get("berlin").address), reg, TcpNetwork(), events)
            assert await near.connect(BERLIN) == "berlin"
            assert await far.connect(GeoPoint(48.14, 11.58)) == "cloud"
            a, b = await asyncio.wait_for(asyncio.gather(near.call("sieve", b"10000"), far.call("sieve", b"100")), 10)
            await near.close()
            await far.close()
        finally:
            await _stop(brokers, bridges)
        served = {e.corr: e.get("by") for e in events.events() if e.kind == "resolved"}
        return a, b, served

    a, b, served = asyncio.run(main())
    assert (a, b) == (b"1229", b"25")
    assert served == {"near-1": "bridge@berlin", "far-1": "bridge@cloud"}


def test_blocking_client_over_tcp():
    reg = _registry()
    loop = asyncio.new_event_loop()
    brokers, bridges = loop.run_until_complete(_start(reg, EventLog()))
    import threading
    t = threading.Thread(target=loop.run_forever, daemon=True)
    t.start()
    try:
        client = BlockingClient(ClientConfig("blk", reg.get("berlin").address), reg, TcpNetwork())
        assert client.connect(BERLIN) == "berlin"
        assert client.call("sieve", b"1000") == b"168"
        client.close()
    finally:
        asyncio.run_coroutine_threadsafe(_stop(brokers, bridges), loop).result(5)
        loop.call_soon_threadsafe(loop.stop)
        t.join(5)
        loop.close()
