import asyncio

import pytest

from geofaas.broker import BridgeLiveness, Liveness, SubKind, monitor_bridge
from geofaas.geo import GeoPoint, offset
from geofaas.harness.scenarios import BERLIN, POTSDAM_HEX, boot, berlin_registry, two_edge_registry
from geofaas.transport import open_channel
from geofaas.wire import ROLE_CLIENT, ControlKind, ControlMessage, Message, Topic, TopicKind


def test_monitor_bridge_two_stage():
    lv = BridgeLiveness("b", last_ping=10.0)
    assert monitor_bridge(lv, 11.9, 2.0) is Liveness.ALIVE
    assert monitor_bridge(lv, 12.0, 2.0) is Liveness.SUSPECTED
    assert monitor_bridge(lv, 13.9, 2.0) is Liveness.SUSPECTED
    assert monitor_bridge(lv, 14.0, 2.0) is Liveness.DEAD
    lv.disconnected = True
    assert monitor_bridge(lv, 10.0, 2.0) is Liveness.DEAD


def _bridge_topics(broker):
    return sorted((s.broker_id, str(s.topic), type(s.geofence).__name__)
                  for s in broker.subscription_table() if s.kind is SubKind.BRIDGE)


def test_subscriptions_replicate_to_every_broker(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        tables = {b: _bridge_topics(topo.brokers[b]) for b in topo.brokers}
        await topo.stop()
        return tables

    tables = vrun(main())
    expected = sorted([
        ("berlin", "/sieve/call", "Hexagon"),
        ("potsdam", "/sieve/call", "Hexagon"),
        ("cloud", "/sieve/call", "World"),
        ("cloud", "/sieve/call/retry", "World"),
        ("cloud", "/sieve/nack", "World"),
    ])
    assert all(t == expected for t in tables.values())


def test_handoff_on_connect_and_drain(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        channel = await open_channel(topo.net.host("probe", "client"), "berlin:7000", ROLE_CLIENT)
        channel.send(ControlMessage(ControlKind.CONNECT, client_id="probe", location=POTSDAM_HEX))
        reply = await channel.recv()
        draining = topo.brokers["berlin"].session_for("probe").state
        await asyncio.sleep(3.5)
        eof = await channel.recv()
        await topo.stop()
        return reply, draining, eof

    reply, draining, eof = vrun(main())
    assert reply.kind is ControlKind.HANDOFF and reply.broker_id == "potsdam"
    assert draining == "draining"
    assert eof is None


def test_location_update_gets_ack_or_handoff(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        broker = topo.brokers["berlin"]
        session, first = broker.handle_connect("x", BERLIN)
        stay = broker.handle_location_update(session, offset(BERLIN, 1, 1))
        move = broker.handle_location_update(session, POTSDAM_HEX)
        again = broker.handle_location_update(session, BERLIN)
        state = session.state
        await topo.stop()
        return first, stay, move, again, state

    first, stay, move, again, state = vrun(main())
    assert first.kind is ControlKind.CONNECT_ACK
    assert stay.kind is ControlKind.CONNECT_ACK
    assert move.kind is ControlKind.HANDOFF and move.broker_id == "potsdam"
    # a draining session does not come back to life
    assert again.kind is ControlKind.HANDOFF and again.broker_id == "berlin"
    assert state == "draining"


def _call(corr="c1-1", where=BERLIN, kind=TopicKind.CALL, function="sieve"):
    return Message(corr, corr, "c1", where, Topic(function, kind), b"10")


def test_peer_messages_are_never_reforwarded(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        berlin = topo.brokers["berlin"]
        # a call that lands at berlin from a peer, for a location only potsdam serves
        route = berlin.route_publish(_call(where=POTSDAM_HEX), from_peer="cloud")
        # a result whose home broker is elsewhere, arriving from a peer
        res = Message("b-1", "c1-1", "bridge@x", BERLIN, Topic("sieve", TopicKind.RESULT), b"", reply_broker="potsdam")
        route2 = berlin.route_publish(res, from_peer="cloud")
        await topo.stop()
        return route, route2

    route, route2 = vrun(main())
    assert route.action == "undeliverable"
    assert route2.action == "undeliverable"


def test_edge_beats_world_and_no_subscriber(vrun):
    async def main():
        topo = await boot(two_edge_registry())
        cloud = topo.brokers["cloud"]
        to_potsdam = cloud.route_publish(_call(where=POTSDAM_HEX))
        outside = cloud.route_publish(_call(where=GeoPoint(48.1, 11.6)))
        unknown = cloud.route_publish(_call(function="nothing"))
        retry = topo.brokers["berlin"].route_publish(_call(kind=TopicKind.CALL_RETRY))
        await asyncio.sleep(0.2)
        await topo.stop()
        return to_potsdam, outside, unknown, retry

    to_potsdam, outside, unknown, retry = vrun(main())
    assert (to_potsdam.action, to_potsdam.target) == ("forward", "potsdam")
    assert (outside.action, outside.target) == ("deliver", "bridge@cloud")
    assert unknown.action == "no_subscriber"
    assert (retry.action, retry.target) == ("forward", "cloud")


def test_crash_is_detected_in_two_stages_and_peers_unsubscribe(vrun):
    async def main():
        topo = await boot(berlin_registry())
        topo.bridges["berlin"].crash()
        t_crash = asyncio.get_running_loop().time()
        await asyncio.sleep(5.0)
        statuses = [(e.t_ms / 1000 - t_crash, e.get("status")) for e in topo.events.events()
                    if e.kind == "bridge_status" and e.get("bridge") == "bridge@berlin"]
        cloud_view = _bridge_topics(topo.brokers["cloud"])
        await topo.stop()
        return statuses, cloud_view

    statuses, cloud_view = vrun(main())
    assert [s for _, s in statuses] == ["alive", "suspected", "dead"]
    # heartbeats every 0.5 s, timeout 2 s, monitor every 0.5 s
    assert 1.5 <= statuses[1][0] <= 2.6
    assert 3.5 <= statuses[2][0] <= 4.6
    assert all(b != "berlin" for b, _, _ in cloud_view)


def test_planned_disconnect_marks_dead_immediately(vrun):
    async def main():
        topo = await boot(berlin_registry())
        t0 = asyncio.get_running_loop().time()
        await topo.bridges["berlin"].shutdown()
        await asyncio.sleep(0.1)
        dead = [e.t_ms / 1000 - t0 for e in topo.events.events()
                if e.kind == "bridge_status" and e.get("status") == "dead"]
        await topo.stop()
        return dead

    dead = vrun(main())
    assert len(dead) == 1 and dead[0] < 0.05
