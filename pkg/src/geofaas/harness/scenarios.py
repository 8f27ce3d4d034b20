"""Scenario drivers: topology boot, client workloads, fault schedule.

Every scenario runs on the virtual clock. The nodes are exactly the
production broker/bridge/client/executor classes wired to a simulated
network.
"""

from __future__ import annotations

import asyncio
import logging
import math
import random
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..bridge import Bridge, BridgeConfig, Mode
from ..broker import Broker
from ..client import CallFailed, Client, ClientConfig
from ..events import EventLog
from ..executor import Executor, FunctionSpec, sieve_spec
from ..geo import GeoPoint, Hexagon, WORLD, offset
from ..registry import BrokerRecord, Registry, Tier, responsible_broker
from .simnet import LatencyMatrix, SimNetwork, default_latencies, run_virtual

log = logging.getLogger(__name__)

# TU Berlin, the centre of the first hexagonal edge area
BERLIN = GeoPoint(52.5125, 13.3269)
AREA_RADIUS_KM = 12.0
CLOUD_SITE = GeoPoint(50.1109, 8.6821)  # Frankfurt

# SW neighbour of the Berlin hexagon: one edge-to-edge distance away
POTSDAM_HEX = offset(BERLIN, AREA_RADIUS_KM * math.sqrt(3) * math.sin(math.radians(210)),
                     AREA_RADIUS_KM * math.sqrt(3) * math.cos(math.radians(210)))

EDGE_SPEED = 1.0
CLOUD_SPEED = 0.5
SIEVE_N = 10_000
HIGHLOAD_N = 1_000_000  # a hundred times the distance workload
SETTLE_S = 0.5


def _record(broker_id: str, area, tier: Tier, location=None) -> BrokerRecord:
    return BrokerRecord(broker_id, f"{broker_id}:7000", area, tier, location)


def berlin_registry() -> Registry:
    return Registry((
        _record("berlin", Hexagon(BERLIN, AREA_RADIUS_KM), Tier.EDGE),
        _record("cloud", WORLD, Tier.CLOUD, CLOUD_SITE),
    ))


def two_edge_registry() -> Registry:
    return Registry((
        _record("berlin", Hexagon(BERLIN, AREA_RADIUS_KM), Tier.EDGE),
        _record("potsdam", Hexagon(POTSDAM_HEX, AREA_RADIUS_KM), Tier.EDGE),
        _record("cloud", WORLD, Tier.CLOUD, CLOUD_SITE),
    ))


def bridge_id_for(broker_id: str) -> str:
    return f"bridge@{broker_id}"


def node_of(sender_id: str) -> str:
    """Broker id that hosts a bridge, from its sender id."""
    return sender_id.partition("@")[2] or sender_id


# -- topology ------------------------------------------------------------------------

@dataclass
class Topology:
    registry: Registry
    net: SimNetwork
    events: EventLog
    brokers: dict = field(default_factory=dict)
    bridges: dict = field(default_factory=dict)
    executors: dict = field(default_factory=dict)
    clients: list = field(default_factory=list)
    _client_seq: int = 0

    def zone(self, broker_id: str) -> str:
        return self.registry.get(broker_id).tier.value

    def client(self, config: Optional[ClientConfig] = None, **overrides) -> Client:
        self._client_seq += 1
        cid = f"c{self._client_seq}"
        if config is None:
            params = dict(client_id=cid, bootstrap_broker=self.registry.edges[0].address)
            params.update(overrides)
            config = ClientConfig(**params)
        c = Client(config, self.registry, self.net.host(config.client_id, "client"), self.events)
        self.clients.append(c)
        return c

    async def stop(self):
        for c in self.clients:
            await c.close()
        for b in self.bridges.values():
            b.close()
        for b in self.brokers.values():
            await b.stop()


async def boot(
    registry: Registry,
    seed: int = 0,
    events: Optional[EventLog] = None,
    edge_capacity: int = 4,
    cloud_capacity: int = 1000,
    jitter_ms: float = 0.1,
    bridge_options: Optional[dict] = None,
    settle: float = SETTLE_S,
    extra_functions: Sequence[FunctionSpec] = (),
) -> Topology:
    """Start one broker, bridge and executor per registry entry."""
    events = events or EventLog()
    net = SimNetwork(default_latencies(jitter_ms), seed=seed)
    topo = Topology(registry, net, events)
    for rec in registry.records:
        host = rec.address.rpartition(":")[0]
        view = net.host(host, rec.tier.value)
        broker = Broker(rec.broker_id, registry, view, events)
        await broker.start()
        topo.brokers[rec.broker_id] = broker
    for rec in registry.records:
        host = rec.address.rpartition(":")[0]
        view = net.host(host)
        cloud = rec.tier is Tier.CLOUD
        ex = Executor([sieve_spec(cloud_capacity if cloud else edge_capacity), *extra_functions],
                      speed=CLOUD_SPEED if cloud else EDGE_SPEED, name=f"faas@{rec.broker_id}")
        options = dict((bridge_options or {}).get(rec.broker_id, {}))
        cfg = BridgeConfig(
            bridge_id=bridge_id_for(rec.broker_id),
            mode=Mode.CLOUD if cloud else Mode.EDGE,
            service_area=rec.area,
            executors=[ex],
            broker_address=rec.address,
            **options,
        )
        bridge = Bridge(cfg, view, events)
        await bridge.start()
        topo.executors[rec.broker_id] = ex
        topo.bridges[rec.broker_id] = bridge
    # let peer links come up and replicate bridge subscriptions
    await asyncio.sleep(settle)
    return topo


# -- results ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    name: str
    seed: int
    registry: Registry
    events: EventLog
    params: dict
    virtual_s: float = 0.0
    wall_s: float = 0.0
    latencies: Optional[LatencyMatrix] = None
    extra: dict = field(default_factory=dict)


def _run(name: str, seed: int, registry: Registry, params: dict, body, **boot_kwargs) -> ScenarioResult:
    events = EventLog()
    result = ScenarioResult(name, seed, registry, events, params)

    async def main():
        loop = asyncio.get_running_loop()
        topo = await boot(registry, seed=seed, events=events, **boot_kwargs)
        result.latencies = topo.net.latencies
        try:
            await body(topo, result)
        finally:
            result.virtual_s = loop.time()
            await topo.stop()

    started = time.perf_counter()
    run_virtual(main())
    result.wall_s = time.perf_counter() - started
    return result


def sieve_payload(n: int = SIEVE_N) -> bytes:
    return str(n).encode()


async def _call_quietly(client: Client, payload: bytes):
    try:
        return await client.call("sieve", payload)
    except CallFailed:
        return None


# -- distance -------------------------------------------------------------------------

def distance_trace(waypoints: int = 99) -> list[GeoPoint]:
    """Straight path from north-east Berlin, through Potsdam, out of both areas."""
    start = (3.0, 9.0)
    step = (-13.39 * 1.5, -27.0 * 1.5)
    pts = []
    for i in range(waypoints):
        f = i / (waypoints - 1)
        pts.append(offset(BERLIN, start[0] + f * step[0], start[1] + f * step[1]))
    return pts


def scenario_distance(seed: int = 0, waypoints: int = 99, interval: float = 0.1) -> ScenarioResult:
    registry = two_edge_registry()
    trace = distance_trace(waypoints)

    async def body(topo: Topology, result: ScenarioResult):
        client = topo.client()
        await client.connect(trace[0])
        await _call_quietly(client, sieve_payload())
        for p in trace[1:]:
            await asyncio.sleep(interval)
            await client.update_location(p)
            await _call_quietly(client, sieve_payload())
        result.extra["handoffs"] = client.handoffs
        result.extra["responsible"] = [responsible_broker(registry, p) for p in trace]

    params = {"waypoints": waypoints, "interval_s": interval}
    return _run("distance", seed, registry, params, body)


# -- high load --------------------------------------------------------------------------

def _points_in_area(rng: random.Random, center: GeoPoint, radius_km: float, n: int) -> list[GeoPoint]:
    pts = []
    for _ in range(n):
        r = radius_km * math.sqrt(rng.random())
        a = rng.uniform(0, 2 * math.pi)
        pts.append(offset(center, r * math.cos(a), r * math.sin(a)))
    return pts


def scenario_highload(clients: int = 16, seed: int = 0, calls_per_client: int = 10, capacity: int = 4,
                      period_s: float = 1.0, workload: int = HIGHLOAD_N) -> ScenarioResult:
    """Stationary clients each fire one call per period, without waiting for earlier ones."""
    registry = berlin_registry()
    rng = random.Random(seed)
    spots = _points_in_area(rng, BERLIN, Hexagon(BERLIN, AREA_RADIUS_KM).inradius_km * 0.9, clients)

    async def body(topo: Topology, result: ScenarioResult):
        loop = asyncio.get_running_loop()
        fleet = [topo.client(result_timeout_ms=60_000) for _ in range(clients)]
        await asyncio.gather(*(c.connect(p) for c, p in zip(fleet, spots)))
        t0 = math.ceil(loop.time()) + period_s

        async def drive(c: Client):
            handles = []
            for k in range(calls_per_client):
                await asyncio.sleep(max(0.0, t0 + k * period_s - loop.time()))
                handles.append(c.start_call("sieve", sieve_payload(workload)))
            await asyncio.gather(*handles, return_exceptions=True)

        await asyncio.gather(*(drive(c) for c in fleet))

    params = {"clients": clients, "calls_per_client": calls_per_client, "capacity": capacity,
              "period_s": period_s, "workload": workload}
    return _run("highload", seed, registry, params, body, edge_capacity=capacity)


# -- outage -----------------------------------------------------------------------------

def scenario_outage(seed: int = 0, total: int = 2000, kill_after: int = 1000, fault: str = "shutdown") -> ScenarioResult:
    """One client calls sequentially; the edge bridge goes away after ``kill_after`` results.

    ``fault`` is ``shutdown`` (planned, the bridge disconnects after a grace
    period) or ``crash`` (silent, found by the heartbeat monitor).
    """
    if fault not in ("shutdown", "crash"):
        raise ValueError(f"unknown fault {fault!r}")
    registry = berlin_registry()
    options = {"berlin": {"shutdown_after": kill_after}} if fault == "shutdown" else None

    async def body(topo: Topology, result: ScenarioResult):
        client = topo.client()
        await client.connect(offset(BERLIN, 1.0, 1.0))
        for i in range(total):
            if i == kill_after:
                topo.events.emit("fault", "harness", fault=fault, target="berlin", call_index=i)
                if fault == "crash":
                    topo.bridges["berlin"].crash()
            await _call_quietly(client, sieve_payload())

    params = {"total": total, "kill_after": kill_after, "fault": fault}
    return _run("outage", seed, registry, params, body, bridge_options=options)


# -- bridge failure redirect ---------------------------------------------------------------

def scenario_redirect(seed: int = 0) -> ScenarioResult:
    """An edge bridge crashes; with client retries off, the broker must redirect."""
    registry = berlin_registry()

    async def body(topo: Topology, result: ScenarioResult):
        client = topo.client(max_retries=0)
        await client.connect(offset(BERLIN, -2.0, 3.0))
        await _call_quietly(client, sieve_payload())
        topo.events.emit("fault", "harness", fault="crash", target="berlin")
        topo.bridges["berlin"].crash()
        # two silent heartbeat timeouts until the broker declares it dead
        await asyncio.sleep(2 * topo.brokers["berlin"].heartbeat_timeout + 0.5)
        topo.events.emit("probe", "harness")
        result.extra["payload"] = await _call_quietly(client, sieve_payload())

    return _run("redirect", seed, registry, {}, body)


# -- randomised mix (used by the exactly-one-result property) ------------------------------

def scenario_mixed(seed: int, clients: int = 3, calls: int = 4) -> ScenarioResult:
    """Random positions and an optional random edge failure, all on a few calls."""
    rng = random.Random(seed)
    registry = two_edge_registry()
    fault = rng.choice(["none", "crash", "shutdown"])
    victim = rng.choice(["berlin", "potsdam"])
    kill_after = rng.randint(0, clients * calls // 2)
    options = {victim: {"shutdown_after": max(kill_after, 1)}} if fault == "shutdown" else None
    spots = _points_in_area(rng, GeoPoint(52.45, 13.25), 25.0, clients)
    gaps = [[rng.uniform(0.0, 0.3) for _ in range(calls)] for _ in range(clients)]
    crash_at = rng.uniform(0.0, 1.0)

    async def body(topo: Topology, result: ScenarioResult):
        fleet = [topo.client() for _ in range(clients)]
        for c, p in zip(fleet, spots):
            await c.connect(p)

        async def drive(c: Client, pauses):
            for gap in pauses:
                await asyncio.sleep(gap)
                await _call_quietly(c, sieve_payload(rng.choice([1000, 10_000, 50_000])))

        async def saboteur():
            await asyncio.sleep(crash_at)
            topo.events.emit("fault", "harness", fault="crash", target=victim)
            topo.bridges[victim].crash()

        jobs = [drive(c, g) for c, g in zip(fleet, gaps)]
        if fault == "crash":
            jobs.append(saboteur())
        await asyncio.gather(*jobs)

    params = {"clients": clients, "calls": calls, "fault": fault, "victim": victim}
    return _run("mixed", seed, registry, params, body, bridge_options=options)


SCENARIOS = {
    "distance": scenario_distance,
    "highload": scenario_highload,
    "outage": scenario_outage,
    "redirect": scenario_redirect,
}


def run_scenario(name: str, **kwargs) -> ScenarioResult:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}") from None
    return fn(**kwargs)
