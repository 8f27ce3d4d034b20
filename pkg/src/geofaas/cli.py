"""``geofaas`` command: run brokers, bridges, executors and clients over TCP."""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys

from . import registry as registry_mod
from .bridge import Bridge, BridgeConfig, Mode
from .broker import Broker
from .client import CallFailed, Client, ClientConfig, ClientError
from .events import EventLog
from .executor import Executor, RemoteExecutor, serve_executor, sieve_spec
from .geo import GeoPoint
from .registry import Tier
from .transport import TcpNetwork

log = logging.getLogger("geofaas")


def _events(args) -> EventLog:
    return EventLog(stream=sys.stdout if args.events else None, keep=False)


async def _forever():
    await asyncio.Event().wait()


async def run_broker(args):
    reg = registry_mod.load(args.registry)
    broker = Broker(args.id, reg, TcpNetwork(), _events(args), heartbeat_timeout=args.heartbeat_timeout)
    await broker.start()
    log.info("broker %s listening on %s", args.id, broker.record.address)
    await _forever()


async def run_executor(args):
    ex = Executor([sieve_spec(args.capacity, modelled=False)], name=args.listen)
    server = await TcpNetwork().serve(args.listen, lambda conn: serve_executor(ex, conn))
    log.info("executor listening on %s", args.listen)
    async with server:
        await _forever()


async def run_bridge(args):
    reg = registry_mod.load(args.registry)
    rec = reg.get(args.broker)
    net = TcpNetwork()
    if args.executor:
        executors = [RemoteExecutor(net, addr) for addr in args.executor]
    else:
        executors = [Executor([sieve_spec(args.capacity, modelled=False)], name=f"faas@{rec.broker_id}")]
    cfg = BridgeConfig(
        bridge_id=f"bridge@{rec.broker_id}",
        mode=Mode.CLOUD if rec.tier is Tier.CLOUD else Mode.EDGE,
        service_area=rec.area,
        executors=executors,
        broker_address=rec.address,
    )
    bridge = Bridge(cfg, net, _events(args))
    await bridge.start()
    log.info("bridge %s attached to %s", cfg.bridge_id, rec.address)
    await _forever()


async def run_call(args) -> int:
    reg = registry_mod.load(args.registry)
    bootstrap = reg.get(args.bootstrap).address if args.bootstrap else reg.cloud.address
    cfg = ClientConfig(args.client_id, bootstrap, max_retries=args.retries)
    client = Client(cfg, reg, TcpNetwork(), _events(args))
    try:
        await client.connect(GeoPoint(args.lat, args.lon))
        for _ in range(args.repeat):
            out = await client.call(args.function, args.payload.encode())
            print(out.decode("utf-8", "replace"))
    except CallFailed as exc:
        print(f"call failed: {exc}", file=sys.stderr)
        return 1
    except ClientError as exc:
        print(f"client error: {exc}", file=sys.stderr)
        return 2
    finally:
        await client.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geofaas", description="Geo-aware FaaS nodes over TCP.")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--events", action="store_true", help="print the event log to stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("broker", help="run one broker from the registry")
    p.add_argument("--registry", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--heartbeat-timeout", type=float, default=2.0)
    p.set_defaults(func=run_broker)

    p = sub.add_parser("executor", help="serve the sieve function on a socket")
    p.add_argument("--listen", required=True, help="host:port")
    p.add_argument("--capacity", type=int, default=4)
    p.set_defaults(func=run_executor)

    p = sub.add_parser("bridge", help="attach a bridge to a broker")
    p.add_argument("--registry", required=True)
    p.add_argument("--broker", required=True, help="broker id this bridge serves")
    p.add_argument("--executor", action="append", help="host:port of an executor (repeatable); in-process if omitted")
    p.add_argument("--capacity", type=int, default=4)
    p.set_defaults(func=run_bridge)

    p = sub.add_parser("call", help="invoke a function from a location")
    p.add_argument("--registry", required=True)
    p.add_argument("--bootstrap", help="broker id to contact first (default: cloud)")
    p.add_argument("--client-id", default="cli")
    p.add_argument("--lat", type=float, required=True)
    p.add_argument("--lon", type=float, required=True)
    p.add_argument("--function", default="sieve")
    p.add_argument("--payload", default="10000")
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--retries", type=int, default=1)
    p.set_defaults(func=run_call)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return asyncio.run(args.func(args)) or 0
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
