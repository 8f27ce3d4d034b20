"""``harness run <scenario>``: run a simulated scenario and write its artefacts."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import metrics, plots
from .scenarios import (
    scenario_distance,
    scenario_highload,
    scenario_outage,
    scenario_redirect,
)

log = logging.getLogger("geofaas.harness")

SWEEP = (1, 2, 4, 8, 16)


def _write(result, out: Path) -> list:
    out.mkdir(parents=True, exist_ok=True)
    events = result.events.events()
    records = metrics.call_records(events, result.registry)
    (out / "events.log").write_text(result.events.text())
    (out / "metrics.csv").write_text(metrics.records_csv(records))
    summary = {
        "scenario": result.name,
        "seed": result.seed,
        "params": result.params,
        "virtual_s": round(result.virtual_s, 3),
        **metrics.summarize(records),
        "invariant_violations": metrics.check_invariants(events, result.registry, result.latencies),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return records


def cmd_run(args) -> int:
    out = Path(args.out or f"results/{args.scenario}")
    if args.scenario == "distance":
        result = scenario_distance(seed=args.seed, waypoints=args.waypoints)
        records = _write(result, out)
        if not args.no_plots:
            plots.plot_distance(records, result.registry, out)
    elif args.scenario == "highload":
        counts = [args.clients] if args.clients else list(SWEEP)
        rows = []
        for n in counts:
            result = scenario_highload(clients=n, seed=args.seed, capacity=args.capacity)
            records = _write(result, out / f"clients-{n}")
            s = metrics.summarize(records)
            rows.append((n, s["normal"], s["offload"]))
        out.mkdir(parents=True, exist_ok=True)
        lines = ["clients,normal,offload"] + [f"{n},{a},{b}" for n, a, b in rows]
        (out / "offloads.csv").write_text("\n".join(lines) + "\n")
        if not args.no_plots:
            plots.plot_highload(rows, out)
    elif args.scenario == "outage":
        total = args.total or (100_000 if args.full else 2000)
        kill = args.kill_after if args.kill_after is not None else total // 2
        result = scenario_outage(seed=args.seed, total=total, kill_after=kill, fault=args.fault)
        records = _write(result, out)
        if not args.no_plots:
            plots.plot_outage(records, out)
    else:
        result = scenario_redirect(seed=args.seed)
        _write(result, out)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harness", description="Simulated GeoFaaS scenarios on a virtual clock.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", choices=["distance", "highload", "outage", "redirect"])
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", help="output directory (default results/<scenario>)")
    run.add_argument("--clients", type=int, help="highload: one client count instead of the 1..16 sweep")
    run.add_argument("--capacity", type=int, default=4, help="highload: edge concurrency bound")
    run.add_argument("--waypoints", type=int, default=99)
    run.add_argument("--total", type=int, help="outage: number of calls (default 2000)")
    run.add_argument("--kill-after", type=int, help="outage: edge bridge stops after this many results")
    run.add_argument("--full", action="store_true", help="outage: 100000 calls, kill after 50000")
    run.add_argument("--fault", choices=["shutdown", "crash"], default="shutdown")
    run.add_argument("--no-plots", action="store_true")
    run.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
