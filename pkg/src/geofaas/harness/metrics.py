"""Metrics derived from event logs alone.

Nothing here inspects live objects. Every number can be recomputed from a
saved ``events.log``.
"""

from __future__ import annotations

import csv
import io
import statistics
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Optional

from ..events import Event
from ..geo import GeoPoint
from ..registry import Registry, responsible_broker


@dataclass
class CallRecord:
    correlation_id: str
    client: str
    function: str
    broker: str
    lat: float
    lon: float
    start_ms: float
    update_ms: Optional[float] = None  # time of the location update preceding the call
    end_ms: Optional[float] = None
    latency_ms: Optional[float] = None
    served_by: str = ""
    tier: str = ""
    attempts: int = 0
    publishes: int = 0
    outcome: str = "pending"  # ok | failed | pending
    stage: str = ""
    offloaded: bool = False  # answered by a node other than the broker the call went to
    retried: bool = False

    @property
    def total_ms(self) -> Optional[float]:
        """Update plus call, or just the call when no update preceded it."""
        if self.end_ms is None:
            return None
        return self.end_ms - (self.update_ms if self.update_ms is not None else self.start_ms)


def call_records(events: Iterable[Event], registry: Registry) -> list[CallRecord]:
    records: dict[str, CallRecord] = {}
    last_update: dict[str, float] = {}
    for e in events:
        if e.kind == "location_update":
            last_update[e.node] = e.t_ms
        elif e.kind == "call_start":
            records[e.corr] = CallRecord(
                e.corr, e.node, e.get("fn"), e.get("broker"), float(e.get("lat")), float(e.get("lon")),
                e.t_ms, update_ms=last_update.pop(e.node, None),
            )
        elif e.kind == "publish" and e.corr in records:
            records[e.corr].publishes += 1
        elif e.kind in ("resolved", "failed") and e.corr in records:
            r = records[e.corr]
            r.end_ms = e.t_ms
            r.latency_ms = float(e.get("latency_ms")) if e.get("latency_ms") else e.t_ms - r.start_ms
            r.attempts = r.publishes
            if e.kind == "resolved":
                r.outcome = "ok"
                r.served_by = e.get("by", "")
            else:
                r.outcome = "failed"
                r.stage = e.get("stage", "")
                r.served_by = e.get("by", "")
            r.retried = r.publishes > 1
            if r.served_by:
                node = r.served_by.partition("@")[2] or r.served_by
                r.offloaded = node != r.broker
                try:
                    r.tier = registry.get(node).tier.value
                except KeyError:
                    r.tier = "?"
    return sorted(records.values(), key=lambda r: (r.start_ms, r.correlation_id))


def mean(values) -> float:
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else float("nan")


def moving_average(values: list[float], window: int) -> list[float]:
    if window < 1:
        raise ValueError("window must be positive")
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def time_moving_average(times_ms: list[float], values: list[float], window_ms: float = 1000.0) -> list[float]:
    """Mean of the values whose timestamps fall in the trailing window ending at each sample."""
    if window_ms <= 0:
        raise ValueError("window must be positive")
    out, acc, lo = [], 0.0, 0
    for i, (t, v) in enumerate(zip(times_ms, values)):
        acc += v
        while times_ms[lo] <= t - window_ms:
            acc -= values[lo]
            lo += 1
        out.append(acc / (i - lo + 1))
    return out


def summarize(records: list[CallRecord]) -> dict:
    tiers = Counter(r.tier for r in records if r.outcome == "ok")
    normal = sum(r.outcome == "ok" and not r.offloaded for r in records)
    offload = sum(r.outcome == "ok" and r.offloaded for r in records)
    by_tier = defaultdict(list)
    by_tier_total = defaultdict(list)
    for r in records:
        if r.outcome == "ok":
            by_tier[r.tier].append(r.latency_ms)
            by_tier_total[r.tier].append(r.total_ms)
    return {
        "calls": len(records),
        "ok": sum(r.outcome == "ok" for r in records),
        "failed": sum(r.outcome == "failed" for r in records),
        "pending": sum(r.outcome == "pending" for r in records),
        "normal": normal,
        "offload": offload,
        "retried": sum(r.retried for r in records),
        "served_edge": tiers.get("edge", 0),
        "served_cloud": tiers.get("cloud", 0),
        "max_publishes": max((r.publishes for r in records), default=0),
        "mean_latency_ms": {t: round(mean(v), 3) for t, v in sorted(by_tier.items())},
        "mean_total_ms": {t: round(mean(v), 3) for t, v in sorted(by_tier_total.items())},
    }


_COLUMNS = [f.name for f in fields(CallRecord)] + ["total_ms"]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def records_csv(records: list[CallRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_COLUMNS)
    for r in records:
        row = asdict(r)
        row["total_ms"] = r.total_ms
        w.writerow(_fmt(row[c]) for c in _COLUMNS)
    return buf.getvalue()


# -- invariants ------------------------------------------------------------------------

def _zone(registry: Registry, node: str) -> str:
    try:
        return registry.get(node).tier.value
    except KeyError:
        return "client"


def path_floors(events: list[Event], registry: Registry, latencies) -> dict[str, float]:
    """Per call: sum of configured one-way delays along the hops it is known to have taken.

    Client to broker and back, plus every broker-to-broker forward of the call,
    its nack or its result. Acks travel in parallel and are left out.
    """
    zones = {}

    def one_way(a, b):
        key = tuple(sorted((zones.setdefault(a, _zone(registry, a)), zones.setdefault(b, _zone(registry, b)))))
        return 0.0 if a == b else latencies.pairs.get(key, latencies.default) * 1000.0

    floors = {}
    for e in events:
        if e.kind == "call_start":
            zones[e.node] = "client"
            floors[e.corr] = 2 * one_way(e.node, e.get("broker"))
        elif e.kind == "route" and e.corr in floors and e.get("action") == "forward" and e.get("topic") != "ack":
            floors[e.corr] += one_way(e.node, e.get("to"))
    return floors


def check_invariants(events: list[Event], registry: Registry, latencies=None) -> list[str]:
    """Generic safety checks; returns human-readable violations (empty when clean)."""
    problems = []
    starts = {e.corr: e for e in events if e.kind == "call_start"}
    ends = Counter(e.corr for e in events if e.kind in ("resolved", "failed"))
    # conservation: each call ends exactly once
    for corr in starts:
        if ends[corr] != 1:
            problems.append(f"{corr}: {ends[corr]} terminal events")
    routes = [e for e in events if e.kind == "route"]
    # one hop: a message is forwarded at most once, and never by the peer that received it
    forwards = Counter(e.get("msg") for e in routes if e.get("action") == "forward")
    for msg, n in forwards.items():
        if n > 1:
            problems.append(f"{msg}: forwarded {n} times")
    for e in routes:
        if e.get("origin") == "peer" and e.get("action") == "forward":
            problems.append(f"{e.get('msg')}: re-forwarded by {e.node}")
    # totality: a result always finds its way to the client, and only once
    delivered = Counter(e.corr for e in routes if e.get("topic") == "result" and e.get("action") == "deliver")
    for corr in starts:
        if delivered[corr] > 1:
            problems.append(f"{corr}: result delivered {delivered[corr]} times")
    for e in routes:
        if e.get("topic") == "result" and e.get("action") not in ("deliver", "forward"):
            problems.append(f"{e.corr}: result {e.get('action')} at {e.node}")
    # handoff correctness: every call leaves from the responsible broker
    for corr, e in starts.items():
        p = GeoPoint(float(e.get("lat")), float(e.get("lon")))
        want = responsible_broker(registry, p)
        if e.get("broker") != want:
            problems.append(f"{corr}: sent via {e.get('broker')} but {want} is responsible")
    # physics: no call beats the configured delays on its own message path
    if latencies is not None:
        floors = path_floors(events, registry, latencies)
        for e in events:
            if e.kind == "resolved" and e.corr in floors and float(e.get("latency_ms")) + 1e-6 < floors[e.corr]:
                problems.append(f"{e.corr}: latency {e.get('latency_ms')} ms below path minimum {floors[e.corr]:.3f} ms")
    return problems
