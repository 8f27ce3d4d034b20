"""Figures for scenario runs: an SVG plus the CSV of exactly what is drawn."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..geo import GeoPoint, haversine_km  # noqa: E402
from ..registry import Registry  # noqa: E402
from .metrics import CallRecord, time_moving_average  # noqa: E402

log = logging.getLogger(__name__)

# reproducible SVG output
plt.rcParams["svg.hashsalt"] = "geofaas"

_COLORS = {"edge": "tab:blue", "cloud": "tab:red"}


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _csv(path: Path, header: list[str], rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.3f}" if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def plot_distance(records: list[CallRecord], registry: Registry, out: Path) -> None:
    """Latency per waypoint, coloured by tier, with client-server distance and handoff markers."""
    if not records:
        log.warning("no call records; skipping distance plot")
        return
    rows = []
    for i, r in enumerate(records):
        node = r.served_by.partition("@")[2]
        site = registry.get(node).site if node else None
        dist = haversine_km(GeoPoint(r.lat, r.lon), site) if site is not None else float("nan")
        rows.append((i, r.broker, r.tier, r.latency_ms, r.total_ms, dist))
    handoffs = [i for i in range(1, len(rows)) if rows[i][1] != rows[i - 1][1]]
    _csv(out / "distance_plot.csv", ["waypoint", "broker", "tier", "latency_ms", "total_ms", "distance_km"], rows)

    fig, ax = plt.subplots(figsize=(8, 4))
    for tier, color in _COLORS.items():
        pts = [(i, total) for i, _, t, _, total, _ in rows if t == tier]
        if pts:
            ax.scatter([p[0] for p in pts], [p[1] for p in pts], s=10, color=color, label=f"{tier} response")
    for i in handoffs:
        ax.axvline(i - 0.5, color="0.3", ls="--", lw=0.8)
    ax.set_xlabel("waypoint")
    ax.set_ylabel("update + call latency (ms)")
    twin = ax.twinx()
    twin.plot([r[0] for r in rows], [r[5] for r in rows], color="tab:green", lw=1, label="distance to server")
    twin.set_ylabel("client-server distance (km)")
    ax.legend(loc="upper left")
    twin.legend(loc="upper center")
    _save(fig, out / "distance.svg")


def plot_highload(sweep: list[tuple[int, int, int]], out: Path) -> None:
    """``sweep`` rows are (clients, normal, offload)."""
    if not sweep:
        log.warning("no high-load runs; skipping plot")
        return
    _csv(out / "highload_plot.csv", ["clients", "normal", "offload"], sweep)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [str(n) for n, _, _ in sweep]
    normal = [a for _, a, _ in sweep]
    offload = [b for _, _, b in sweep]
    ax.bar(labels, normal, color=_COLORS["edge"], label="Normal")
    ax.bar(labels, offload, bottom=normal, color=_COLORS["cloud"], label="Offload")
    ax.set_xlabel("parallel clients")
    ax.set_ylabel("responses")
    ax.legend()
    _save(fig, out / "highload.svg")


def plot_outage(records: list[CallRecord], out: Path, window_ms: float = 1000.0) -> None:
    """One-second moving average of latency, one series per serving tier."""
    done = [r for r in records if r.latency_ms is not None]
    if not done:
        log.warning("no completed calls; skipping outage plot")
        return
    rows = []
    fig, ax = plt.subplots(figsize=(8, 4))
    for tier, color in _COLORS.items():
        mine = [r for r in done if r.tier == tier]
        if not mine:
            continue
        t = [r.end_ms for r in mine]
        avg = time_moving_average(t, [r.latency_ms for r in mine], window_ms)
        rows.extend((tier, ts / 1000.0, a) for ts, a in zip(t, avg))
        ax.plot([x / 1000.0 for x in t], avg, color=color, label=f"{tier}")
    _csv(out / "outage_plot.csv", ["tier", "time_s", "moving_avg_ms"], rows)
    ax.set_yscale("log")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("latency, 1 s moving average (ms)")
    ax.legend()
    _save(fig, out / "outage.svg")
