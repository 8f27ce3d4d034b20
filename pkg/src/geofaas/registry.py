"""Static broker registry shared by every node.

File format (JSON)::

    {
      "version": 1,
      "brokers": [
        {"broker_id": "edge-berlin", "address": "edge-berlin:5000",
         "area": "hexagon(52.5125,13.3269,12)", "tier": "edge"},
        {"broker_id": "cloud", "address": "cloud:5000", "area": "world",
         "tier": "cloud", "location": [51.5074, -0.1278]}
      ]
    }

``location`` is optional and only used to report client/server distances;
it defaults to the centre of the broker area.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .geo import Geofence, GeoPoint, World, fences_disjoint, format_geofence, parse_geofence


class Tier(enum.Enum):
    EDGE = "edge"
    CLOUD = "cloud"


class RegistryError(ValueError):
    pass


@dataclass(frozen=True)
class BrokerRecord:
    broker_id: str
    address: str
    area: Geofence
    tier: Tier
    location: Optional[GeoPoint] = None

    @property
    def site(self) -> Optional[GeoPoint]:
        if self.location is not None:
            return self.location
        return getattr(self.area, "center", None)


@dataclass(frozen=True)
class Registry:
    records: tuple[BrokerRecord, ...]
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        validate(self)

    @property
    def cloud(self) -> BrokerRecord:
        return next(r for r in self.records if r.tier is Tier.CLOUD)

    @property
    def edges(self) -> list[BrokerRecord]:
        return [r for r in self.records if r.tier is Tier.EDGE]

    def get(self, broker_id: str) -> BrokerRecord:
        for r in self.records:
            if r.broker_id == broker_id:
                return r
        raise KeyError(broker_id)

    def ids(self) -> list[str]:
        return [r.broker_id for r in self.records]

    def to_json(self) -> dict:
        brokers = []
        for r in self.records:
            entry = {"broker_id": r.broker_id, "address": r.address, "area": format_geofence(r.area), "tier": r.tier.value}
            if r.location is not None:
                entry["location"] = [r.location.lat, r.location.lon]
            brokers.append(entry)
        return {"version": self.version, "brokers": brokers}

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def validate(registry: Registry, resolution_km: float = 0.5) -> None:
    ids = [r.broker_id for r in registry.records]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise RegistryError(f"duplicate broker id: {', '.join(dupes)}")
    clouds = [r for r in registry.records if r.tier is Tier.CLOUD]
    if not clouds:
        raise RegistryError("missing cloud broker")
    if len(clouds) > 1:
        raise RegistryError("multiple cloud brokers: " + ", ".join(r.broker_id for r in clouds))
    if not isinstance(clouds[0].area, World):
        raise RegistryError(f"cloud broker {clouds[0].broker_id} must cover the world")
    edges = [r for r in registry.records if r.tier is Tier.EDGE]
    for r in edges:
        if isinstance(r.area, World):
            raise RegistryError(f"edge broker {r.broker_id} cannot cover the world")
    for a, b in itertools.combinations(edges, 2):
        if not fences_disjoint(a.area, b.area, resolution_km):
            raise RegistryError(f"overlapping edge areas: {a.broker_id} and {b.broker_id}")


def responsible_broker(registry: Registry, p: GeoPoint) -> str:
    """Edge broker whose area contains ``p``; the cloud otherwise.

    On a shared boundary the lexicographically smallest id wins.
    """
    matches = [r.broker_id for r in registry.edges if r.area.contains(p)]
    if matches:
        return min(matches)
    return registry.cloud.broker_id


def _record(entry) -> BrokerRecord:
    if not isinstance(entry, dict):
        raise RegistryError(f"broker entry must be an object, got {entry!r}")
    missing = [k for k in ("broker_id", "address", "area", "tier") if k not in entry]
    if missing:
        raise RegistryError(f"broker entry missing {', '.join(missing)}")
    try:
        tier = Tier(entry["tier"])
    except ValueError:
        raise RegistryError(f"unknown tier {entry['tier']!r}") from None
    try:
        area = parse_geofence(entry["area"])
        loc = entry.get("location")
        location = GeoPoint(*loc) if loc is not None else None
    except (ValueError, TypeError) as exc:
        raise RegistryError(f"broker {entry['broker_id']}: {exc}") from None
    return BrokerRecord(str(entry["broker_id"]), str(entry["address"]), area, tier, location)


def from_json(data) -> Registry:
    if not isinstance(data, dict) or not isinstance(data.get("brokers"), list):
        raise RegistryError("registry must be an object with a 'brokers' list")
    version = data.get("version", 1)
    if not isinstance(version, int):
        raise RegistryError("version must be an integer")
    return Registry(tuple(_record(e) for e in data["brokers"]), version)


def load(path) -> Registry:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise RegistryError(f"cannot parse registry {path}: {exc}") from None
    return from_json(data)
