"""Geographic primitives: points, haversine distance and geofences.

Fences other than the world are evaluated on a flat local tangent plane
around a reference point. Service areas are at most tens of kilometres
across, where the planar error is far below anything routing cares about.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Union

EARTH_RADIUS_KM = 6371.0

# boundary tolerance on the tangent plane, in km (about a millimetre)
_EDGE_EPS_KM = 1e-6


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        lat = float(self.lat)
        lon = float(self.lon)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"coordinates must be finite, got ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", normalize_lon(lon))

    def __str__(self):
        return f"({self.lat!r},{self.lon!r})"


def normalize_lon(lon: float) -> float:
    """Map a longitude into (-180, 180]."""
    if -180.0 < lon <= 180.0:
        return lon
    lon = math.fmod(lon + 180.0, 360.0)
    if lon <= 0.0:
        lon += 360.0
    return lon - 180.0


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in kilometres on a sphere of radius 6371 km."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


# -- local tangent plane -------------------------------------------------------

def _wrap_deg(d: float) -> float:
    return (d + 180.0) % 360.0 - 180.0


def project(origin: GeoPoint, p: GeoPoint) -> tuple[float, float]:
    """Equirectangular projection of ``p`` to (east_km, north_km) around ``origin``."""
    x = EARTH_RADIUS_KM * math.radians(_wrap_deg(p.lon - origin.lon)) * math.cos(math.radians(origin.lat))
    y = EARTH_RADIUS_KM * math.radians(p.lat - origin.lat)
    return x, y


def offset(origin: GeoPoint, east_km: float, north_km: float) -> GeoPoint:
    """Inverse of :func:`project`: the point at a planar offset from ``origin``."""
    lat = origin.lat + math.degrees(north_km / EARTH_RADIUS_KM)
    coslat = math.cos(math.radians(origin.lat))
    if coslat < 1e-12:
        raise ValueError("cannot offset east/west from a pole")
    lon = origin.lon + math.degrees(east_km / (EARTH_RADIUS_KM * coslat))
    return GeoPoint(max(-90.0, min(90.0, lat)), lon)


def destination(origin: GeoPoint, bearing_deg: float, distance_km: float) -> GeoPoint:
    """Planar destination used for fence layout (bearing clockwise from north)."""
    th = math.radians(bearing_deg)
    return offset(origin, distance_km * math.sin(th), distance_km * math.cos(th))


def _on_segment(px, py, ax, ay, bx, by) -> bool:
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return math.hypot(px - ax, py - ay) <= _EDGE_EPS_KM
    t = max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / seg2))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy)) <= _EDGE_EPS_KM


def point_in_polygon(vertices: list[tuple[float, float]], x: float, y: float) -> bool:
    """Closed ray-casting test: points on an edge count as inside."""
    n = len(vertices)
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[j]
        if _on_segment(x, y, xj, yj, xi, yi):
            return True
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


# -- fences ----------------------------------------------------------------------

@dataclass(frozen=True)
class World:
    def contains(self, p: GeoPoint) -> bool:
        return True

    def __str__(self):
        return "world"


@dataclass(frozen=True)
class Circle:
    center: GeoPoint
    radius_km: float

    def __post_init__(self):
        if not self.radius_km > 0:
            raise ValueError(f"circle radius must be positive, got {self.radius_km}")

    def contains(self, p: GeoPoint) -> bool:
        return haversine_km(self.center, p) <= self.radius_km

    def bbox(self):
        return _radius_bbox(self.center, self.radius_km)

    def __str__(self):
        return f"circle({self.center.lat!r},{self.center.lon!r},{self.radius_km!r})"


@dataclass(frozen=True)
class Hexagon:
    """Pointy-top hexagon: vertices at bearings 0, 60, ..., 300 degrees."""

    center: GeoPoint
    circumradius_km: float
    _plane: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.circumradius_km > 0:
            raise ValueError(f"hexagon circumradius must be positive, got {self.circumradius_km}")
        r = self.circumradius_km
        pts = tuple(
            (r * math.sin(math.radians(b)), r * math.cos(math.radians(b))) for b in range(0, 360, 60)
        )
        object.__setattr__(self, "_plane", pts)

    @property
    def inradius_km(self) -> float:
        return self.circumradius_km * math.sqrt(3.0) / 2.0

    def vertices(self) -> list[GeoPoint]:
        return [offset(self.center, x, y) for x, y in self._plane]

    def contains(self, p: GeoPoint) -> bool:
        x, y = project(self.center, p)
        if math.hypot(x, y) > self.circumradius_km + _EDGE_EPS_KM:
            return False
        return point_in_polygon(list(self._plane), x, y)

    def bbox(self):
        return _radius_bbox(self.center, self.circumradius_km)

    def __str__(self):
        return f"hexagon({self.center.lat!r},{self.center.lon!r},{self.circumradius_km!r})"


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[GeoPoint, ...]
    _origin: GeoPoint = field(init=False, repr=False, compare=False)
    _plane: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        verts = tuple(self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        origin = GeoPoint(
            sum(v.lat for v in verts) / len(verts),
            verts[0].lon + sum(_wrap_deg(v.lon - verts[0].lon) for v in verts) / len(verts),
        )
        plane = tuple(project(origin, v) for v in verts)
        if _signed_area(plane) <= 0:
            raise ValueError("polygon vertices must be in counter-clockwise order")
        if _self_intersects(plane):
            raise ValueError("polygon must not self-intersect")
        object.__setattr__(self, "_origin", origin)
        object.__setattr__(self, "_plane", plane)

    def contains(self, p: GeoPoint) -> bool:
        x, y = project(self._origin, p)
        return point_in_polygon(list(self._plane), x, y)

    def bbox(self):
        lats = [v.lat for v in self.vertices]
        lons = [self._origin.lon + _wrap_deg(v.lon - self._origin.lon) for v in self.vertices]
        return min(lats), max(lats), min(lons), max(lons)

    def __str__(self):
        return "polygon(" + ";".join(f"({v.lat!r},{v.lon!r})" for v in self.vertices) + ")"


Geofence = Union[World, Circle, Hexagon, Polygon]

WORLD = World()


def _signed_area(pts) -> float:
    n = len(pts)
    return 0.5 * sum(pts[i][0] * pts[(i + 1) % n][1] - pts[(i + 1) % n][0] * pts[i][1] for i in range(n))


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _segments_cross(p1, p2, q1, q2) -> bool:
    d1, d2 = _cross(q1, q2, p1), _cross(q1, q2, p2)
    d3, d4 = _cross(p1, p2, q1), _cross(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and 0 not in (d1, d2, d3, d4)


def _self_intersects(pts) -> bool:
    n = len(pts)
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return True
    return False


def _radius_bbox(center: GeoPoint, r_km: float):
    dlat = math.degrees(r_km / EARTH_RADIUS_KM)
    coslat = max(math.cos(math.radians(center.lat)), 1e-9)
    dlon = math.degrees(r_km / (EARTH_RADIUS_KM * coslat))
    return center.lat - dlat, center.lat + dlat, center.lon - dlon, center.lon + dlon


def contains(fence: Geofence, p: GeoPoint) -> bool:
    return fence.contains(p)


def fences_disjoint(a: Geofence, b: Geofence, resolution_km: float = 0.5) -> bool:
    """Grid-sampled disjointness check over the overlap of both bounding boxes.

    Meant for registry validation: two fences count as disjoint when no grid
    point lies inside both.
    """
    if isinstance(a, World) or isinstance(b, World):
        raise ValueError("world fence overlaps every fence; disjointness is undefined")
    if resolution_km <= 0:
        raise ValueError("grid resolution must be positive")
    alat0, alat1, alon0, alon1 = a.bbox()
    blat0, blat1, blon0, blon1 = b.bbox()
    lat0, lat1 = max(alat0, blat0), min(alat1, blat1)
    # both boxes are expressed relative to their own fence; bring b next to a
    shift = _wrap_deg(blon0 - alon0) - (blon0 - alon0)
    lon0, lon1 = max(alon0, blon0 + shift), min(alon1, blon1 + shift)
    if lat0 > lat1 or lon0 > lon1:
        return True
    mid = math.radians((lat0 + lat1) / 2.0)
    step_lat = math.degrees(resolution_km / EARTH_RADIUS_KM)
    step_lon = math.degrees(resolution_km / (EARTH_RADIUS_KM * max(math.cos(mid), 1e-9)))
    n_lat = int((lat1 - lat0) / step_lat) + 1
    n_lon = int((lon1 - lon0) / step_lon) + 1
    for i in range(n_lat + 1):
        lat = min(lat0 + i * step_lat, lat1)
        for j in range(n_lon + 1):
            lon = min(lon0 + j * step_lon, lon1)
            p = GeoPoint(max(-90.0, min(90.0, lat)), lon)
            if a.contains(p) and b.contains(p):
                return False
    return True


# -- text form -------------------------------------------------------------------

_NUM = r"\s*(-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)\s*"
_CIRCLE_RE = re.compile(rf"^(circle|hexagon)\({_NUM},{_NUM},{_NUM}\)$")
_PAIR_RE = re.compile(rf"^\({_NUM},{_NUM}\)$")


def parse_geofence(text: str) -> Geofence:
    """Parse ``world``, ``circle(lat,lon,r)``, ``hexagon(lat,lon,r)`` or ``polygon((lat,lon);...)``."""
    s = text.strip()
    if s == "world":
        return WORLD
    m = _CIRCLE_RE.match(s)
    if m:
        kind, lat, lon, r = m.groups()
        center = GeoPoint(float(lat), float(lon))
        return Circle(center, float(r)) if kind == "circle" else Hexagon(center, float(r))
    if s.startswith("polygon(") and s.endswith(")"):
        parts = [part.strip() for part in s[len("polygon("):-1].split(";")]
        verts = []
        for part in parts:
            pm = _PAIR_RE.match(part)
            if not pm:
                raise ValueError(f"bad polygon vertex {part!r}")
            verts.append(GeoPoint(float(pm.group(1)), float(pm.group(2))))
        return Polygon(tuple(verts))
    raise ValueError(f"unrecognised geofence {text!r}")


def format_geofence(fence: Geofence) -> str:
    return str(fence)
