import math

import pytest
from hypothesis import given, settings, strategies as st

from geofaas.geo import (
    WORLD, Circle, GeoPoint, Hexagon, Polygon, fences_disjoint, format_geofence,
    haversine_km, normalize_lon, offset, parse_geofence, project,
)

# independent oracle: central angle from 3D unit vectors via atan2(|a x b|, a.b)
def vector_distance_km(a: GeoPoint, b: GeoPoint, r=6371.0) -> float:
    def unit(p):
        la, lo = math.radians(p.lat), math.radians(p.lon)
        return (math.cos(la) * math.cos(lo), math.cos(la) * math.sin(lo), math.sin(la))
    u, v = unit(a), unit(b)
    cx = u[1] * v[2] - u[2] * v[1]
    cy = u[2] * v[0] - u[0] * v[2]
    cz = u[0] * v[1] - u[1] * v[0]
    dot = sum(x * y for x, y in zip(u, v))
    return r * math.atan2(math.sqrt(cx * cx + cy * cy + cz * cz), dot)


lats = st.floats(-90, 90, allow_nan=False)
lons = st.floats(-180, 180, allow_nan=False)
points = st.builds(GeoPoint, lats, lons)


def test_one_degree_on_equator():
    assert haversine_km(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(111.19492664455873, abs=1e-9)


def test_berlin_potsdam_frozen():
    berlin, potsdam = GeoPoint(52.52, 13.405), GeoPoint(52.3906, 13.0645)
    # value frozen from the vector oracle above
    assert haversine_km(berlin, potsdam) == pytest.approx(27.191175029724995, abs=1e-6)
    assert vector_distance_km(berlin, potsdam) == pytest.approx(27.191175029724995, abs=1e-9)


def test_antipodes():
    assert haversine_km(GeoPoint(0, 0), GeoPoint(0, 180)) == pytest.approx(math.pi * 6371.0)


@settings(max_examples=1000, deadline=None)
@given(points, points)
def test_haversine_matches_vector_oracle(a, b):
    # haversine loses a few digits near antipodes; 1 m is far below any fence scale
    assert haversine_km(a, b) == pytest.approx(vector_distance_km(a, b), abs=1e-3)


@settings(max_examples=1000, deadline=None)
@given(points, points, points)
def test_metric_axioms(a, b, c):
    ab, ba = haversine_km(a, b), haversine_km(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert ab >= 0
    assert haversine_km(a, a) == pytest.approx(0.0, abs=1e-9)
    assert ab <= haversine_km(a, c) + haversine_km(c, b) + 1e-6
    assert ab <= math.pi * 6371.0 + 1e-6


@settings(max_examples=1000, deadline=None)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_normalize_lon_range(lon):
    n = normalize_lon(lon)
    assert -180 < n <= 180
    assert math.isclose(math.cos(math.radians(n)), math.cos(math.radians(lon)), abs_tol=1e-7)


def test_lon_wraps_and_lat_validated():
    assert GeoPoint(10, 190).lon == pytest.approx(-170)
    assert GeoPoint(10, -180).lon == 180
    with pytest.raises(ValueError):
        GeoPoint(91, 0)
    with pytest.raises(ValueError):
        GeoPoint(float("nan"), 0)


def test_project_offset_roundtrip():
    origin = GeoPoint(52.5, 13.3)
    p = offset(origin, 3.5, -7.25)
    x, y = project(origin, p)
    assert (x, y) == pytest.approx((3.5, -7.25), abs=1e-9)


def test_hexagon_geometry():
    hexa = Hexagon(GeoPoint(52.5125, 13.3269), 12.0)
    c = hexa.center
    assert hexa.contains(c)
    assert hexa.inradius_km == pytest.approx(12.0 * math.sqrt(3) / 2)
    # pointy top: the vertex due north is in, a hair beyond it is out
    assert hexa.contains(offset(c, 0, 12.0))
    assert not hexa.contains(offset(c, 0, 12.01))
    # flat sides east and west at the inradius
    assert hexa.contains(offset(c, hexa.inradius_km - 0.01, 0))
    assert not hexa.contains(offset(c, hexa.inradius_km + 0.01, 0))
    for v in hexa.vertices():
        assert hexa.contains(v)


@settings(max_examples=1000, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 1))
def test_hexagon_between_incircle_and_circumcircle(angle, frac):
    hexa = Hexagon(GeoPoint(40.0, -3.7), 10.0)
    r_in = hexa.inradius_km
    inner = offset(hexa.center, frac * r_in * 0.999 * math.cos(angle), frac * r_in * 0.999 * math.sin(angle))
    assert hexa.contains(inner)
    outer = offset(hexa.center, 10.001 * math.cos(angle), 10.001 * math.sin(angle))
    assert not hexa.contains(outer)


def test_circle_contains():
    circ = Circle(GeoPoint(0, 0), 111.2)
    assert circ.contains(GeoPoint(0, 1))
    assert not circ.contains(GeoPoint(0, 1.01))
    with pytest.raises(ValueError):
        Circle(GeoPoint(0, 0), 0)


def test_polygon_contains_and_validation():
    square = Polygon((GeoPoint(0, 0), GeoPoint(0, 1), GeoPoint(1, 1), GeoPoint(1, 0)))
    assert square.contains(GeoPoint(0.5, 0.5))
    assert square.contains(GeoPoint(0, 0.5))  # closed
    assert not square.contains(GeoPoint(1.5, 0.5))
    with pytest.raises(ValueError):
        Polygon((GeoPoint(0, 0), GeoPoint(1, 1), GeoPoint(0, 1), GeoPoint(1, 0)))


def test_world_contains_everything():
    assert WORLD.contains(GeoPoint(-89.9, 179.9))


def test_adjacent_hexagons_are_disjoint():
    a = Hexagon(GeoPoint(52.5125, 13.3269), 12.0)
    b_center = offset(a.center, 12 * math.sqrt(3) * math.sin(math.radians(210)),
                      12 * math.sqrt(3) * math.cos(math.radians(210)))
    b = Hexagon(b_center, 12.0)
    assert fences_disjoint(a, b)
    assert not fences_disjoint(a, Circle(a.center, 5.0))
    with pytest.raises(ValueError):
        fences_disjoint(a, WORLD)


@pytest.mark.parametrize("text", [
    "world",
    "circle(52.5,13.4,10.0)",
    "hexagon(52.5125,13.3269,12.0)",
    "polygon((0.0,0.0);(0.0,1.0);(1.0,1.0);(1.0,0.0))",
])
def test_geofence_text_roundtrip(text):
    fence = parse_geofence(text)
    assert parse_geofence(format_geofence(fence)) == fence


@pytest.mark.parametrize("text", ["", "circle(1,2)", "square(1,2,3)", "polygon((a,b))"])
def test_geofence_parse_errors(text):
    with pytest.raises(ValueError):
        parse_geofence(text)
