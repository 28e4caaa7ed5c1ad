"""WGS84 <-> UTM reprojection, CRS tags and planar polygons.

The forward and inverse transverse Mercator use the Krueger series in the
third flattening ``n`` carried to sixth order, which is accurate to well
under a millimetre inside a UTM zone. The geodetic latitude is recovered
from the conformal latitude by Newton iteration instead of a second series.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import GeometryError, ProjectionError

# WGS84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
UTM_K0 = 0.9996
FALSE_EASTING = 500000.0
FALSE_NORTHING_SOUTH = 10000000.0
MAX_UTM_LAT = 84.0

_N = WGS84_F / (2.0 - WGS84_F)
_E2 = WGS84_F * (2.0 - WGS84_F)
_E = math.sqrt(_E2)


def _series(n: float) -> tuple[float, tuple[float, ...], tuple[float, ...]]:
    n2, n3, n4, n5, n6 = n**2, n**3, n**4, n**5, n**6
    rectifying = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0)
    alpha = (
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    )
    beta = (
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512 + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105 - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    )
    return rectifying, alpha, beta


_RECTIFYING_RADIUS, _ALPHA, _BETA = _series(_N)


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not -90.0 < self.lat < 90.0:
            raise ProjectionError(f"latitude {self.lat} outside (-90, 90)")
        if not -180.0 <= self.lon <= 180.0:
            raise ProjectionError(f"longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class UtmCoord:
    easting: float
    northing: float
    zone: int
    hemisphere: str = "north"

    def __post_init__(self):
        if not 1 <= self.zone <= 60:
            raise ProjectionError(f"UTM zone {self.zone} outside [1, 60]")
        if self.hemisphere not in ("north", "south"):
            raise ProjectionError(f"hemisphere must be 'north' or 'south', got {self.hemisphere!r}")


@dataclass(frozen=True)
class Crs:
    """Either geographic WGS84 (EPSG:4326) or a WGS84 UTM zone."""

    kind: str
    zone: int | None = None
    hemisphere: str | None = None

    @classmethod
    def geographic(cls) -> "Crs":
        return cls("geographic")

    @classmethod
    def utm(cls, zone: int, hemisphere: str = "north") -> "Crs":
        if not 1 <= zone <= 60 or hemisphere not in ("north", "south"):
            raise ProjectionError(f"invalid UTM zone/hemisphere: {zone}/{hemisphere}")
        return cls("utm", int(zone), hemisphere)

    @classmethod
    def from_epsg(cls, code: int | str) -> "Crs":
        text = str(code).upper().strip()
        if text.startswith("EPSG:"):
            text = text[5:]
        try:
            value = int(text)
        except ValueError:
            raise ProjectionError(f"unrecognised CRS {code!r}") from None
        if value == 4326:
            return cls.geographic()
        if 32601 <= value <= 32660:
            return cls.utm(value - 32600, "north")
        if 32701 <= value <= 32760:
            return cls.utm(value - 32700, "south")
        raise ProjectionError(f"unsupported EPSG code {value}; only 4326 and WGS84 UTM zones")

    @property
    def epsg(self) -> int:
        if self.kind == "geographic":
            return 4326
        return (32600 if self.hemisphere == "north" else 32700) + self.zone

    @property
    def is_metric(self) -> bool:
        return self.kind == "utm"

    def __str__(self):
        return f"EPSG:{self.epsg}"


def utm_zone_of(p: GeoPoint | float) -> int:
    lon = p.lon if isinstance(p, GeoPoint) else float(p)
    zone = math.floor((lon + 180.0) / 6.0) + 1
    return min(max(zone, 1), 60)


def central_meridian(zone: int) -> float:
    return 6.0 * zone - 183.0


def hemisphere_of(lat: float) -> str:
    return "north" if lat >= 0 else "south"


def project_lonlat(lon, lat, zone: int, hemisphere: str = "north"):
    """Vectorised forward transverse Mercator; returns ``(easting, northing)``."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    if np.any(np.abs(lat) >= MAX_UTM_LAT):
        raise ProjectionError(f"latitude outside the UTM domain |lat| < {MAX_UTM_LAT}")
    phi = np.radians(lat)
    lam = np.radians(lon - central_meridian(zone))
    lam = (lam + math.pi) % (2 * math.pi) - math.pi

    sin_phi = np.sin(phi)
    t = np.sinh(np.arctanh(sin_phi) - _E * np.arctanh(_E * sin_phi))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1.0 + t * t))

    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi += a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta += a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)

    easting = FALSE_EASTING + UTM_K0 * _RECTIFYING_RADIUS * eta
    northing = UTM_K0 * _RECTIFYING_RADIUS * xi
    if hemisphere == "south":
        northing = northing + FALSE_NORTHING_SOUTH
    return easting, northing


def _geodetic_from_conformal(tau_p):
    # Newton iteration on tan(phi), given tan(conformal latitude)
    tau = tau_p.copy()
    for _ in range(6):
        tau1 = np.sqrt(1.0 + tau * tau)
        sig = np.sinh(_E * np.arctanh(_E * tau / tau1))
        taupa = np.sqrt(1.0 + sig * sig) * tau - sig * tau1
        dtau = (tau_p - taupa) / np.sqrt(1.0 + taupa * taupa) * (1.0 + (1.0 - _E2) * tau * tau) / (
            (1.0 - _E2) * tau1
        )
        tau = tau + dtau
        if np.all(np.abs(dtau) < 1e-14 * np.maximum(1.0, np.abs(tau))):
            break
    return tau


def unproject_utm(easting, northing, zone: int, hemisphere: str = "north"):
    """Vectorised inverse transverse Mercator; returns ``(lon, lat)`` in degrees."""
    easting = np.asarray(easting, dtype=np.float64)
    northing = np.asarray(northing, dtype=np.float64)
    if hemisphere == "south":
        northing = northing - FALSE_NORTHING_SOUTH
    xi = northing / (UTM_K0 * _RECTIFYING_RADIUS)
    eta = (easting - FALSE_EASTING) / (UTM_K0 * _RECTIFYING_RADIUS)

    xi_p = xi.copy()
    eta_p = eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p -= b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p -= b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)

    sinh_eta = np.sinh(eta_p)
    cos_xi = np.cos(xi_p)
    tau_p = np.sin(xi_p) / np.sqrt(sinh_eta**2 + cos_xi**2)
    tau = _geodetic_from_conformal(tau_p)
    lat = np.degrees(np.arctan(tau))
    lon = central_meridian(zone) + np.degrees(np.arctan2(sinh_eta, cos_xi))
    return lon, lat


def to_utm(p: GeoPoint, zone: int | None = None, hemisphere: str | None = None) -> UtmCoord:
    if abs(p.lat) >= MAX_UTM_LAT:
        raise ProjectionError(f"latitude {p.lat} outside the UTM domain |lat| < {MAX_UTM_LAT}")
    zone = utm_zone_of(p) if zone is None else zone
    hemisphere = hemisphere_of(p.lat) if hemisphere is None else hemisphere
    e, n = project_lonlat(p.lon, p.lat, zone, hemisphere)
    return UtmCoord(float(e), float(n), zone, hemisphere)


def from_utm(c: UtmCoord) -> GeoPoint:
    lon, lat = unproject_utm(c.easting, c.northing, c.zone, c.hemisphere)
    return GeoPoint(float(lon), float(lat))


# -- polygons ---------------------------------------------------------------


def _as_ring(coords) -> np.ndarray:
    ring = np.asarray(coords, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] < 2:
        raise GeometryError("ring must be a sequence of (x, y) pairs")
    ring = ring[:, :2]
    if len(ring) < 4:
        raise GeometryError(f"ring needs at least 4 vertices, got {len(ring)}")
    if not np.array_equal(ring[0], ring[-1]):
        raise GeometryError("ring is not closed (first vertex != last vertex)")
    return ring


def _orient(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def ring_self_intersects(ring: np.ndarray) -> bool:
    """True if two non-adjacent edges of a closed ring touch or cross."""
    a = ring[:-1]
    b = ring[1:]
    m = len(a)
    if m < 4:
        return False
    for i in range(m - 2):
        j = np.arange(i + 2, m if i > 0 else m - 1)
        if j.size == 0:
            continue
        p, q = a[i], b[i]
        r, s = a[j], b[j]
        d1 = _orient(p[0], p[1], q[0], q[1], r[:, 0], r[:, 1])
        d2 = _orient(p[0], p[1], q[0], q[1], s[:, 0], s[:, 1])
        d3 = _orient(r[:, 0], r[:, 1], s[:, 0], s[:, 1], p[0], p[1])
        d4 = _orient(r[:, 0], r[:, 1], s[:, 0], s[:, 1], q[0], q[1])
        proper = (np.sign(d1) * np.sign(d2) < 0) & (np.sign(d3) * np.sign(d4) < 0)
        if proper.any():
            return True
        # collinear touching
        for d, pt, seg0, seg1 in ((d1, r, p, q), (d2, s, p, q)):
            hit = (d == 0) & _within_box(pt, seg0, seg1)
            if hit.any():
                return True
    return False


def _within_box(pts, p, q):
    return (
        (pts[:, 0] >= min(p[0], q[0]))
        & (pts[:, 0] <= max(p[0], q[0]))
        & (pts[:, 1] >= min(p[1], q[1]))
        & (pts[:, 1] <= max(p[1], q[1]))
    )


def _ring_crossings(ring: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Return (odd-crossing parity, on-edge mask) for points against one ring."""
    parity = np.zeros(x.shape, dtype=bool)
    on_edge = np.zeros(x.shape, dtype=bool)
    span = max(float(np.ptp(ring[:, 0])), float(np.ptp(ring[:, 1])), 1.0)
    tol = 1e-12 * span
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        dx, dy = x2 - x1, y2 - y1
        cross = dx * (y - y1) - dy * (x - x1)
        seg_len = math.hypot(dx, dy)
        in_box = (
            (x >= min(x1, x2) - tol)
            & (x <= max(x1, x2) + tol)
            & (y >= min(y1, y2) - tol)
            & (y <= max(y1, y2) + tol)
        )
        on_edge |= in_box & (np.abs(cross) <= tol * max(seg_len, 1.0))
        straddles = (y1 > y) != (y2 > y)
        if dy != 0:
            with np.errstate(invalid="ignore", divide="ignore"):
                x_int = x1 + (y - y1) * dx / dy
            parity ^= straddles & (x < x_int)
    return parity, on_edge


@dataclass(frozen=True, eq=False)
class Polygon:
    """A polygon with one exterior ring and optional holes (even-odd fill)."""

    exterior: np.ndarray
    interiors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "interiors", tuple(_as_ring(r) for r in self.interiors))

    @classmethod
    def from_bbox(cls, minx: float, miny: float, maxx: float, maxy: float) -> "Polygon":
        return cls([(minx, miny), (maxx, miny), (maxx, maxy), (minx, maxy), (minx, miny)])

    @property
    def rings(self) -> tuple:
        return (self.exterior,) + self.interiors

    @property
    def polygons(self) -> tuple:
        return (self,)

    def validate(self) -> "Polygon":
        if ring_self_intersects(self.exterior):
            raise GeometryError("exterior ring is self-intersecting")
        return self

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        r = self.exterior
        return (float(r[:, 0].min()), float(r[:, 1].min()), float(r[:, 0].max()), float(r[:, 1].max()))

    def contains(self, x, y):
        """Even-odd point-in-polygon; points on any ring edge count as inside.

        Accepts scalars or arrays; returns a bool or a boolean array.
        """
        xa = np.asarray(x, dtype=np.float64)
        ya = np.asarray(y, dtype=np.float64)
        parity = np.zeros(np.broadcast(xa, ya).shape, dtype=bool)
        edge = np.zeros_like(parity)
        for ring in self.rings:
            p, e = _ring_crossings(ring, xa, ya)
            parity ^= p
            edge |= e
        result = parity | edge
        return bool(result) if result.ndim == 0 else result

    def reversed(self) -> "Polygon":
        return Polygon(self.exterior[::-1], tuple(r[::-1] for r in self.interiors))

    def transform(self, fn) -> "Polygon":
        """Apply ``fn(x_array, y_array) -> (x, y)`` to every vertex."""

        def _t(ring):
            x, y = fn(ring[:, 0], ring[:, 1])
            out = np.column_stack([x, y])
            out[-1] = out[0]
            return out

        return Polygon(_t(self.exterior), tuple(_t(r) for r in self.interiors))

    def densify(self, max_step: float) -> "Polygon":
        def _d(ring):
            out = []
            for a, b in zip(ring[:-1], ring[1:]):
                k = max(1, int(math.ceil(float(np.hypot(*(b - a))) / max_step)))
                t = np.arange(k)[:, None] / k
                out.append(a + t * (b - a))
            out.append(ring[-1:])
            return np.vstack(out)

        return Polygon(_d(self.exterior), tuple(_d(r) for r in self.interiors))

    def area(self) -> float:
        return abs(_signed_area(self.exterior)) - sum(abs(_signed_area(r)) for r in self.interiors)

    def centroid(self) -> tuple[float, float]:
        r = self.exterior
        x0, y0 = r[0]
        x, y = r[:, 0] - x0, r[:, 1] - y0
        cross = x[:-1] * y[1:] - x[1:] * y[:-1]
        a = cross.sum() / 2.0
        if a == 0:
            return float(r[:-1, 0].mean()), float(r[:-1, 1].mean())
        cx = ((x[:-1] + x[1:]) * cross).sum() / (6.0 * a)
        cy = ((y[:-1] + y[1:]) * cross).sum() / (6.0 * a)
        return float(cx + x0), float(cy + y0)


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return float((x[:-1] * y[1:] - x[1:] * y[:-1]).sum() / 2.0)


@dataclass(frozen=True, eq=False)
class MultiPolygon:
    polygons: tuple

    def __post_init__(self):
        if not self.polygons:
            raise GeometryError("MultiPolygon needs at least one polygon")
        object.__setattr__(self, "polygons", tuple(self.polygons))

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        boxes = np.array([p.bbox for p in self.polygons])
        return (float(boxes[:, 0].min()), float(boxes[:, 1].min()), float(boxes[:, 2].max()), float(boxes[:, 3].max()))

    def contains(self, x, y):
        result = None
        for p in self.polygons:
            r = np.asarray(p.contains(x, y))
            result = r if result is None else (result | r)
        return bool(result) if result.ndim == 0 else result

    def validate(self) -> "MultiPolygon":
        for p in self.polygons:
            p.validate()
        return self

    def transform(self, fn) -> "MultiPolygon":
        return MultiPolygon(tuple(p.transform(fn) for p in self.polygons))

    def densify(self, max_step: float) -> "MultiPolygon":
        return MultiPolygon(tuple(p.densify(max_step) for p in self.polygons))

    def area(self) -> float:
        return sum(p.area() for p in self.polygons)

    def centroid(self) -> tuple[float, float]:
        areas = np.array([max(p.area(), 0.0) for p in self.polygons])
        cents = np.array([p.centroid() for p in self.polygons])
        if areas.sum() == 0:
            return float(cents[:, 0].mean()), float(cents[:, 1].mean())
        return (float((cents[:, 0] * areas).sum() / areas.sum()), float((cents[:, 1] * areas).sum() / areas.sum()))


def contains(poly: Polygon | MultiPolygon, p) -> bool:
    x, y = p
    return bool(poly.contains(x, y))


# -- GeoJSON ----------------------------------------------------------------


def _polygons_from_geometry(geom: dict) -> list[Polygon]:
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        return [Polygon(coords[0], tuple(coords[1:]))]
    if kind == "MultiPolygon":
        return [Polygon(c[0], tuple(c[1:])) for c in coords]
    return []


def parse_boundary_geojson(doc: dict | str | bytes) -> MultiPolygon:
    """Read Polygon/MultiPolygon geometries (WGS84 lon/lat) from GeoJSON.

    Accepts a FeatureCollection, a single Feature, or a bare geometry.
    Non-polygonal features and unknown members are ignored.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise GeometryError(f"boundary is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise GeometryError("boundary GeoJSON must be an object")
    polygons: list[Polygon] = []
    kind = doc.get("type")
    try:
        if kind == "FeatureCollection":
            for feature in doc.get("features") or []:
                geom = (feature or {}).get("geometry") or {}
                polygons.extend(_polygons_from_geometry(geom))
        elif kind == "Feature":
            polygons.extend(_polygons_from_geometry(doc.get("geometry") or {}))
        else:
            polygons.extend(_polygons_from_geometry(doc))
    except (TypeError, IndexError) as exc:
        raise GeometryError(f"malformed polygon coordinates: {exc}") from None
    if not polygons:
        raise GeometryError("no Polygon or MultiPolygon geometry found")
    return MultiPolygon(tuple(polygons)).validate()


def read_boundary(path: str | Path) -> MultiPolygon:
    return parse_boundary_geojson(Path(path).read_text(encoding="utf-8"))


def boundary_to_geojson(poly: Polygon | MultiPolygon) -> dict:
    polys = poly.polygons
    coords = [[r.tolist() for r in p.rings] for p in polys]
    return {
        "type": "FeatureCollection",
        "features": [{"type": "Feature", "properties": {}, "geometry": {"type": "MultiPolygon", "coordinates": coords}}],
    }


def utm_crs_for(poly: Polygon | MultiPolygon) -> Crs:
    """UTM zone of a geographic boundary, taken at its centroid."""
    lon, lat = poly.centroid()
    return Crs.utm(utm_zone_of(lon), hemisphere_of(lat))


def reproject_boundary(poly, src: Crs, dst: Crs, densify_deg: float | None = 0.01):
    """Reproject polygon vertices between geographic and UTM CRSs."""
    if src == dst:
        return poly
    if src.kind == "geographic" and dst.kind == "utm":
        if densify_deg:
            poly = poly.densify(densify_deg)
        return poly.transform(lambda x, y: project_lonlat(x, y, dst.zone, dst.hemisphere))
    if src.kind == "utm" and dst.kind == "geographic":
        return poly.transform(lambda x, y: unproject_utm(x, y, src.zone, src.hemisphere))
    if src.kind == "utm" and dst.kind == "utm":
        geo = reproject_boundary(poly, src, Crs.geographic())
        return reproject_boundary(geo, Crs.geographic(), dst, None)
    raise ProjectionError(f"cannot reproject {src} -> {dst}")


def transform_points(x, y, src: Crs, dst: Crs):
    if src == dst:
        return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if src.kind == "geographic" and dst.kind == "utm":
        return project_lonlat(x, y, dst.zone, dst.hemisphere)
    if src.kind == "utm" and dst.kind == "geographic":
        return unproject_utm(x, y, src.zone, src.hemisphere)
    lon, lat = unproject_utm(x, y, src.zone, src.hemisphere)
    return project_lonlat(lon, lat, dst.zone, dst.hemisphere)


def bbox_union(boxes: Iterable[Sequence[float]]) -> tuple[float, float, float, float]:
    arr = np.asarray(list(boxes), dtype=np.float64)
    return (float(arr[:, 0].min()), float(arr[:, 1].min()), float(arr[:, 2].max()), float(arr[:, 3].max()))
