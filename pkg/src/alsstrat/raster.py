"""Single-band georeferenced grids: I/O, cropping, slope and class maps."""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Sequence

import numpy as np

from .exceptions import ClassificationError, RasterError, RasterParseError
from .geo import Crs, transform_points

DEFAULT_NODATA = -9999
CLASS_NODATA = 0


class LandCoverL1(IntEnum):
    Water = 1
    Developed = 2
    Barren = 3
    Forest = 4
    Shrubland = 5
    Herbaceous = 6
    PlantedCultivated = 7
    Wetlands = 8


class SlopeClass(IntEnum):
    Flat = 1
    Sloped = 2
    Steep = 3


# NLCD Level II code -> Level I class
LEVEL2_TO_LEVEL1: dict[int, LandCoverL1] = {
    11: LandCoverL1.Water,
    12: LandCoverL1.Water,
    21: LandCoverL1.Developed,
    22: LandCoverL1.Developed,
    23: LandCoverL1.Developed,
    24: LandCoverL1.Developed,
    31: LandCoverL1.Barren,
    41: LandCoverL1.Forest,
    42: LandCoverL1.Forest,
    43: LandCoverL1.Forest,
    51: LandCoverL1.Shrubland,
    52: LandCoverL1.Shrubland,
    71: LandCoverL1.Herbaceous,
    72: LandCoverL1.Herbaceous,
    73: LandCoverL1.Herbaceous,
    74: LandCoverL1.Herbaceous,
    81: LandCoverL1.PlantedCultivated,
    82: LandCoverL1.PlantedCultivated,
    90: LandCoverL1.Wetlands,
    95: LandCoverL1.Wetlands,
}

SLOPE_THRESHOLDS = (5.0, 17.0)


@dataclass(frozen=True, eq=False)
class RasterGrid:
    """A north-up grid; ``band[0]`` is the northernmost row.

    ``origin_x``/``origin_y`` locate the upper-left corner of the upper-left
    cell in the grid CRS.
    """

    origin_x: float
    origin_y: float
    cell_size: float
    band: np.ndarray
    nodata: float | int | None = DEFAULT_NODATA
    crs: Crs | None = None

    def __post_init__(self):
        band = np.asarray(self.band)
        if band.ndim != 2 or band.shape[0] < 1 or band.shape[1] < 1:
            raise RasterError(f"band must be a non-empty 2-D array, got shape {band.shape}")
        if not self.cell_size > 0:
            raise RasterError(f"cell_size must be positive, got {self.cell_size}")
        band = band.copy() if band.flags.writeable else band
        band.setflags(write=False)
        object.__setattr__(self, "band", band)

    @property
    def width(self) -> int:
        return self.band.shape[1]

    @property
    def height(self) -> int:
        return self.band.shape[0]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (
            self.origin_x,
            self.origin_y - self.height * self.cell_size,
            self.origin_x + self.width * self.cell_size,
            self.origin_y,
        )

    @property
    def valid(self) -> np.ndarray:
        if self.nodata is None:
            return np.ones(self.band.shape, dtype=bool)
        if isinstance(self.nodata, float) and math.isnan(self.nodata):
            return ~np.isnan(self.band)
        return self.band != self.nodata

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.origin_x + (np.arange(self.width) + 0.5) * self.cell_size
        ys = self.origin_y - (np.arange(self.height) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def with_band(self, band, nodata=None, crs=None) -> "RasterGrid":
        return replace(
            self,
            band=np.asarray(band),
            nodata=self.nodata if nodata is None else nodata,
            crs=self.crs if crs is None else crs,
        )

    def same_geometry(self, other: "RasterGrid", tol: float = 1e-6) -> bool:
        return (
            self.band.shape == other.band.shape
            and abs(self.origin_x - other.origin_x) <= tol
            and abs(self.origin_y - other.origin_y) <= tol
            and abs(self.cell_size - other.cell_size) <= tol
            and self.crs == other.crs
        )

    def __eq__(self, other):
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return self.same_geometry(other, 0.0) and self.nodata == other.nodata and np.array_equal(self.band, other.band)


# -- ESRI ASCII grid --------------------------------------------------------

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_CENTER_KEYS = {"xllcenter": "xllcorner", "yllcenter": "yllcorner"}


def parse_ascii_grid(data: bytes | str, crs: Crs | None = None) -> RasterGrid:
    """Parse an ESRI ASCII grid into a :class:`RasterGrid`.

    Integer-looking payloads produce an ``int32`` band, anything with a
    decimal point or exponent produces ``float32``.
    """
    text = data.decode("ascii", errors="replace") if isinstance(data, bytes) else data
    tokens = text.split()
    header: dict[str, float] = {}
    centered = set()
    pos = 0
    while pos + 1 < len(tokens) and re.match(r"^[A-Za-z_]+$", tokens[pos]):
        key = tokens[pos].lower()
        if key in _CENTER_KEYS:
            centered.add(_CENTER_KEYS[key])
            key = _CENTER_KEYS[key]
        if key not in _HEADER_KEYS:
            raise RasterParseError(f"unknown header key {tokens[pos]!r}")
        try:
            header[key] = float(tokens[pos + 1])
        except ValueError:
            raise RasterParseError(f"non-numeric header value for {key}: {tokens[pos + 1]!r}") from None
        pos += 2
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise RasterParseError(f"missing header keys: {', '.join(missing)}")
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise RasterParseError(f"invalid grid size {ncols} x {nrows}")
    ncols, nrows = int(ncols), int(nrows)
    cell = header["cellsize"]
    if cell <= 0:
        raise RasterParseError(f"cellsize must be positive, got {cell}")

    values = tokens[pos:]
    if len(values) != ncols * nrows:
        raise RasterParseError(f"expected {ncols * nrows} cell values, found {len(values)}")
    is_float = any(("." in v or "e" in v.lower() or "nan" in v.lower()) for v in values)
    try:
        arr = np.array(values, dtype=np.float64)
    except ValueError:
        bad = next(v for v in values if not _is_number(v))
        raise RasterParseError(f"non-numeric cell value {bad!r}") from None
    nodata_raw = header["nodata_value"]
    if is_float:
        band = arr.astype(np.float32).reshape(nrows, ncols)
        nodata = float(np.float32(nodata_raw))
    else:
        band = arr.astype(np.int32).reshape(nrows, ncols)
        nodata = int(nodata_raw)

    xll, yll = header["xllcorner"], header["yllcorner"]
    if "xllcorner" in centered:
        xll -= cell / 2
    if "yllcorner" in centered:
        yll -= cell / 2
    return RasterGrid(xll, yll + nrows * cell, cell, band, nodata, crs)


def _is_number(v: str) -> bool:
    try:
        float(v)
    except ValueError:
        return False
    return True


def write_ascii_grid(grid: RasterGrid) -> bytes:
    band = grid.band
    integer = np.issubdtype(band.dtype, np.integer)
    fmt = "{:d}" if integer else "{:.9g}"
    nodata = DEFAULT_NODATA if grid.nodata is None else grid.nodata
    lines = [
        f"ncols {grid.width}",
        f"nrows {grid.height}",
        f"xllcorner {grid.origin_x!r}",
        f"yllcorner {grid.bounds[1]!r}",
        f"cellsize {grid.cell_size!r}",
        f"NODATA_value {fmt.format(int(nodata) if integer else float(nodata))}",
    ]
    for row in band:
        lines.append(" ".join(fmt.format(int(v) if integer else float(v)) for v in row))
    return ("\n".join(lines) + "\n").encode("ascii")


# -- minimal GeoTIFF --------------------------------------------------------

_TIFF_TYPES = {1: "B", 2: "s", 3: "H", 4: "I", 11: "f", 12: "d", 16: "Q"}


def parse_geotiff(data: bytes, crs: Crs | None = None) -> RasterGrid:
    """Read a single-band uncompressed GeoTIFF (uint8/uint16/int16/int32/float32).

    Georeferencing comes from ModelTiepoint + ModelPixelScale; the CRS from
    the GeoKey directory when present, else ``crs``.
    """
    if len(data) < 8:
        raise RasterParseError("file too short for a TIFF header")
    bo = {b"II": "<", b"MM": ">"}.get(data[:2])
    if bo is None or struct.unpack(bo + "H", data[2:4])[0] != 42:
        raise RasterParseError("not a classic TIFF (bad byte order or magic)")
    (ifd,) = struct.unpack(bo + "I", data[4:8])
    try:
        (count,) = struct.unpack_from(bo + "H", data, ifd)
        tags: dict[int, tuple] = {}
        for k in range(count):
            tag, typ, n, raw = struct.unpack_from(bo + "HHI4s", data, ifd + 2 + 12 * k)
            code = _TIFF_TYPES.get(typ)
            if code is None:
                continue
            size = struct.calcsize(code) * n
            if code == "s":
                payload = raw if size <= 4 else data[struct.unpack(bo + "I", raw)[0] :][:size]
                tags[tag] = (payload.rstrip(b"\x00").decode("ascii", "replace"),)
                continue
            if size <= 4:
                tags[tag] = struct.unpack_from(bo + code * n, raw)
            else:
                (off,) = struct.unpack(bo + "I", raw)
                tags[tag] = struct.unpack_from(bo + code * n, data, off)
    except struct.error as exc:
        raise RasterParseError(f"truncated TIFF directory: {exc}") from None

    def tag(t, default=None):
        if t not in tags:
            if default is None:
                raise RasterParseError(f"missing required TIFF tag {t}")
            return default
        return tags[t]

    width, height = tag(256)[0], tag(257)[0]
    bits = tag(258, (8,))[0]
    if tag(259, (1,))[0] != 1:
        raise RasterParseError("compressed TIFF is not supported")
    if tag(277, (1,))[0] != 1:
        raise RasterParseError("only single-band TIFF is supported")
    fmt = tag(339, (1,))[0]
    dtype = {
        (1, 8): "u1",
        (1, 16): "u2",
        (2, 16): "i2",
        (2, 32): "i4",
        (1, 32): "u4",
        (3, 32): "f4",
        (3, 64): "f8",
    }.get((fmt, bits))
    if dtype is None:
        raise RasterParseError(f"unsupported sample format {fmt}/{bits} bits")
    if 322 in tags:
        raise RasterParseError("tiled TIFF is not supported")
    offsets, counts = tag(273), tag(279)
    raw = b"".join(data[o : o + c] for o, c in zip(offsets, counts))
    nbytes = width * height * bits // 8
    if len(raw) < nbytes:
        raise RasterParseError(f"strip data truncated: {len(raw)} < {nbytes} bytes")
    band = np.frombuffer(raw[:nbytes], dtype=np.dtype(dtype).newbyteorder(bo)).reshape(height, width)
    band = band.astype(np.dtype(dtype).newbyteorder("="))

    scale = tag(33550)
    tie = tag(33922)
    sx, sy = scale[0], scale[1]
    if abs(sx - sy) > 1e-9 * max(sx, sy):
        raise RasterParseError(f"non-square pixels ({sx} x {sy}) are not supported")
    origin_x = tie[3] - tie[0] * sx
    origin_y = tie[4] + tie[1] * sy

    nodata = None
    if 42113 in tags:
        try:
            nodata = float(tags[42113][0])
        except ValueError:
            nodata = None
    if nodata is not None and np.issubdtype(band.dtype, np.integer):
        nodata = int(nodata)
    if 34735 in tags:
        keys = tags[34735]
        for k in range(4, len(keys), 4):
            key_id, loc, _, value = keys[k : k + 4]
            if loc == 0 and key_id in (3072, 2048):
                try:
                    crs = Crs.from_epsg(value)
                except Exception:
                    pass
    return RasterGrid(origin_x, origin_y, sx, band, nodata, crs)


def write_geotiff(grid: RasterGrid) -> bytes:
    """Write a single-strip little-endian GeoTIFF readable by :func:`parse_geotiff`."""
    band = np.ascontiguousarray(grid.band)
    kind = {"u1": (1, 8), "u2": (1, 16), "i2": (2, 16), "i4": (2, 32), "u4": (1, 32), "f4": (3, 32), "f8": (3, 64)}
    key = band.dtype.str[1:]
    if key not in kind:
        band = band.astype(np.float32)
        key = "f4"
    fmt, bits = kind[key]
    pixels = band.astype(band.dtype.newbyteorder("<")).tobytes()

    entries = []  # (tag, type, values)
    entries.append((256, 4, (grid.width,)))
    entries.append((257, 4, (grid.height,)))
    entries.append((258, 3, (bits,)))
    entries.append((259, 3, (1,)))
    entries.append((262, 3, (1,)))
    entries.append((273, 4, (0,)))  # patched below
    entries.append((277, 3, (1,)))
    entries.append((278, 4, (grid.height,)))
    entries.append((279, 4, (len(pixels),)))
    entries.append((339, 3, (fmt,)))
    entries.append((33550, 12, (grid.cell_size, grid.cell_size, 0.0)))
    entries.append((33922, 12, (0.0, 0.0, 0.0, grid.origin_x, grid.origin_y, 0.0)))
    if grid.crs is not None:
        geo_key = 3072 if grid.crs.is_metric else 2048
        model = 1 if grid.crs.is_metric else 2
        entries.append((34735, 3, (1, 1, 0, 3, 1024, 0, 1, model, 1025, 0, 1, 1, geo_key, 0, 1, grid.crs.epsg)))
    if grid.nodata is not None:
        entries.append((42113, 2, (repr(grid.nodata).encode("ascii") + b"\x00",)))
    entries.sort()

    n = len(entries)
    ifd_offset = 8
    extra_offset = ifd_offset + 2 + 12 * n + 4
    extra = bytearray()
    body = bytearray()
    strip_entry_pos = None
    for t, typ, vals in entries:
        if typ == 2:
            payload = vals[0]
            count = len(payload)
        else:
            code = _TIFF_TYPES[typ]
            payload = struct.pack("<" + code * len(vals), *vals)
            count = len(vals)
        if t == 273:
            strip_entry_pos = len(body)
        if len(payload) <= 4:
            body += struct.pack("<HHI", t, typ, count) + payload.ljust(4, b"\x00")
        else:
            body += struct.pack("<HHI", t, typ, count) + struct.pack("<I", extra_offset + len(extra))
            extra += payload
            if len(extra) % 2:
                extra += b"\x00"
    pixel_offset = extra_offset + len(extra)
    body[strip_entry_pos + 8 : strip_entry_pos + 12] = struct.pack("<I", pixel_offset)
    header = b"II" + struct.pack("<HI", 42, ifd_offset)
    return header + struct.pack("<H", n) + bytes(body) + struct.pack("<I", 0) + bytes(extra) + pixels


def parse_raster(data: bytes, crs: Crs | None = None) -> RasterGrid:
    """Dispatch on content: TIFF magic, else ESRI ASCII grid."""
    if data[:4] in (b"II*\x00", b"MM\x00*"):
        return parse_geotiff(data, crs)
    return parse_ascii_grid(data, crs)


# -- land cover -------------------------------------------------------------


def merge_to_level1(code: int) -> LandCoverL1:
    try:
        return LEVEL2_TO_LEVEL1[int(code)]
    except KeyError:
        raise ClassificationError(f"unknown NLCD Level II code {code}") from None


def merge_grid_to_level1(grid: RasterGrid, nodata_codes: Sequence[int] = (0, 127, 250, 255)) -> RasterGrid:
    """Map a Level II land-cover grid to Level I codes (uint8, nodata 0)."""
    codes = np.asarray(grid.band).astype(np.int64)
    missing = ~grid.valid | np.isin(codes, list(nodata_codes))
    lut = np.zeros(256, dtype=np.uint8)
    known = np.zeros(256, dtype=bool)
    for k, v in LEVEL2_TO_LEVEL1.items():
        lut[k] = int(v)
        known[k] = True
    present = codes[~missing]
    bad = (present < 0) | (present > 255)
    if bad.any() or not known[present[~bad]].all():
        unknown = sorted(set(present[bad].tolist()) | set(present[~bad][~known[present[~bad]]].tolist()))
        raise ClassificationError(f"unknown NLCD Level II codes: {unknown[:10]}")
    out = np.zeros(codes.shape, dtype=np.uint8)
    out[~missing] = lut[present]
    return grid.with_band(out, nodata=CLASS_NODATA)


# -- slope ------------------------------------------------------------------


def slope_degrees(dem: RasterGrid, out_nodata: float = float(DEFAULT_NODATA)) -> RasterGrid:
    """Slope in degrees via Horn's 3x3 finite differences.

    Border cells see edge-replicated neighbours. Any nodata cell inside a
    3x3 window makes the output cell nodata.
    """
    if dem.crs is None or not dem.crs.is_metric:
        raise RasterError("slope requires a DEM in a metric (UTM) CRS")
    if dem.width < 3 or dem.height < 3:
        raise RasterError(f"slope needs at least a 3x3 grid, got {dem.width}x{dem.height}")
    z = np.asarray(dem.band, dtype=np.float64)
    valid = dem.valid
    zp = np.pad(np.where(valid, z, 0.0), 1, mode="edge")
    vp = np.pad(valid, 1, mode="edge")

    def win(dr, dc):
        return zp[1 + dr : 1 + dr + z.shape[0], 1 + dc : 1 + dc + z.shape[1]]

    a, b, c = win(-1, -1), win(-1, 0), win(-1, 1)
    d, f = win(0, -1), win(0, 1)
    g, h, i = win(1, -1), win(1, 0), win(1, 1)
    cs = dem.cell_size
    dzdx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8 * cs)
    dzdy = ((g + 2 * h + i) - (a + 2 * b + c)) / (8 * cs)
    slope = np.degrees(np.arctan(np.hypot(dzdx, dzdy)))

    ok = np.ones(z.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            ok &= vp[1 + dr : 1 + dr + z.shape[0], 1 + dc : 1 + dc + z.shape[1]]
    slope[~ok] = out_nodata
    return dem.with_band(slope, nodata=out_nodata)


def classify_slope(slope: RasterGrid, thresholds: tuple[float, float] = SLOPE_THRESHOLDS) -> RasterGrid:
    """Flat below the first threshold, Steep at or above the second."""
    lo, hi = thresholds
    if not 0 <= lo < hi:
        raise ClassificationError(f"invalid slope thresholds {thresholds}")
    s = np.asarray(slope.band, dtype=np.float64)
    valid = slope.valid & ~np.isnan(s)
    if (s[valid] < 0).any():
        raise ClassificationError("negative slope value")
    out = np.full(s.shape, CLASS_NODATA, dtype=np.uint8)
    out[valid] = np.where(s[valid] < lo, SlopeClass.Flat, np.where(s[valid] < hi, SlopeClass.Sloped, SlopeClass.Steep))
    return slope.with_band(out, nodata=CLASS_NODATA)


def classify_slope_value(deg: float, thresholds: tuple[float, float] = SLOPE_THRESHOLDS) -> SlopeClass:
    if deg < 0:
        raise ClassificationError("negative slope value")
    lo, hi = thresholds
    if deg < lo:
        return SlopeClass.Flat
    return SlopeClass.Sloped if deg < hi else SlopeClass.Steep


def percent_of_degrees(d: float) -> float:
    if not 0 <= d < 90:
        raise ValueError(f"slope angle must be in [0, 90), got {d}")
    return 100.0 * math.tan(math.radians(d))


# -- cropping and resampling ------------------------------------------------


def crop_to_polygon(grid: RasterGrid, poly) -> RasterGrid:
    """Cut the grid to the polygon bbox and blank cells whose centre is outside."""
    minx, miny, maxx, maxy = poly.bbox
    gx0, gy0, gx1, gy1 = grid.bounds
    if minx >= gx1 or maxx <= gx0 or miny >= gy1 or maxy <= gy0:
        raise RasterError("polygon does not intersect the grid")
    cs = grid.cell_size
    # tolerance absorbs projection round-off in boundaries that sit on cell edges
    eps = 1e-6
    c0 = max(0, int(math.floor((minx - grid.origin_x) / cs + eps)))
    c1 = min(grid.width, int(math.ceil((maxx - grid.origin_x) / cs - eps)))
    r0 = max(0, int(math.floor((grid.origin_y - maxy) / cs + eps)))
    r1 = min(grid.height, int(math.ceil((grid.origin_y - miny) / cs - eps)))
    if c1 <= c0 or r1 <= r0:
        raise RasterError("polygon does not intersect the grid")
    sub = grid.band[r0:r1, c0:c1]
    cropped = RasterGrid(grid.origin_x + c0 * cs, grid.origin_y - r0 * cs, cs, sub, grid.nodata, grid.crs)
    xs, ys = cropped.cell_centers()
    inside = np.asarray(poly.contains(xs, ys))
    if not inside.any():
        raise RasterError("no cell centre falls inside the polygon")
    if inside.all():
        return cropped
    if grid.nodata is None:
        raise RasterError("grid has no nodata value to mark cells outside the polygon")
    band = np.array(sub)
    band[~inside] = grid.nodata
    return cropped.with_band(band)


def sample_nearest(grid: RasterGrid, x, y, fill=None):
    """Nearest-cell lookup at map coordinates; outside cells get ``fill``."""
    fill = grid.nodata if fill is None else fill
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    col = np.floor((x - grid.origin_x) / grid.cell_size).astype(np.int64)
    row = np.floor((grid.origin_y - y) / grid.cell_size).astype(np.int64)
    inside = (col >= 0) & (col < grid.width) & (row >= 0) & (row < grid.height)
    out = np.full(x.shape, fill, dtype=grid.band.dtype)
    out[inside] = grid.band[row[inside], col[inside]]
    return out


def sample_bilinear(grid: RasterGrid, x, y, fill=None):
    """Bilinear interpolation between cell centres; nodata-touching samples get ``fill``."""
    fill = grid.nodata if fill is None else fill
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    fc = (x - grid.origin_x) / grid.cell_size - 0.5
    fr = (grid.origin_y - y) / grid.cell_size - 0.5
    fc = np.clip(fc, 0, grid.width - 1)
    fr = np.clip(fr, 0, grid.height - 1)
    c0 = np.minimum(np.floor(fc).astype(np.int64), max(grid.width - 2, 0))
    r0 = np.minimum(np.floor(fr).astype(np.int64), max(grid.height - 2, 0))
    c1 = np.minimum(c0 + 1, grid.width - 1)
    r1 = np.minimum(r0 + 1, grid.height - 1)
    tc, tr = fc - c0, fr - r0
    z = np.asarray(grid.band, dtype=np.float64)
    v = grid.valid
    val = (
        z[r0, c0] * (1 - tc) * (1 - tr)
        + z[r0, c1] * tc * (1 - tr)
        + z[r1, c0] * (1 - tc) * tr
        + z[r1, c1] * tc * tr
    )
    ok = v[r0, c0] & v[r0, c1] & v[r1, c0] & v[r1, c1]
    bx0, by0, bx1, by1 = grid.bounds
    ok &= (x >= bx0) & (x <= bx1) & (y >= by0) & (y <= by1)
    return np.where(ok, val, fill)


def resample_to(src: RasterGrid, template: RasterGrid, method: str = "nearest") -> RasterGrid:
    """Resample ``src`` onto ``template``'s cell centres (both in the template CRS)."""
    xs, ys = template.cell_centers()
    if src.crs is not None and template.crs is not None and src.crs != template.crs:
        xs, ys = transform_points(xs, ys, template.crs, src.crs)
    if method == "nearest":
        band = sample_nearest(src, xs, ys)
    elif method == "bilinear":
        band = sample_bilinear(src, xs, ys).astype(np.float64)
    else:
        raise RasterError(f"unknown resampling method {method!r}")
    nodata = src.nodata if src.nodata is not None else DEFAULT_NODATA
    return RasterGrid(template.origin_x, template.origin_y, template.cell_size, band, nodata, template.crs)


def reproject(grid: RasterGrid, dst: Crs, cell_size: float, method: str = "nearest", bbox=None) -> RasterGrid:
    """Warp a grid into ``dst`` on a north-up lattice aligned to multiples of ``cell_size``.

    ``bbox`` (in ``dst``) bounds the output; by default the transformed
    extent of the source is used.
    """
    if grid.crs is None:
        raise RasterError("source grid has no CRS")
    if grid.crs == dst and bbox is None and abs(cell_size - grid.cell_size) < 1e-9:
        return grid
    if bbox is None:
        x0, y0, x1, y1 = grid.bounds
        t = np.linspace(0, 1, 33)
        ex = np.concatenate([x0 + t * (x1 - x0), np.full_like(t, x1), x1 - t * (x1 - x0), np.full_like(t, x0)])
        ey = np.concatenate([np.full_like(t, y0), y0 + t * (y1 - y0), np.full_like(t, y1), y1 - t * (y1 - y0)])
        tx, ty = transform_points(ex, ey, grid.crs, dst)
        bbox = (float(tx.min()), float(ty.min()), float(tx.max()), float(ty.max()))
    minx, miny, maxx, maxy = bbox
    ox = math.floor(minx / cell_size) * cell_size
    oy = math.ceil(maxy / cell_size) * cell_size
    w = max(1, int(math.ceil((maxx - ox) / cell_size)))
    h = max(1, int(math.ceil((oy - miny) / cell_size)))
    nodata = grid.nodata if grid.nodata is not None else DEFAULT_NODATA
    template = RasterGrid(ox, oy, cell_size, np.zeros((h, w), dtype=np.uint8), nodata, dst)
    return resample_to(grid, template, method)
