"""LAS 1.2-1.4 point clouds (formats 0, 1, 6): parsing, writing, cropping.

Points are held column-wise in numpy arrays. Tile metadata that LAS has no
slot for (crop bounds, CRS tag, project id, capture year) travels in a
private VLR which other readers simply skip.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from .exceptions import LasError, LazNotSupportedError
from .geo import Crs

GROUND = 2
_VLR_USER = b"alsstrat"
_VLR_RECORD = 4711

# per-point flag bits
SYNTHETIC, KEYPOINT, WITHHELD, OVERLAP, SCAN_DIRECTION, EDGE_OF_FLIGHT_LINE = (1 << k for k in range(6))

_HEADER_12 = 227
_HEADER_14 = 375
_VLR_HEADER = 54

_FORMATS = {
    0: np.dtype(
        [("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"), ("bits", "u1"), ("cls", "u1"),
         ("scan_angle", "i1"), ("user_data", "u1"), ("psid", "<u2")]
    ),
    1: np.dtype(
        [("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"), ("bits", "u1"), ("cls", "u1"),
         ("scan_angle", "i1"), ("user_data", "u1"), ("psid", "<u2"), ("gps_time", "<f8")]
    ),
    6: np.dtype(
        [("X", "<i4"), ("Y", "<i4"), ("Z", "<i4"), ("intensity", "<u2"), ("ret", "u1"), ("flags", "u1"),
         ("cls", "u1"), ("user_data", "u1"), ("scan_angle", "<i2"), ("psid", "<u2"), ("gps_time", "<f8")]
    ),
}
SUPPORTED_FORMATS = tuple(_FORMATS)

_ATTRS = {
    "classification": np.uint8,
    "return_number": np.uint8,
    "number_of_returns": np.uint8,
    "intensity": np.uint16,
    "flags": np.uint8,
    "scanner_channel": np.uint8,
    "user_data": np.uint8,
    "point_source_id": np.uint16,
}


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    z: float
    classification: int = 1
    return_number: int = 1
    number_of_returns: int = 1
    intensity: int | None = None


@dataclass(eq=False)
class PointTile:
    """A column-oriented collection of returns with closed ``bounds``."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    classification: np.ndarray | None = None
    return_number: np.ndarray | None = None
    number_of_returns: np.ndarray | None = None
    intensity: np.ndarray | None = None
    flags: np.ndarray | None = None
    scanner_channel: np.ndarray | None = None
    user_data: np.ndarray | None = None
    point_source_id: np.ndarray | None = None
    scan_angle: np.ndarray | None = None
    gps_time: np.ndarray | None = None
    bounds: tuple[float, float, float, float] | None = None
    crs: Crs | None = None
    source_id: str = ""
    capture_year: int | None = None
    scale: tuple[float, float, float] = (0.001, 0.001, 0.001)
    offset: tuple[float, float, float] | None = None
    point_format: int = 6

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.z = np.asarray(self.z, dtype=np.float64).ravel()
        n = self.x.size
        if self.y.size != n or self.z.size != n:
            raise ValueError("x, y, z must have equal length")
        defaults = {"classification": 1, "return_number": 1, "number_of_returns": 1}
        for name, dtype in _ATTRS.items():
            val = getattr(self, name)
            if val is None:
                val = np.full(n, defaults.get(name, 0), dtype=dtype)
            else:
                val = np.asarray(val).astype(dtype, copy=False).ravel()
                if val.size != n:
                    raise ValueError(f"{name} has {val.size} values for {n} points")
            setattr(self, name, val)
        self.scan_angle = np.zeros(n) if self.scan_angle is None else np.asarray(self.scan_angle, dtype=np.float64).ravel()
        self.gps_time = np.zeros(n) if self.gps_time is None else np.asarray(self.gps_time, dtype=np.float64).ravel()
        if self.bounds is None:
            if n == 0:
                raise ValueError("an empty tile needs explicit bounds")
            self.bounds = (float(self.x.min()), float(self.y.min()), float(self.x.max()), float(self.y.max()))
        self.bounds = tuple(float(v) for v in self.bounds)
        if self.bounds[0] > self.bounds[2] or self.bounds[1] > self.bounds[3]:
            raise ValueError(f"bounds not well ordered: {self.bounds}")
        if self.point_format not in _FORMATS:
            raise LasError(f"unsupported point data record format {self.point_format}")

    def __len__(self):
        return self.x.size

    @property
    def xyz(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.z])

    @property
    def area(self) -> float:
        minx, miny, maxx, maxy = self.bounds
        return (maxx - minx) * (maxy - miny)

    def __getitem__(self, i) -> PointRecord:
        return PointRecord(
            float(self.x[i]), float(self.y[i]), float(self.z[i]),
            int(self.classification[i]), int(self.return_number[i]), int(self.number_of_returns[i]),
            int(self.intensity[i]),
        )

    def records(self) -> Iterator[PointRecord]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_records(cls, records: Sequence[PointRecord], **kwargs) -> "PointTile":
        recs = list(records)
        cols = {
            "x": [r.x for r in recs],
            "y": [r.y for r in recs],
            "z": [r.z for r in recs],
            "classification": [r.classification for r in recs],
            "return_number": [r.return_number for r in recs],
            "number_of_returns": [r.number_of_returns for r in recs],
            "intensity": [r.intensity or 0 for r in recs],
        }
        return cls(**cols, **kwargs)

    def _columns(self) -> dict:
        cols = {name: getattr(self, name) for name in _ATTRS}
        cols.update(x=self.x, y=self.y, z=self.z, scan_angle=self.scan_angle, gps_time=self.gps_time)
        return cols

    def subset(self, index, bounds=None) -> "PointTile":
        cols = {k: v[index] for k, v in self._columns().items()}
        return replace(self, **cols, bounds=self.bounds if bounds is None else bounds)

    def with_xyz(self, x, y, z, bounds) -> "PointTile":
        return replace(self, x=x, y=y, z=z, bounds=bounds, offset=None)

    def within_bounds(self) -> bool:
        minx, miny, maxx, maxy = self.bounds
        return bool(np.all((self.x >= minx) & (self.x <= maxx) & (self.y >= miny) & (self.y <= maxy)))


def crop(tile: PointTile, bbox, inclusive_max: tuple[bool, bool] = (False, False)) -> PointTile:
    """Points with ``minx <= x < maxx`` and ``miny <= y < maxy``.

    ``inclusive_max`` closes the upper edge per axis, used when a crop
    window is flush with the parent tile's own upper edge.
    """
    minx, miny, maxx, maxy = (float(v) for v in bbox)
    mx = tile.x <= maxx if inclusive_max[0] else tile.x < maxx
    my = tile.y <= maxy if inclusive_max[1] else tile.y < maxy
    mask = (tile.x >= minx) & mx & (tile.y >= miny) & my
    return tile.subset(mask, bounds=(minx, miny, maxx, maxy))


# -- reading ----------------------------------------------------------------


def _point_dtype(fmt: int, record_length: int) -> np.dtype:
    base = _FORMATS[fmt]
    if record_length < base.itemsize:
        raise LasError(f"record length {record_length} too short for format {fmt} ({base.itemsize} bytes)", 105)
    return np.dtype({
        "names": list(base.names),
        "formats": [base.fields[k][0] for k in base.names],
        "offsets": [base.fields[k][1] for k in base.names],
        "itemsize": record_length,
    })


def parse_las(data: bytes) -> PointTile:
    """Decode an uncompressed LAS byte string into a :class:`PointTile`."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != b"LASF":
        raise LasError("bad file signature, expected 'LASF'", 0)
    if len(data) < _HEADER_12:
        raise LasError(f"truncated header: {len(data)} bytes", len(data))
    major, minor = data[24], data[25]
    if major != 1 or minor not in (2, 3, 4):
        raise LasError(f"unsupported LAS version {major}.{minor}", 24)
    header_size, point_offset, n_vlr = struct.unpack_from("<HII", data, 94)
    fmt_byte, record_length, legacy_count = struct.unpack_from("<BHI", data, 104)
    if fmt_byte & 0xC0:
        raise LazNotSupportedError(
            "compressed (LAZ) point data; decompress first or register a decompression hook", 104
        )
    fmt = fmt_byte & 0x3F
    if fmt not in _FORMATS:
        raise LasError(f"unsupported point data record format {fmt}", 104)
    if fmt == 6 and minor < 4:
        raise LasError("point format 6 requires LAS 1.4", 104)
    if header_size < _HEADER_12 or point_offset < header_size:
        raise LasError(f"inconsistent header size {header_size} / point offset {point_offset}", 94)
    if len(data) < header_size:
        raise LasError(f"truncated header: {len(data)} < {header_size} bytes", len(data))
    scale = struct.unpack_from("<3d", data, 131)
    offset = struct.unpack_from("<3d", data, 155)
    maxx, minx, maxy, miny, _maxz, _minz = struct.unpack_from("<6d", data, 179)

    count = legacy_count
    evlr_start = 0
    if minor >= 4:
        if header_size < _HEADER_14:
            raise LasError(f"LAS 1.4 header too short ({header_size} bytes)", 94)
        (evlr_start,) = struct.unpack_from("<Q", data, 235)
        (count64,) = struct.unpack_from("<Q", data, 247)
        if legacy_count and count64 and legacy_count != count64:
            raise LasError(f"point count mismatch: legacy {legacy_count} vs {count64}", 107)
        count = count64 or legacy_count

    meta = _read_vlrs(data, header_size, point_offset, n_vlr)
    dtype = _point_dtype(fmt, record_length)
    end = point_offset + count * record_length
    if len(data) < end:
        have = (len(data) - point_offset) // record_length if len(data) > point_offset else 0
        raise LasError(
            f"truncated point records: header declares {count}, payload holds {have}",
            point_offset + have * record_length,
        )
    limit = evlr_start if evlr_start else len(data)
    if limit - point_offset != count * record_length:
        extra = (limit - point_offset) - count * record_length
        raise LasError(f"point count mismatch: {extra} bytes beyond the {count} declared records", end)

    rec = np.frombuffer(data, dtype=dtype, count=count, offset=point_offset)
    sx, sy, sz = scale
    ox, oy, oz = offset
    x = rec["X"] * sx + ox
    y = rec["Y"] * sy + oy
    z = rec["Z"] * sz + oz
    if fmt == 6:
        rn = rec["ret"] & 0x0F
        nr = rec["ret"] >> 4
        raw_flags = rec["flags"]
        flags = (raw_flags & 0x0F) | (((raw_flags >> 6) & 1) << 4) | (((raw_flags >> 7) & 1) << 5)
        channel = (raw_flags >> 4) & 0x03
        cls = rec["cls"]
        angle = rec["scan_angle"] * 0.006
    else:
        bits = rec["bits"]
        rn = bits & 0x07
        nr = (bits >> 3) & 0x07
        flags = ((rec["cls"] >> 5) & 0x07) | (((bits >> 6) & 1) << 4) | (((bits >> 7) & 1) << 5)
        channel = np.zeros(count, dtype=np.uint8)
        cls = rec["cls"] & 0x1F
        angle = rec["scan_angle"].astype(np.float64)
    gps = rec["gps_time"] if "gps_time" in rec.dtype.names else None

    bounds = meta.get("bounds")
    if bounds is None:
        bounds = (minx, miny, maxx, maxy) if count else (0.0, 0.0, 0.0, 0.0)
    if count:
        bounds = (
            min(bounds[0], float(x.min())), min(bounds[1], float(y.min())),
            max(bounds[2], float(x.max())), max(bounds[3], float(y.max())),
        )
    crs = Crs.from_epsg(meta["epsg"]) if meta.get("epsg") else None
    return PointTile(
        x, y, z,
        classification=cls, return_number=rn, number_of_returns=nr,
        intensity=rec["intensity"], flags=flags, scanner_channel=channel,
        user_data=rec["user_data"], point_source_id=rec["psid"],
        scan_angle=angle, gps_time=gps,
        bounds=bounds, crs=crs, source_id=meta.get("source_id", ""),
        capture_year=meta.get("capture_year"),
        scale=tuple(scale), offset=tuple(offset), point_format=fmt,
    )


def _read_vlrs(data: bytes, start: int, point_offset: int, n_vlr: int) -> dict:
    pos = start
    meta: dict = {}
    for _ in range(n_vlr):
        if pos + _VLR_HEADER > point_offset:
            raise LasError("VLR header runs past the point data offset", pos)
        user_id = data[pos + 2 : pos + 18].rstrip(b"\x00")
        record_id, length = struct.unpack_from("<HH", data, pos + 18)
        body = data[pos + _VLR_HEADER : pos + _VLR_HEADER + length]
        if len(body) < length:
            raise LasError("truncated VLR payload", pos + _VLR_HEADER)
        if user_id == _VLR_USER and record_id == _VLR_RECORD:
            try:
                meta = json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                meta = {}
        pos += _VLR_HEADER + length
    return meta


# -- writing ----------------------------------------------------------------


def _quantize(values: np.ndarray, scale: float, offset: float, axis: str) -> np.ndarray:
    q = np.round((values - offset) / scale)
    if q.size and (q.min() < -(2**31) or q.max() > 2**31 - 1):
        raise LasError(f"{axis} coordinates overflow int32 with scale {scale} and offset {offset}")
    return q.astype(np.int32)


def _auto_offset(tile: PointTile) -> tuple[float, float, float]:
    return tuple(float(math.floor(v.min())) if v.size else 0.0 for v in (tile.x, tile.y, tile.z))


def _max(a) -> int:
    return int(a.max()) if a.size else 0


def write_las(tile: PointTile, point_format: int | None = None) -> bytes:
    """Encode a tile as LAS 1.2 (formats 0/1) or LAS 1.4 (format 6)."""
    n = len(tile)
    fmt = tile.point_format if point_format is None else point_format
    if fmt not in _FORMATS:
        raise LasError(f"unsupported point data record format {fmt}")
    scale = tuple(float(s) for s in tile.scale)
    if any(s <= 0 for s in scale):
        raise LasError(f"scale factors must be positive: {scale}")
    offset = tile.offset if tile.offset is not None else _auto_offset(tile)
    X = _quantize(tile.x, scale[0], offset[0], "x")
    Y = _quantize(tile.y, scale[1], offset[1], "y")
    Z = _quantize(tile.z, scale[2], offset[2], "z")

    dtype = _FORMATS[fmt]
    rec = np.zeros(n, dtype=dtype)
    rec["X"], rec["Y"], rec["Z"] = X, Y, Z
    rec["intensity"] = tile.intensity
    rec["user_data"] = tile.user_data
    rec["psid"] = tile.point_source_id
    rn = tile.return_number.astype(np.int64)
    nr = tile.number_of_returns.astype(np.int64)
    flags = tile.flags.astype(np.int64)
    if fmt == 6:
        if _max(rn) > 15 or _max(nr) > 15:
            raise LasError("return fields exceed 4 bits")
        rec["ret"] = rn | (nr << 4)
        rec["flags"] = (flags & 0x0F) | ((tile.scanner_channel.astype(np.int64) & 3) << 4) | (((flags >> 4) & 1) << 6) | (((flags >> 5) & 1) << 7)
        rec["cls"] = tile.classification
        angle = np.round(tile.scan_angle / 0.006)
        if angle.size and (angle.min() < -32768 or angle.max() > 32767):
            raise LasError("scan angle out of range for format 6")
        rec["scan_angle"] = angle.astype(np.int16)
    else:
        if _max(rn) > 7 or _max(nr) > 7:
            raise LasError("return fields exceed 3 bits; use point format 6")
        if _max(tile.classification) > 31:
            raise LasError("classification > 31 needs point format 6")
        rec["bits"] = rn | (nr << 3) | (((flags >> 4) & 1) << 6) | (((flags >> 5) & 1) << 7)
        rec["cls"] = tile.classification.astype(np.int64) | ((flags & 0x07) << 5)
        angle = np.round(tile.scan_angle)
        if angle.size and (angle.min() < -128 or angle.max() > 127):
            raise LasError("scan angle rank out of range")
        rec["scan_angle"] = angle.astype(np.int8)
    if "gps_time" in dtype.names:
        rec["gps_time"] = tile.gps_time

    meta = {"bounds": list(tile.bounds), "source_id": tile.source_id}
    if tile.crs is not None:
        meta["epsg"] = tile.crs.epsg
    if tile.capture_year is not None:
        meta["capture_year"] = int(tile.capture_year)
    body = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    vlr = (
        struct.pack("<H16sHH32s", 0, _VLR_USER, _VLR_RECORD, len(body), b"alsstrat tile metadata")
        + body
    )

    minor = 4 if fmt == 6 else 2
    header_size = _HEADER_14 if minor == 4 else _HEADER_12
    point_offset = header_size + len(vlr)
    xs = X * scale[0] + offset[0]
    ys = Y * scale[1] + offset[1]
    zs = Z * scale[2] + offset[2]
    by_return = np.bincount(np.clip(rn, 0, 15), minlength=16)[1:]

    h = bytearray(header_size)
    h[0:4] = b"LASF"
    struct.pack_into("<HH", h, 4, 0, 0)
    h[24], h[25] = 1, minor
    h[26:58] = b"alsstrat".ljust(32, b"\x00")
    h[58:90] = b"alsstrat".ljust(32, b"\x00")
    struct.pack_into("<HH", h, 90, 0, 0)
    struct.pack_into("<HII", h, 94, header_size, point_offset, 1)
    legacy = n if (fmt < 6 and n < 2**32) else 0
    struct.pack_into("<BHI", h, 104, fmt, dtype.itemsize, legacy)
    legacy_by_return = by_return[:5] if legacy else np.zeros(5, dtype=np.int64)
    struct.pack_into("<5I", h, 111, *[int(v) for v in legacy_by_return])
    struct.pack_into("<3d", h, 131, *scale)
    struct.pack_into("<3d", h, 155, *offset)
    if n:
        extent = (xs.max(), xs.min(), ys.max(), ys.min(), zs.max(), zs.min())
    else:
        extent = (0.0,) * 6
    struct.pack_into("<6d", h, 179, *(float(v) for v in extent))
    if minor == 4:
        struct.pack_into("<QQIQ", h, 227, 0, 0, 0, n)
        struct.pack_into("<15Q", h, 255, *[int(v) for v in by_return])
    return bytes(h) + vlr + rec.tobytes()


def read_las(path) -> PointTile:
    with open(path, "rb") as fh:
        return parse_las(fh.read())


def write_las_file(tile: PointTile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(write_las(tile))
