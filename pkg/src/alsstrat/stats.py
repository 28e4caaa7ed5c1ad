"""Per-tile density, ground-elevation spread and return-number tallies,
aggregated by joint (land cover, slope) class."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import StatsError
from .pointcloud import GROUND, PointTile

ORDINALS = ("First", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh")
RETURN_CATEGORIES = (
    "Single", "First", "FirstOfMany", "Second", "Third", "Fourth", "Fifth", "Sixth", "Seventh",
    "Other", "Last", "LastOfMany", "Anomalous",
)
ALL = "All"


@dataclass
class TileStats:
    point_count: int
    area: float
    density: float
    ground_count: int
    ground_std: float | None
    return_counts: dict[str, int]
    tile_id: str = ""

    @property
    def has_ground(self) -> bool:
        return self.ground_count > 0


def return_counts(return_number, number_of_returns) -> dict[str, int]:
    """Tally return categories.

    Malformed points (return number 0 or above the return count) go to
    ``Anomalous`` only. Returns past the seventh go to ``Other``.
    """
    rn = np.asarray(return_number, dtype=np.int64)
    nr = np.asarray(number_of_returns, dtype=np.int64)
    anomalous = (rn < 1) | (rn > nr)
    ok = ~anomalous
    rn, nr = rn[ok], nr[ok]
    out = {
        "Single": int(np.count_nonzero((rn == 1) & (nr == 1))),
        "First": int(np.count_nonzero(rn == 1)),
        "FirstOfMany": int(np.count_nonzero((rn == 1) & (nr > 1))),
    }
    for k, name in enumerate(ORDINALS[1:], start=2):
        out[name] = int(np.count_nonzero(rn == k))
    out["Other"] = int(np.count_nonzero(rn > len(ORDINALS)))
    out["Last"] = int(np.count_nonzero(rn == nr))
    out["LastOfMany"] = int(np.count_nonzero((rn == nr) & (nr > 1)))
    out["Anomalous"] = int(np.count_nonzero(anomalous))
    return {k: out[k] for k in RETURN_CATEGORIES}


def tile_stats(tile: PointTile, tile_id: str = "") -> TileStats:
    area = tile.area
    if not area > 0:
        raise StatsError(f"tile {tile_id or tile.source_id!r} has zero-area bounds {tile.bounds}")
    n = len(tile)
    ground = tile.z[tile.classification == GROUND]
    ground_std = float(np.std(ground)) if ground.size else None
    return TileStats(
        point_count=n,
        area=area,
        density=n / area,
        ground_count=int(ground.size),
        ground_std=ground_std,
        return_counts=return_counts(tile.return_number, tile.number_of_returns),
        tile_id=tile_id,
    )


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    var = math.fsum((v - mean) ** 2 for v in values) / len(values)
    return mean, math.sqrt(var)


@dataclass
class CellStats:
    tiles: int = 0
    points: int = 0
    density_mean: float | None = None
    density_std: float | None = None
    ground_std_mean: float | None = None
    ground_std_std: float | None = None
    ground_excluded: int = 0
    returns: dict[str, int] = field(default_factory=dict)

    @property
    def return_percent(self) -> dict[str, float]:
        if not self.points:
            return {k: 0.0 for k in self.returns}
        return {k: 100.0 * v / self.points for k, v in self.returns.items()}

    def as_dict(self) -> dict:
        return {
            "tiles": self.tiles,
            "points": self.points,
            "density_mean": self.density_mean,
            "density_std": self.density_std,
            "ground_std_mean": self.ground_std_mean,
            "ground_std_std": self.ground_std_std,
            "ground_excluded": self.ground_excluded,
            "returns": dict(self.returns),
            "return_percent": self.return_percent,
        }


def _cell(stats: Sequence[TileStats]) -> CellStats:
    stats = sorted(stats, key=lambda s: s.tile_id)
    dens = [s.density for s in stats]
    gstd = [s.ground_std for s in stats if s.ground_std is not None]
    d_mean, d_std = _mean_std(dens)
    g_mean, g_std = _mean_std(gstd)
    returns = {k: sum(s.return_counts.get(k, 0) for s in stats) for k in RETURN_CATEGORIES}
    return CellStats(
        tiles=len(stats),
        points=sum(s.point_count for s in stats),
        density_mean=d_mean,
        density_std=d_std,
        ground_std_mean=g_mean,
        ground_std_std=g_std,
        ground_excluded=len(stats) - len(gstd),
        returns=returns,
    )


def _name(v) -> str:
    return getattr(v, "name", str(v))


@dataclass
class GroupedStats:
    """Cells keyed by ``(landcover, slope)`` names, including "All" margins."""

    cells: dict[tuple[str, str], CellStats]

    def __getitem__(self, key) -> CellStats:
        lc, sl = key
        return self.cells[(_name(lc), _name(sl))]

    @property
    def landcovers(self) -> list[str]:
        return sorted({k[0] for k in self.cells if k[0] != ALL}) + [ALL]

    @property
    def slopes(self) -> list[str]:
        order = {"Flat": 0, "Sloped": 1, "Steep": 2}
        return sorted({k[1] for k in self.cells if k[1] != ALL}, key=lambda s: (order.get(s, 9), s)) + [ALL]

    def report(self) -> dict:
        """JSON-ready tables: density, ground std, returns per land cover."""

        def table(attr_mean, attr_std):
            out = {}
            for sl in self.slopes:
                row = {}
                for lc in self.landcovers:
                    c = self.cells.get((lc, sl))
                    row[lc] = None if c is None else {"mean": getattr(c, attr_mean), "std": getattr(c, attr_std), "tiles": c.tiles}
                out[sl] = row
            return out

        returns = {}
        for lc in self.landcovers:
            c = self.cells[(lc, ALL)]
            returns[lc] = {k: {"count": c.returns[k], "percent": c.return_percent[k]} for k in RETURN_CATEGORIES}
        return {
            "density_per_m2": table("density_mean", "density_std"),
            "ground_std_m": table("ground_std_mean", "ground_std_std"),
            "returns": returns,
            "cells": {f"{lc}/{sl}": c.as_dict() for (lc, sl), c in sorted(self.cells.items())},
        }


def aggregate(stats: Sequence[TileStats], labels: Sequence) -> GroupedStats:
    """Group tile statistics by joint class; labels are ``(landcover, slope)`` pairs."""
    if len(stats) != len(labels):
        raise StatsError(f"{len(stats)} tile stats but {len(labels)} labels")
    groups: dict[tuple[str, str], list[TileStats]] = {}
    for s, (lc, sl) in zip(stats, labels):
        lc, sl = _name(lc), _name(sl)
        for key in ((lc, sl), (lc, ALL), (ALL, sl), (ALL, ALL)):
            groups.setdefault(key, []).append(s)
    if not groups:
        groups[(ALL, ALL)] = []
    return GroupedStats({k: _cell(v) for k, v in groups.items()})


def subsample_tiles(items: Sequence, fraction: float, seed: int = 0) -> list:
    """Uniform subset of size round(fraction * N) without replacement, in input order."""
    if not 0 < fraction <= 1:
        raise StatsError(f"fraction must be in (0, 1], got {fraction}")
    items = list(items)
    k = int(math.floor(fraction * len(items) + 0.5))
    if k >= len(items):
        return items
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(items), size=k, replace=False))
    return [items[i] for i in idx]


def per_tile_csv(stats: Sequence[TileStats], labels: Sequence | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["tile_id", "landcover", "slope", "point_count", "area_m2", "density_per_m2", "ground_count", "ground_std_m"]
        + list(RETURN_CATEGORIES)
    )
    labels = labels if labels is not None else [("", "")] * len(stats)
    for s, (lc, sl) in zip(stats, labels):
        writer.writerow(
            [s.tile_id, _name(lc), _name(sl), s.point_count, repr(s.area), repr(s.density), s.ground_count,
             "" if s.ground_std is None else repr(s.ground_std)]
            + [s.return_counts[k] for k in RETURN_CATEGORIES]
        )
    return buf.getvalue()
