"""Small synthetic corpora for tests, demos and smoke runs.

Layout written by :func:`make_corpus`::

    {root}/corpus/{project}/boundary.geojson   lon/lat rectangle
    {root}/corpus/{project}/metadata.json      capture year and EPSG
    {root}/corpus/{project}/pointcloud.las
    {root}/rasters/nlcd_{year}.asc (+ .crs)    Level II land-cover codes
    {root}/rasters/dem.asc (+ .crs)            elevations in metres

Each project's northern half is developed and southern half forested;
columns run from flat to steep terrain, so every joint class appears
with different frequencies.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geo import Crs, Polygon, boundary_to_geojson, reproject_boundary
from .pointcloud import PointTile, write_las_file
from .raster import RasterGrid, sample_bilinear, write_ascii_grid

ZONE = 18
X0, Y0 = 501_000.0, 4_401_000.0
CELL = 30.0


def project_extent(k: int, side: float) -> tuple[float, float, float, float]:
    x = X0 + k * (side + 990.0)
    return (x, Y0, x + side, Y0 + side)


def _terrain(x, y, extents):
    """Elevation: per-project column bands of increasing gradient."""
    z = np.full(np.shape(x), 120.0)
    for minx, miny, maxx, maxy in extents:
        inside = (x >= minx - 300) & (x <= maxx + 300) & (y >= miny - 300) & (y <= maxy + 300)
        u = np.clip((x - minx) / (maxx - minx), 0, 1)
        # flat < 5 deg, sloped 5-17 deg, steep > 17 deg
        grad = np.where(u < 0.5, 0.02, np.where(u < 0.75, 0.15, 0.5))
        local = 120.0 + grad * (y - miny)
        z = np.where(inside, local, z)
    return z


def make_rasters(extents, year: int = 2019, seed: int = 0) -> tuple[RasterGrid, RasterGrid]:
    rng = np.random.default_rng(seed)
    minx = min(e[0] for e in extents) - 990
    miny = min(e[1] for e in extents) - 990
    maxx = max(e[2] for e in extents) + 990
    maxy = max(e[3] for e in extents) + 990
    w = int(round((maxx - minx) / CELL))
    h = int(round((maxy - miny) / CELL))
    crs = Crs.utm(ZONE)
    lc = np.full((h, w), 11, dtype=np.int32)
    xs = minx + (np.arange(w) + 0.5) * CELL
    ys = maxy - (np.arange(h) + 0.5) * CELL
    gx, gy = np.meshgrid(xs, ys)
    for ex0, ey0, ex1, ey1 in extents:
        inside = (gx >= ex0 - 300) & (gx <= ex1 + 300) & (gy >= ey0 - 300) & (gy <= ey1 + 300)
        north = gy >= (ey0 + ey1) / 2
        dev = rng.choice([21, 22, 23, 24], size=lc.shape)
        forest = rng.choice([41, 42, 43], size=lc.shape)
        lc = np.where(inside & north, dev, np.where(inside, forest, lc))
    noise = rng.random(lc.shape) < 0.05
    lc = np.where(noise, rng.choice([81, 82, 90], size=lc.shape), lc).astype(np.int32)
    dem = _terrain(gx, gy, extents) + rng.normal(0, 0.05, gx.shape) + 0.001
    nlcd = RasterGrid(minx, maxy, CELL, lc, 0, crs)
    return nlcd, RasterGrid(minx, maxy, CELL, dem.astype(np.float64), -9999.0, crs)


def make_points(extent, dem: RasterGrid, density: float, seed: int, capture_year: int, source_id: str) -> PointTile:
    rng = np.random.default_rng(seed)
    minx, miny, maxx, maxy = extent
    n = int(round(density * (maxx - minx) * (maxy - miny)))
    x = np.round(rng.uniform(minx, maxx, n), 2)
    y = np.round(rng.uniform(miny, maxy, n), 2)
    ground = rng.random(n) < 0.4
    z = sample_bilinear(dem, x, y) + np.where(ground, 0.0, rng.uniform(0.5, 25.0, n))
    nr = rng.integers(1, 6, n)
    rn = np.minimum(rng.integers(1, 6, n), nr)
    cls = np.where(ground, 2, rng.choice([1, 3, 4, 5, 6], n))
    return PointTile(
        x, y, np.round(z, 2),
        classification=cls, return_number=rn, number_of_returns=nr,
        intensity=rng.integers(0, 4096, n),
        gps_time=np.round(np.sort(rng.uniform(0, 1e5, n)), 6),
        bounds=extent, crs=Crs.utm(ZONE), source_id=source_id, capture_year=capture_year,
    )


def make_corpus(root, projects: int = 2, side: float = 3000.0, density: float = 0.01, seed: int = 0,
                capture_years=None) -> dict:
    """Write a corpus and raster set under ``root``; return their paths."""
    root = Path(root)
    extents = [project_extent(k, side) for k in range(projects)]
    years = list(capture_years or [2019 - k for k in range(projects)])
    nlcd, dem = make_rasters(extents, 2019, seed)
    rdir = root / "rasters"
    rdir.mkdir(parents=True, exist_ok=True)
    for name, grid in (("nlcd_2019.asc", nlcd), ("dem.asc", dem)):
        (rdir / name).write_bytes(write_ascii_grid(grid))
        (rdir / f"{name}.crs").write_text(f"{grid.crs}\n")
    cdir = root / "corpus"
    utm = Crs.utm(ZONE)
    for k, ext in enumerate(extents):
        pid = f"proj{k:02d}"
        pdir = cdir / pid
        pdir.mkdir(parents=True, exist_ok=True)
        poly = reproject_boundary(Polygon.from_bbox(*ext), utm, Crs.geographic())
        (pdir / "boundary.geojson").write_text(json.dumps(boundary_to_geojson(poly)) + "\n")
        (pdir / "metadata.json").write_text(json.dumps({"capture_year": years[k], "epsg": utm.epsg}) + "\n")
        tile = make_points(ext, dem, density, seed * 1000 + k, years[k], pid)
        write_las_file(tile, pdir / "pointcloud.las")
    return {"root": root, "corpus": cdir, "rasters": rdir, "extents": extents}
