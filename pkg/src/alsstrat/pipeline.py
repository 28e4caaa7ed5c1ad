"""End-to-end commands: plan, fetch, stats, prep, tile, eval.

Each command reads a resolved config (see :mod:`alsstrat.config`),
writes its outputs under ``cfg["out"]`` with paths relative to that
directory, and returns a :class:`CommandResult`. Outputs carry no
timestamps, so equal configs and seeds reproduce them byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import maeprep, metrics, stats as stats_mod, tiler
from .config import config_hash
from .exceptions import AlsStratError, ConfigError
from .geo import Crs, reproject_boundary, utm_crs_for
from .ingest import RetryPolicy, fetch_many, make_backend
from .pointcloud import read_las, write_las_file
from .raster import (
    LandCoverL1,
    RasterGrid,
    classify_slope,
    crop_to_polygon,
    merge_grid_to_level1,
    parse_raster,
    reproject,
    resample_to,
    slope_degrees,
)
from .sampler import (
    build_manifest,
    derive_seed,
    inverse_probability_sample,
    label_patches_with_report,
    read_manifest,
    select_nlcd_year,
)

log = logging.getLogger(__name__)

RASTER_SUFFIXES = (".asc", ".tif", ".tiff")
TILE_INDEX = "index.jsonl"


@dataclass
class CommandResult:
    command: str
    ok: int = 0
    failed: int = 0
    errors: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)

    def fail(self, where: str, exc: BaseException | str) -> None:
        msg = f"{where}: {exc if isinstance(exc, str) else f'{type(exc).__name__}: {exc}'}"
        log.error(msg)
        self.errors.append(msg)
        self.failed += 1

    @property
    def exit_code(self) -> int:
        if not self.failed:
            return 0
        return 2 if self.ok else 1


class RunLog:
    """Deterministic JSONL event log; every line carries the config hash."""

    def __init__(self, cfg: dict, command: str):
        self.command = command
        self.hash = config_hash(cfg)
        self.events: list[dict] = []
        self.event("start", seed=cfg["seed"])

    def event(self, kind: str, **fields) -> None:
        rec = {"command": self.command, "event": kind, "config_hash": self.hash}
        rec.update(fields)
        self.events.append(rec)

    def write(self, out: Path) -> Path:
        path = out / "logs" / f"{self.command}.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events), encoding="utf-8")
        return path


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _backend(cfg: dict):
    b = cfg["backend"]
    if not b["source"]:
        raise ConfigError("backend.source is not set (corpus directory or base URL)")
    retry = RetryPolicy(b["max_attempts"], b["base_delay"], b["backoff_factor"])
    kwargs = {"retry": retry}
    if b["cache"]:
        kwargs["cache_dir"] = b["cache"]
    return make_backend(b["source"], **kwargs)


# -- rasters -----------------------------------------------------------------


def _raster_crs(path: Path) -> Crs | None:
    side = path.with_name(path.name + ".crs")
    if side.exists():
        return Crs.from_epsg(side.read_text().strip())
    return None


def load_raster(path: Path) -> RasterGrid:
    grid = parse_raster(path.read_bytes(), _raster_crs(path))
    if grid.crs is None:
        raise ConfigError(f"{path}: no CRS (add a '{path.name}.crs' sidecar such as 'EPSG:32618')")
    return grid


def find_rasters(rdir: Path) -> tuple[dict[int, Path], Path]:
    """``({year: nlcd path}, dem path)`` from ``nlcd_{year}.*`` and ``dem.*``."""
    if not rdir.is_dir():
        raise ConfigError(f"raster directory {rdir} does not exist")
    nlcd: dict[int, Path] = {}
    dem = None
    for p in sorted(rdir.iterdir()):
        if p.suffix.lower() not in RASTER_SUFFIXES:
            continue
        stem = p.stem.lower()
        if stem.startswith("nlcd_") and stem[5:].isdigit():
            nlcd.setdefault(int(stem[5:]), p)
        elif stem == "dem" and dem is None:
            dem = p
    if not nlcd:
        raise ConfigError(f"no nlcd_<year> rasters in {rdir}")
    if dem is None:
        raise ConfigError(f"no dem raster in {rdir}")
    return nlcd, dem


# -- plan --------------------------------------------------------------------


def plan(cfg: dict) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("plan")
    rl = RunLog(cfg, "plan")
    p = cfg["plan"]
    if not p["rasters"]:
        raise ConfigError("plan.rasters is not set")
    nlcd_paths, dem_path = find_rasters(Path(p["rasters"]))
    years = sorted(set(nlcd_paths) & set(p["nlcd_years"])) or sorted(nlcd_paths)
    dem = load_raster(dem_path)
    allowed = [LandCoverL1[name] for name in p["allowed_landcover"]]
    backend = _backend(cfg)
    projects = backend.list_projects()
    for w in backend.warnings:
        rl.event("warning", message=w)
    res.failed += len(backend.warnings)
    res.errors.extend(backend.warnings)
    nlcd_cache: dict[int, RasterGrid] = {}
    selected, reports, urls = {}, {}, {}
    for proj in projects:
        pid = proj.project_id
        try:
            year = proj.capture_year or p["capture_year"]
            if not year:
                raise ConfigError("no capture year in metadata and no plan.capture_year override")
            ny = select_nlcd_year(year, years)
            if ny not in nlcd_cache:
                nlcd_cache[ny] = merge_grid_to_level1(load_raster(nlcd_paths[ny]))
            utm = Crs.from_epsg(proj.epsg) if proj.epsg else utm_crs_for(proj.boundary)
            poly = reproject_boundary(proj.boundary, Crs.geographic(), utm)
            lc = nlcd_cache[ny]
            if lc.crs != utm:
                lc = reproject(lc, utm, lc.cell_size if lc.crs.is_metric else 30.0, "nearest", poly.bbox)
            lc = crop_to_polygon(lc, poly)
            slope_cls = classify_slope(slope_degrees(resample_to(dem, lc, "bilinear")), tuple(p["slope_thresholds"]))
            labels, rep = label_patches_with_report(
                lc, slope_cls, poly, p["patch_size"], pid, ny, p["max_nodata_fraction"]
            )
            sel = inverse_probability_sample(
                labels, n=p["cap"], seed=derive_seed(cfg["seed"], pid), allowed_landcover=allowed, method=p["method"]
            )
        except AlsStratError as exc:
            res.fail(f"project {pid}", exc)
            rl.event("project_failed", project_id=pid, error=str(exc))
            continue
        selected[pid] = sel
        urls[pid] = proj.source_url
        rep = dict(rep, selected=len(sel), nlcd_year=ny, epsg=utm.epsg)
        reports[pid] = rep
        res.ok += 1
        rl.event("project", project_id=pid, **rep)
        if not sel:
            msg = f"project {pid}: no candidate patches after the land-cover filter"
            log.warning(msg)
            rl.event("warning", message=msg)

    manifest = build_manifest(selected, p["cap"], urls, cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.jsonl").write_bytes(manifest.to_jsonl())
    summary = manifest.summary()
    summary["projects_report"] = reports
    summary["config_hash"] = rl.hash
    _dump(out / "plan_summary.json", summary)
    res.summary = summary
    res.outputs = ["manifest.jsonl", "plan_summary.json"]
    rl.event("end", entries=len(manifest), ok=res.ok, failed=res.failed)
    rl.write(out)
    return res


def format_counts(summary: dict) -> str:
    """Slope rows by land-cover columns, as a plain-text table."""
    table = summary["counts"]
    cols = list(next(iter(table.values())).keys())
    lines = ["slope      " + "".join(f"{c:>11}" for c in cols)]
    for row, vals in table.items():
        lines.append(f"{row:<11}" + "".join(f"{vals[c]:>11}" for c in cols))
    return "\n".join(lines)


# -- fetch -------------------------------------------------------------------


def _num(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def tile_id_for(entry) -> str:
    return f"{entry.project_id}_{_num(entry.minx)}_{_num(entry.miny)}"


def fetch(cfg: dict, manifest_path: str | Path | None = None) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("fetch")
    rl = RunLog(cfg, "fetch")
    mpath = Path(manifest_path) if manifest_path else out / "manifest.jsonl"
    if not mpath.exists():
        raise ConfigError(f"manifest {mpath} not found; run 'plan' first or pass --manifest")
    manifest = read_manifest(mpath.read_bytes())
    backend = _backend(cfg)
    outcomes = fetch_many(backend, manifest.entries, cfg["workers"])
    tdir = out / "tiles"
    rows = []
    downloads = 0
    for o in outcomes:
        tid = tile_id_for(o.entry)
        if not o.ok:
            res.fail(f"tile {tid}", o.error)
            rl.event("tile_failed", tile_id=tid, error=o.error)
            continue
        rel = f"tiles/{o.entry.project_id}/{tid}.las"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_las_file(o.tile, out / rel)
        downloads += 0 if o.cache_hit else 1
        res.ok += 1
        rows.append({
            "tile_id": tid, "project_id": o.entry.project_id, "path": f"{o.entry.project_id}/{tid}.las",
            "landcover": o.entry.landcover, "slope": o.entry.slope, "bbox": list(o.entry.bbox),
            "points": len(o.tile),
        })
        rl.event("tile", tile_id=tid, points=len(o.tile))
    tdir.mkdir(parents=True, exist_ok=True)
    (tdir / TILE_INDEX).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    res.summary = {"entries": len(outcomes), "fetched": res.ok, "failed": res.failed, "downloads": downloads,
                   "cache_hits": res.ok - downloads, "retries": len(backend.retries), "failures": res.errors}
    # downloads/cache hits differ between first and repeated runs, so keep them out of the log
    rl.event("end", fetched=res.ok, failed=res.failed)
    _dump(out / "fetch_summary.json", {k: v for k, v in res.summary.items() if k not in ("downloads", "cache_hits", "retries")})
    res.outputs = ["tiles/index.jsonl", "fetch_summary.json"]
    rl.write(out)
    return res


# -- tile store ----------------------------------------------------------------


def read_tile_index(tiles_dir: Path) -> list[dict]:
    """Rows of ``index.jsonl``; without one, every ``*.las`` below the directory (id = file stem)."""
    idx = tiles_dir / TILE_INDEX
    if idx.exists():
        rows = [json.loads(line) for line in idx.read_text(encoding="utf-8").splitlines() if line.strip()]
    else:
        if not tiles_dir.is_dir():
            raise ConfigError(f"tile directory {tiles_dir} does not exist")
        rows = [
            {"tile_id": p.stem, "path": str(p.relative_to(tiles_dir)), "landcover": "", "slope": ""}
            for p in sorted(tiles_dir.rglob("*.las"))
        ]
    return sorted(rows, key=lambda r: r["tile_id"])


# -- stats -------------------------------------------------------------------


def stats(cfg: dict, tiles_dir: str | Path | None = None) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("stats")
    rl = RunLog(cfg, "stats")
    tdir = Path(tiles_dir) if tiles_dir else out / "tiles"
    rows = read_tile_index(tdir)
    rows = stats_mod.subsample_tiles(rows, cfg["stats"]["subsample"], cfg["seed"])

    def one(row):
        try:
            return stats_mod.tile_stats(read_las(tdir / row["path"]), row["tile_id"]), None
        except (AlsStratError, OSError) as exc:
            return None, exc

    per, labels = [], []
    for row, (st, err) in zip(rows, _pmap(one, rows, cfg["workers"])):
        if err is not None:
            res.fail(f"tile {row['tile_id']}", err)
            continue
        per.append(st)
        labels.append((row.get("landcover") or "Unlabelled", row.get("slope") or "Unlabelled"))
        res.ok += 1
    grouped = stats_mod.aggregate(per, labels)
    report = grouped.report()
    report["tiles"] = len(per)
    _dump(out / "stats_report.json", report)
    (out / "stats_tiles.csv").write_text(stats_mod.per_tile_csv(per, labels), encoding="utf-8")
    res.summary = {"tiles": len(per), "failed": res.failed, "all": grouped[("All", "All")].as_dict()}
    rl.event("end", tiles=len(per), failed=res.failed)
    rl.write(out)
    res.outputs = ["stats_report.json", "stats_tiles.csv"]
    return res


# -- prep --------------------------------------------------------------------


def prep_config(cfg: dict) -> maeprep.PrepConfig:
    p = cfg["prep"]
    return maeprep.PrepConfig(
        crop_size=p["crop_size"],
        voxel=maeprep.VoxelSpec(p["voxel_size"], p["max_voxels"], p["max_points_per_voxel"]),
        bev=maeprep.BevSpec(tuple(p["bev_cell"]), p["max_cells"], p["max_points_per_cell"]),
        mask_ratio=p["mask_ratio"],
        scale_range=tuple(p["scale_range"]),
        max_shift=tuple(p["max_shift"]),
        augment=p["augment"],
    )


def prep(cfg: dict, tiles_dir: str | Path | None = None) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("prep")
    rl = RunLog(cfg, "prep")
    tdir = Path(tiles_dir) if tiles_dir else out / "tiles"
    pc = prep_config(cfg)
    sdir = out / "samples"
    jobs = [(row, k) for row in read_tile_index(tdir) for k in range(cfg["prep"]["samples_per_tile"])]

    def one(job):
        row, k = job
        sid = f"{row['tile_id']}_{k}"
        try:
            tile = read_las(tdir / row["path"])
            seed = derive_seed(cfg["seed"], sid)
            sample, _ = maeprep.prepare_sample(tile, pc, seed)
            return maeprep.write_sample(sample, sdir, sid, {"source_tile": row["tile_id"]}), None
        except (AlsStratError, OSError) as exc:
            return sid, exc

    index = []
    for (row, k), (val, err) in zip(jobs, _pmap(one, jobs, cfg["workers"])):
        if err is not None:
            res.fail(f"sample {val}", err)
            continue
        index.append(val)
        res.ok += 1
    sdir.mkdir(parents=True, exist_ok=True)
    (sdir / "MANIFEST.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in index), encoding="utf-8")
    res.summary = {"samples": res.ok, "failed": res.failed, "spec": pc.as_dict()}
    rl.event("end", samples=res.ok, failed=res.failed)
    rl.write(out)
    res.outputs = ["samples/MANIFEST.jsonl"]
    return res


# -- tile --------------------------------------------------------------------


def _read_parent_labels(path: str) -> dict[str, str]:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if not reader.fieldnames or not {"parent_id", "label"} <= set(reader.fieldnames):
        raise ConfigError(f"{path}: expected a 'parent_id,label' header")
    return {r["parent_id"]: r["label"] for r in reader}


def tile(cfg: dict, tiles_dir: str | Path | None = None) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("tile")
    rl = RunLog(cfg, "tile")
    t = cfg["tile"]
    spec = tiler.WindowSpec(t["window"], t["stride"], t["flush"])
    tdir = Path(tiles_dir) if tiles_dir else out / "tiles"
    rows = read_tile_index(tdir)
    if not rows:
        raise ConfigError(f"no tiles found in {tdir}")
    labels = _read_parent_labels(t["labels"])
    assignment = tiler.split([r["tile_id"] for r in rows], tuple(t["split"]), cfg["seed"])
    wdir = out / "windows"

    def one(row):
        pid = row["tile_id"]
        try:
            parts = tiler.cut(read_las(tdir / row["path"]), spec)
            return tiler.write_windows(parts, wdir, assignment[pid], pid, labels.get(pid)), None
        except (AlsStratError, OSError) as exc:
            return None, exc

    index = []
    for row, (val, err) in zip(rows, _pmap(one, rows, cfg["workers"])):
        if err is not None:
            res.fail(f"parent {row['tile_id']}", err)
            continue
        index.extend(val)
        res.ok += 1
    wdir.mkdir(parents=True, exist_ok=True)
    (wdir / "index.jsonl").write_bytes(tiler.index_jsonl(index))
    _dump(wdir / "split.json", {"fractions": list(assignment.fractions), "seed": assignment.seed,
                                "assignment": assignment.assignment})
    per_split = {s: sum(1 for r in index if r["split"] == s) for s in tiler.SPLIT_NAMES}
    res.summary = {"parents": res.ok, "windows": len(index), "windows_per_split": per_split,
                   "parents_per_split": dict(zip(tiler.SPLIT_NAMES, assignment.sizes())),
                   "empty_windows": sum(1 for r in index if r["empty"])}
    rl.event("end", **{k: v for k, v in res.summary.items()})
    rl.write(out)
    res.outputs = ["windows/index.jsonl", "windows/split.json"]
    return res


# -- eval --------------------------------------------------------------------


def evaluate(cfg: dict, pred_path: str | Path, truth_path: str | Path) -> CommandResult:
    out = Path(cfg["out"])
    res = CommandResult("eval")
    rl = RunLog(cfg, "eval")
    e = cfg["eval"]
    pred, truth = metrics.pair_labels(metrics.read_labels(pred_path), metrics.read_labels(truth_path))
    n = e["num_classes"] or int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    counts = metrics.accumulate(pred, truth, n)
    rep = metrics.report(counts, e["class_names"] or None, e["strict"])
    _dump(out / "eval_report.json", rep)
    res.ok = 1
    res.summary = {"miou": rep["miou"], "oa": rep["oa"], "miou_percent": rep["miou_percent"],
                   "oa_percent": rep["oa_percent"], "undefined_classes": rep["undefined_classes"]}
    rl.event("end", **res.summary)
    rl.write(out)
    res.outputs = ["eval_report.json"]
    return res
