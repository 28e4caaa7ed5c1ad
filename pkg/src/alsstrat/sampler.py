"""Joint land-cover/slope patch labelling and inverse-probability tile selection."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ManifestError, RasterError, SamplingError
from .raster import CLASS_NODATA, LandCoverL1, RasterGrid, SlopeClass

NLCD_YEARS = (2001, 2004, 2006, 2008, 2011, 2013, 2016, 2019, 2021)
DEFAULT_PATCH_SIZE = 500.0
DEFAULT_CAP = 40
DEFAULT_ALLOWED = frozenset({LandCoverL1.Developed, LandCoverL1.Forest})
MANIFEST_KEYS = ("project_id", "epsg", "minx", "miny", "maxx", "maxy", "landcover", "slope", "nlcd_year", "source_url")


@dataclass(frozen=True)
class PatchLabel:
    bbox: tuple[float, float, float, float]
    landcover: LandCoverL1
    slope: SlopeClass
    project_id: str = ""
    nlcd_year: int | None = None
    epsg: int | None = None
    row: int = -1
    col: int = -1

    @property
    def joint_key(self) -> tuple[LandCoverL1, SlopeClass]:
        return (self.landcover, self.slope)


@dataclass
class JointDistribution:
    counts: dict = field(default_factory=dict)
    total: int = 0

    def p(self, key) -> float:
        return self.counts.get(key, 0) / self.total if self.total else 0.0

    def probabilities(self) -> dict:
        return {k: v / self.total for k, v in self.counts.items()}

    def restricted(self, landcovers: Iterable[LandCoverL1]) -> "JointDistribution":
        keep = set(landcovers)
        counts = {k: v for k, v in self.counts.items() if k[0] in keep}
        return JointDistribution(counts, sum(counts.values()))


def select_nlcd_year(capture_year: int, available: Sequence[int] = NLCD_YEARS) -> int:
    """Exact match, else the nearest available year; ties go to the later year."""
    years = sorted(set(int(y) for y in available))
    if not years:
        raise ValueError("no land-cover years available")
    return min(years, key=lambda y: (abs(y - capture_year), -y))


def _modal(index: np.ndarray, classes: np.ndarray, n_groups: int, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-group mode with ties resolved to the lowest class code."""
    hist = np.bincount(index * n_classes + classes, minlength=n_groups * n_classes).reshape(n_groups, n_classes)
    # argmax returns the first maximum, i.e. the lowest class code
    return hist.argmax(axis=1), hist.sum(axis=1)


def label_patches_with_report(
    landcover: RasterGrid,
    slopecls: RasterGrid,
    poly=None,
    patch_size: float = DEFAULT_PATCH_SIZE,
    project_id: str = "",
    nlcd_year: int | None = None,
    max_nodata_fraction: float = 0.5,
) -> tuple[list[PatchLabel], dict]:
    """Label every full ``patch_size`` square of the co-registered class grids.

    Patches are anchored at the grids' upper-left corner and partial edge
    patches are not formed. A cell belongs to the patch containing its
    centre. Returns the labels plus a dict of drop counts.
    """
    if patch_size <= 0:
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if landcover.crs != slopecls.crs:
        raise RasterError(f"grid CRS mismatch: {landcover.crs} vs {slopecls.crs}")
    if not landcover.same_geometry(slopecls):
        raise RasterError("land-cover and slope grids are not co-registered")
    if landcover.crs is not None and not landcover.crs.is_metric:
        raise RasterError("patch labelling needs grids in a metric CRS")

    cs = landcover.cell_size
    n_cols = int(math.floor(landcover.width * cs / patch_size + 1e-9))
    n_rows = int(math.floor(landcover.height * cs / patch_size + 1e-9))
    report = {"formed": n_cols * n_rows, "dropped_outside": 0, "dropped_nodata": 0, "labelled": 0}
    if n_cols == 0 or n_rows == 0:
        return [], report

    xs, ys = landcover.cell_centers()
    pc = np.floor((xs - landcover.origin_x) / patch_size).astype(np.int64)
    pr = np.floor((landcover.origin_y - ys) / patch_size).astype(np.int64)
    in_grid = (pc < n_cols) & (pr < n_rows)
    patch = np.where(in_grid, pr * n_cols + pc, -1)
    n_patches = n_rows * n_cols

    lc = np.asarray(landcover.band).astype(np.int64)
    sl = np.asarray(slopecls.band).astype(np.int64)
    lc_ok = landcover.valid & (lc != CLASS_NODATA)
    sl_ok = slopecls.valid & (sl != CLASS_NODATA)

    cells = np.bincount(patch[in_grid], minlength=n_patches)
    both = in_grid & lc_ok & sl_ok
    valid_cells = np.bincount(patch[both], minlength=n_patches)

    lc_mode, lc_n = _modal(patch[in_grid & lc_ok], lc[in_grid & lc_ok], n_patches, len(LandCoverL1) + 1)
    sl_mode, sl_n = _modal(patch[in_grid & sl_ok], sl[in_grid & sl_ok], n_patches, len(SlopeClass) + 1)

    labels = []
    epsg = landcover.crs.epsg if landcover.crs is not None else None
    for idx in range(n_patches):
        r, c = divmod(idx, n_cols)
        minx = landcover.origin_x + c * patch_size
        maxy = landcover.origin_y - r * patch_size
        bbox = (minx, maxy - patch_size, minx + patch_size, maxy)
        cx, cy = minx + patch_size / 2, maxy - patch_size / 2
        if poly is not None and not poly.contains(cx, cy):
            report["dropped_outside"] += 1
            continue
        nodata_fraction = 1.0 - valid_cells[idx] / cells[idx] if cells[idx] else 1.0
        if nodata_fraction > max_nodata_fraction or lc_n[idx] == 0 or sl_n[idx] == 0:
            report["dropped_nodata"] += 1
            continue
        labels.append(
            PatchLabel(
                bbox, LandCoverL1(int(lc_mode[idx])), SlopeClass(int(sl_mode[idx])),
                project_id, nlcd_year, epsg, r, c,
            )
        )
    report["labelled"] = len(labels)
    return labels, report


def label_patches(landcover, slopecls, poly=None, patch_size=DEFAULT_PATCH_SIZE, **kwargs) -> list[PatchLabel]:
    return label_patches_with_report(landcover, slopecls, poly, patch_size, **kwargs)[0]


def joint_distribution(labels: Sequence[PatchLabel]) -> JointDistribution:
    if not labels:
        raise SamplingError("cannot build a joint distribution from zero labels")
    counts = Counter(lab.joint_key for lab in labels)
    return JointDistribution(dict(counts), len(labels))


def derive_seed(seed: int, key: str) -> int:
    """Stable per-key child seed, independent of iteration order."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(key.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def inverse_weights(labels: Sequence[PatchLabel], dist: JointDistribution) -> np.ndarray:
    """w = 1/p(joint class), with p floored at 1/total."""
    floor = 1.0 / dist.total
    return np.array([1.0 / max(dist.p(lab.joint_key), floor) for lab in labels], dtype=np.float64)


def inclusion_probabilities(weights: np.ndarray, n: int) -> np.ndarray:
    """Inclusion probabilities proportional to weight, capped at one and summing to ``n``."""
    w = np.asarray(weights, dtype=np.float64)
    pi = np.zeros_like(w)
    if n <= 0:
        return pi
    if n >= w.size:
        return np.ones_like(w)
    certain = np.zeros(w.size, dtype=bool)
    while True:
        remaining = n - certain.sum()
        free = ~certain
        pi[free] = remaining * w[free] / w[free].sum()
        pi[certain] = 1.0
        over = free & (pi >= 1.0)
        if not over.any():
            return pi
        certain |= over


def systematic_pps(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Randomised systematic sampling with probability proportional to size.

    Items are visited in a random order; each item's inclusion probability
    equals :func:`inclusion_probabilities`. Returns selected indices in
    visiting order.
    """
    w = np.asarray(weights, dtype=np.float64)
    if n <= 0 or w.size == 0:
        return np.empty(0, dtype=np.int64)
    n = min(n, w.size)
    order = rng.permutation(w.size)
    pi = inclusion_probabilities(w, n)[order]
    cum = np.concatenate([[0.0], np.cumsum(pi)])
    cum[-1] = float(n)
    u = rng.random()
    hits = np.floor(cum[1:] - u) > np.floor(cum[:-1] - u)
    return order[hits]


def weighted_reservoir(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Efraimidis-Spirakis A-Res: keep the ``n`` largest ``u ** (1/w)`` keys."""
    w = np.asarray(weights, dtype=np.float64)
    if n <= 0 or w.size == 0:
        return np.empty(0, dtype=np.int64)
    keys = np.log(rng.random(w.size)) / w
    order = np.argsort(-keys, kind="stable")
    return order[: min(n, w.size)]


def inverse_probability_sample(
    labels: Sequence[PatchLabel],
    dist: JointDistribution | None = None,
    n: int = DEFAULT_CAP,
    seed: int = 0,
    allowed_landcover: Iterable[LandCoverL1] | None = DEFAULT_ALLOWED,
    method: str = "systematic",
) -> list[PatchLabel]:
    """Select ``min(n, |candidates|)`` patches, weighting each by 1/p(joint class).

    Candidates are first restricted to ``allowed_landcover`` and p is taken
    over that restricted pool. ``method`` is ``"systematic"`` (exact
    inclusion probabilities) or ``"reservoir"`` (Efraimidis-Spirakis keys).
    """
    if n < 0:
        raise SamplingError(f"sample size must be non-negative, got {n}")
    if allowed_landcover is None:
        candidates = list(labels)
    else:
        allowed = set(allowed_landcover)
        candidates = [lab for lab in labels if lab.landcover in allowed]
    if not candidates or n == 0:
        return []
    if dist is None:
        pool = joint_distribution(candidates)
    else:
        keys = {lab.joint_key for lab in candidates}
        counts = {k: v for k, v in dist.counts.items() if k in keys}
        pool = JointDistribution(counts, sum(counts.values()))
        if pool.total == 0:
            pool = joint_distribution(candidates)
    weights = inverse_weights(candidates, pool)
    rng = np.random.default_rng(seed)
    if method == "systematic":
        idx = systematic_pps(weights, n, rng)
    elif method == "reservoir":
        idx = weighted_reservoir(weights, n, rng)
    else:
        raise SamplingError(f"unknown sampling method {method!r}")
    return [candidates[i] for i in idx]


def uniform_sample(
    labels: Sequence[PatchLabel],
    n: int,
    seed: int = 0,
    allowed_landcover: Iterable[LandCoverL1] | None = DEFAULT_ALLOWED,
) -> list[PatchLabel]:
    """Plain random sampling without replacement; the unbalanced baseline."""
    if allowed_landcover is None:
        candidates = list(labels)
    else:
        allowed = set(allowed_landcover)
        candidates = [lab for lab in labels if lab.landcover in allowed]
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(candidates))[: min(n, len(candidates))]
    return [candidates[i] for i in idx]


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    project_id: str
    epsg: int | None
    minx: float
    miny: float
    maxx: float
    maxy: float
    landcover: str
    slope: str
    nlcd_year: int | None
    source_url: str = ""

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return (self.minx, self.miny, self.maxx, self.maxy)

    def to_json(self) -> str:
        parts = []
        for key in MANIFEST_KEYS:
            val = getattr(self, key)
            if key in ("minx", "miny", "maxx", "maxy"):
                parts.append(f'"{key}": {val:.3f}')
            else:
                parts.append(f'"{key}": {json.dumps(val)}')
        return "{" + ", ".join(parts) + "}"

    @classmethod
    def from_dict(cls, d: Mapping) -> "ManifestEntry":
        missing = [k for k in MANIFEST_KEYS if k not in d]
        if missing:
            raise ManifestError(f"manifest entry missing keys: {missing}")
        return cls(
            str(d["project_id"]),
            None if d["epsg"] is None else int(d["epsg"]),
            float(d["minx"]), float(d["miny"]), float(d["maxx"]), float(d["maxy"]),
            str(d["landcover"]), str(d["slope"]),
            None if d["nlcd_year"] is None else int(d["nlcd_year"]),
            str(d["source_url"] or ""),
        )


@dataclass
class SampleManifest:
    entries: list[ManifestEntry]
    seed: int | None = None

    def __len__(self):
        return len(self.entries)

    def to_jsonl(self) -> bytes:
        return "".join(e.to_json() + "\n" for e in self.entries).encode("utf-8")

    def summary(self, landcovers: Sequence[str] = ("Developed", "Forest")) -> dict:
        """Tile counts by slope (rows) and land cover (columns), with "All" margins."""
        cols = list(landcovers)
        for e in self.entries:
            if e.landcover not in cols:
                cols.append(e.landcover)
        table = {s.name: {c: 0 for c in cols} for s in SlopeClass}
        for e in self.entries:
            table.setdefault(e.slope, {c: 0 for c in cols})[e.landcover] += 1
        for row in table.values():
            row["All"] = sum(row[c] for c in cols)
        table["All"] = {c: sum(table[s][c] for s in table) for c in cols + ["All"]}
        per_project = Counter(e.project_id for e in self.entries)
        return {
            "seed": self.seed,
            "total": len(self.entries),
            "projects": len(per_project),
            "counts": table,
            "per_project": dict(sorted(per_project.items())),
        }

    def summary_json(self) -> bytes:
        return (json.dumps(self.summary(), indent=2, sort_keys=False) + "\n").encode("utf-8")


def read_manifest(data: bytes | str) -> SampleManifest:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(ManifestEntry.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from None
    return SampleManifest(entries)


def build_manifest(
    selected: Mapping[str, Sequence[PatchLabel]],
    cap: int = DEFAULT_CAP,
    source_urls: Mapping[str, str] | None = None,
    seed: int | None = None,
) -> SampleManifest:
    """Merge per-project selections in project-id order, keeping at most ``cap`` each."""
    if cap < 1:
        raise ManifestError(f"cap must be at least 1, got {cap}")
    source_urls = source_urls or {}
    entries = []
    for pid in sorted(selected):
        seen = set()
        for lab in selected[pid]:
            key = tuple(round(v, 3) for v in lab.bbox)
            if key in seen:
                raise ManifestError(f"duplicate bbox {key} in project {pid}")
            seen.add(key)
        for lab in list(selected[pid])[:cap]:
            entries.append(
                ManifestEntry(
                    pid, lab.epsg, *lab.bbox, lab.landcover.name, lab.slope.name, lab.nlcd_year,
                    source_urls.get(pid, ""),
                )
            )
    return SampleManifest(entries, seed)
