"""Data-side preparation of masked bird's-eye-view autoencoder samples.

A sample is produced by cropping a square window from a tile, augmenting
it, binning it into tall BEV cells, masking a fraction of the occupied
cells, and voxelising the points that remain visible. Reconstruction
targets are the masked cells' point coordinates in a cell-local frame
and their cap-normalised point counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import MaePrepError
from .pointcloud import PointTile, crop


@dataclass(frozen=True)
class VoxelSpec:
    voxel_size: float = 0.6
    max_voxels: int = 200_000
    max_points_per_voxel: int = 5

    def __post_init__(self):
        if self.voxel_size <= 0 or self.max_voxels < 1 or self.max_points_per_voxel < 1:
            raise MaePrepError(f"invalid voxel spec {self}")


PRETRAIN_VOXELS = VoxelSpec(0.6)
# the tree-species experiments quote a 0.06 m voxel
FINE_VOXELS = VoxelSpec(0.06)


@dataclass(frozen=True)
class BevSpec:
    cell_size: tuple[float, float, float] = (4.8, 4.8, 288.0)
    max_cells: int = 200_000
    max_points_per_cell: int = 30

    def __post_init__(self):
        if min(self.cell_size) <= 0 or self.max_cells < 1 or self.max_points_per_cell < 1:
            raise MaePrepError(f"invalid BEV spec {self}")


@dataclass(frozen=True)
class AugmentParams:
    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def draw(
        cls,
        rng: np.random.Generator,
        scale_range: tuple[float, float] = (0.95, 1.05),
        max_shift: tuple[float, float, float] = (5.0, 5.0, 1.0),
    ) -> "AugmentParams":
        flip_x, flip_y = (bool(v) for v in rng.integers(0, 2, 2))
        scale = float(rng.uniform(*scale_range))
        shift = tuple(float(rng.uniform(-m, m)) for m in max_shift)
        return cls(flip_x, flip_y, scale, shift)


@dataclass
class VoxelGrid:
    voxel_size: float
    origin: tuple[float, float, float]
    indices: np.ndarray  # (V, 3) int64
    counts: np.ndarray  # (V,) stored points, <= cap
    raw_counts: np.ndarray  # (V,) points before the cap
    points: np.ndarray  # (V, cap, 3), zero padded
    point_index: np.ndarray  # (V, cap) input row of each stored point, -1 padded
    max_points_per_voxel: int = 5
    dropped_voxels: int = 0

    def __len__(self):
        return len(self.indices)

    def voxels(self):
        for v in range(len(self)):
            n = int(self.counts[v])
            yield {"index": tuple(int(i) for i in self.indices[v]), "points": self.points[v, :n], "count": n}


@dataclass
class BevGrid:
    spec: BevSpec
    origin: tuple[float, float, float]
    indices: np.ndarray  # (C, 2) int64
    counts: np.ndarray  # (C,) points per cell before the cap
    points: np.ndarray  # (C, cap, 3)
    stored: np.ndarray  # (C,) points kept, <= cap
    point_cell: np.ndarray  # (N,) cell row per input point, -1 if the cell was dropped
    xyz: np.ndarray  # (N, 3) input coordinates
    clamped: int = 0
    dropped_cells: int = 0

    def __len__(self):
        return len(self.indices)

    def centers(self) -> np.ndarray:
        sx, sy, sz = self.spec.cell_size
        ox, oy, oz = self.origin
        c = np.empty((len(self), 3))
        c[:, 0] = ox + (self.indices[:, 0] + 0.5) * sx
        c[:, 1] = oy + (self.indices[:, 1] + 0.5) * sy
        c[:, 2] = oz + 0.5 * sz
        return c


@dataclass
class MaskedSample:
    ratio: float
    rng_seed: int
    masked_cells: np.ndarray  # rows into the BEV grid
    visible_cells: np.ndarray
    masked_cell_indices: np.ndarray  # (M, 2)
    coord_targets: np.ndarray  # (M, cap, 3) in [-1, 1]
    target_counts: np.ndarray  # (M,)
    density_targets: np.ndarray  # (M,) in [0, 1]
    masked_point_index: np.ndarray
    visible_point_index: np.ndarray
    visible_voxels: VoxelGrid | None = None
    meta: dict = field(default_factory=dict)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def crop_random(tile: PointTile, side: float = 144.0, seed=0) -> PointTile:
    """A ``side`` x ``side`` window with its origin uniform over the tile."""
    minx, miny, maxx, maxy = tile.bounds
    if maxx - minx < side or maxy - miny < side:
        raise MaePrepError(f"tile {maxx - minx:.1f} x {maxy - miny:.1f} m is smaller than the {side} m crop")
    rng = _rng(seed)
    x0 = minx + rng.uniform(0.0, maxx - minx - side) if maxx - minx > side else minx
    y0 = miny + rng.uniform(0.0, maxy - miny - side) if maxy - miny > side else miny
    bbox = (x0, y0, min(x0 + side, maxx), min(y0 + side, maxy))
    return crop(tile, bbox, inclusive_max=(bbox[2] >= maxx, bbox[3] >= maxy))


def augment(tile: PointTile, params: AugmentParams) -> PointTile:
    """Flip about the tile centre, scale about it, then translate."""
    minx, miny, maxx, maxy = tile.bounds
    cx, cy = (minx + maxx) / 2, (miny + maxy) / 2
    cz = float((tile.z.min() + tile.z.max()) / 2) if len(tile) else 0.0
    x = 2 * cx - tile.x if params.flip_x else tile.x.copy()
    y = 2 * cy - tile.y if params.flip_y else tile.y.copy()
    z = tile.z.copy()
    s = params.scale
    if s <= 0:
        raise MaePrepError(f"scale must be positive, got {s}")
    if s != 1.0:
        x = cx + s * (x - cx)
        y = cy + s * (y - cy)
        z = cz + s * (z - cz)
    dx, dy, dz = params.translation
    x, y, z = x + dx, y + dy, z + dz
    hx, hy = s * (maxx - minx) / 2, s * (maxy - miny) / 2
    bounds = (cx - hx + dx, cy - hy + dy, cx + hx + dx, cy + hy + dy)
    return tile.with_xyz(x, y, z, bounds)


def _default_origin(xyz: np.ndarray, bounds=None) -> tuple[float, float, float]:
    z0 = float(xyz[:, 2].min()) if len(xyz) else 0.0
    if bounds is not None:
        return (float(bounds[0]), float(bounds[1]), z0)
    if len(xyz) == 0:
        return (0.0, 0.0, 0.0)
    return (float(xyz[:, 0].min()), float(xyz[:, 1].min()), z0)


def _as_xyz(points) -> tuple[np.ndarray, tuple | None]:
    if isinstance(points, PointTile):
        return points.xyz, points.bounds
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return arr, None


def _group(keys: np.ndarray, cap: int):
    """Unique keys (sorted), inverse map, per-point rank within its group in input order."""
    uniq, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.empty(len(keys), dtype=np.int64)
    rank[order] = np.arange(len(keys)) - np.repeat(starts, counts)
    return uniq, inverse, counts, rank


def _pack_key(idx: np.ndarray) -> np.ndarray:
    lo = idx.min(axis=0)
    span = idx.max(axis=0) - lo + 1
    if np.prod(span.astype(np.float64)) >= 2**62:
        raise MaePrepError("voxel index range too large to pack")
    shifted = idx - lo
    key = shifted[:, 0]
    for d in range(1, idx.shape[1]):
        key = key * span[d] + shifted[:, d]
    return key


def voxelize(points, spec: VoxelSpec = PRETRAIN_VOXELS, origin=None, seed=0) -> VoxelGrid:
    """Bin points into cubic voxels, keeping the first points of each voxel.

    Voxel index is ``floor((p - origin) / voxel_size)`` per axis. When more
    than ``max_voxels`` are occupied a seeded uniform subset is retained.
    """
    xyz, bounds = _as_xyz(points)
    origin = tuple(float(v) for v in (origin if origin is not None else _default_origin(xyz, bounds)))
    cap = spec.max_points_per_voxel
    if len(xyz) == 0:
        return VoxelGrid(
            spec.voxel_size, origin, np.empty((0, 3), np.int64), np.empty(0, np.int64), np.empty(0, np.int64),
            np.empty((0, cap, 3)), np.empty((0, cap), np.int64), cap,
        )
    idx = np.floor((xyz - np.asarray(origin)) / spec.voxel_size).astype(np.int64)
    uniq, inverse, raw, rank = _group(_pack_key(idx), cap)
    n_vox = len(uniq)
    first = np.zeros(n_vox, dtype=np.int64)
    first[inverse[::-1]] = np.arange(len(xyz))[::-1]
    indices = idx[first]

    keep = rank < cap
    pts = np.zeros((n_vox, cap, 3))
    pidx = np.full((n_vox, cap), -1, dtype=np.int64)
    pts[inverse[keep], rank[keep]] = xyz[keep]
    pidx[inverse[keep], rank[keep]] = np.nonzero(keep)[0]
    counts = np.minimum(raw, cap)

    dropped = 0
    if n_vox > spec.max_voxels:
        chosen = np.sort(_rng(seed).choice(n_vox, size=spec.max_voxels, replace=False))
        dropped = n_vox - spec.max_voxels
        indices, counts, raw, pts, pidx = indices[chosen], counts[chosen], raw[chosen], pts[chosen], pidx[chosen]
    return VoxelGrid(spec.voxel_size, origin, indices, counts, raw, pts, pidx, cap, dropped)


def build_bev(points, spec: BevSpec = BevSpec(), origin=None, seed=0) -> BevGrid:
    """Group points into single-layer BEV pillars.

    Points outside the vertical window ``[oz, oz + cell_z)`` stay in their
    pillar and are counted in ``clamped``.
    """
    xyz, bounds = _as_xyz(points)
    origin = tuple(float(v) for v in (origin if origin is not None else _default_origin(xyz, bounds)))
    sx, sy, sz = spec.cell_size
    cap = spec.max_points_per_cell
    n = len(xyz)
    if n == 0:
        return BevGrid(spec, origin, np.empty((0, 2), np.int64), np.empty(0, np.int64), np.empty((0, cap, 3)),
                       np.empty(0, np.int64), np.empty(0, np.int64), xyz)
    dz = xyz[:, 2] - origin[2]
    clamped = int(np.count_nonzero((dz < 0) | (dz >= sz)))
    ij = np.floor((xyz[:, :2] - np.asarray(origin[:2])) / np.array([sx, sy])).astype(np.int64)
    uniq, inverse, counts, rank = _group(_pack_key(ij), cap)
    n_cells = len(uniq)
    first = np.zeros(n_cells, dtype=np.int64)
    first[inverse[::-1]] = np.arange(n)[::-1]
    indices = ij[first]
    keep = rank < cap
    pts = np.zeros((n_cells, cap, 3))
    pts[inverse[keep], rank[keep]] = xyz[keep]
    stored = np.minimum(counts, cap)
    point_cell = inverse.astype(np.int64)

    dropped = 0
    if n_cells > spec.max_cells:
        chosen = np.sort(_rng(seed).choice(n_cells, size=spec.max_cells, replace=False))
        remap = np.full(n_cells, -1, dtype=np.int64)
        remap[chosen] = np.arange(len(chosen))
        point_cell = remap[point_cell]
        dropped = n_cells - spec.max_cells
        indices, counts, pts, stored = indices[chosen], counts[chosen], pts[chosen], stored[chosen]
    return BevGrid(spec, origin, indices, counts, pts, stored, point_cell, xyz, clamped, dropped)


def mask_bev(bev: BevGrid, ratio: float = 0.7, seed=0) -> MaskedSample:
    """Mask ``round(ratio * occupied)`` cells chosen uniformly without replacement."""
    if not 0 < ratio < 1:
        raise MaePrepError(f"mask ratio must be in (0, 1), got {ratio}")
    occupied = len(bev)
    if occupied == 0:
        raise MaePrepError("no occupied BEV cells to mask")
    n_mask = int(math.floor(ratio * occupied + 0.5))
    seed_value = seed if isinstance(seed, (int, np.integer)) else -1
    rng = _rng(seed)
    masked = np.sort(rng.choice(occupied, size=n_mask, replace=False))
    is_masked = np.zeros(occupied, dtype=bool)
    is_masked[masked] = True
    visible = np.nonzero(~is_masked)[0]

    cap = bev.spec.max_points_per_cell
    half = np.array(bev.spec.cell_size) / 2.0
    centers = bev.centers()[masked]
    stored = bev.stored[masked]
    targets = (bev.points[masked] - centers[:, None, :]) / half
    targets = np.clip(targets, -1.0, 1.0)
    slot = np.arange(cap)[None, :] < stored[:, None]
    targets[~slot] = 0.0

    cell = bev.point_cell
    in_cell = cell >= 0
    pm = np.zeros(len(cell), dtype=bool)
    pm[in_cell] = is_masked[cell[in_cell]]
    return MaskedSample(
        ratio=ratio,
        rng_seed=int(seed_value),
        masked_cells=masked,
        visible_cells=visible,
        masked_cell_indices=bev.indices[masked],
        coord_targets=targets,
        target_counts=stored.copy(),
        density_targets=np.minimum(bev.counts[masked], cap) / cap,
        masked_point_index=np.nonzero(pm)[0],
        visible_point_index=np.nonzero(in_cell & ~pm)[0],
    )


@dataclass(frozen=True)
class PrepConfig:
    crop_size: float = 144.0
    voxel: VoxelSpec = PRETRAIN_VOXELS
    bev: BevSpec = BevSpec()
    mask_ratio: float = 0.7
    scale_range: tuple[float, float] = (0.95, 1.05)
    max_shift: tuple[float, float, float] = (5.0, 5.0, 1.0)
    augment: bool = True

    def as_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def prepare_sample(tile: PointTile, config: PrepConfig = PrepConfig(), seed: int = 0) -> tuple[MaskedSample, PointTile]:
    """Crop, augment, bin, mask and voxelise one sample; returns it with the augmented crop."""
    crop_rng, aug_rng, bev_rng, mask_rng, vox_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5))
    cropped = crop_random(tile, config.crop_size, crop_rng)
    params = AugmentParams()
    if config.augment:
        params = AugmentParams.draw(aug_rng, config.scale_range, config.max_shift)
    aug = augment(cropped, params)
    if len(aug) == 0:
        raise MaePrepError("crop contains no points")
    bev = build_bev(aug, config.bev, seed=bev_rng)
    sample = mask_bev(bev, config.mask_ratio, mask_rng)
    vis = aug.xyz[sample.visible_point_index]
    sample.visible_voxels = voxelize(vis, config.voxel, origin=bev.origin, seed=vox_rng)
    sample.rng_seed = int(seed)
    sample.meta = {
        "seed": int(seed),
        "crop_bounds": list(cropped.bounds),
        "augment": asdict(params),
        "origin": list(bev.origin),
        "occupied_cells": len(bev),
        "clamped_points": bev.clamped,
        "dropped_cells": bev.dropped_cells,
        "dropped_voxels": sample.visible_voxels.dropped_voxels,
        "input_points": len(aug),
    }
    return sample, aug


# -- archive ----------------------------------------------------------------


def sample_arrays(sample: MaskedSample) -> list[tuple[str, np.ndarray]]:
    """The float32 arrays of one sample record, coordinates relative to the sample origin."""
    vox = sample.visible_voxels
    origin = np.asarray(vox.origin) if vox is not None else np.zeros(3)
    if vox is None:
        raise MaePrepError("sample has no visible voxels; run prepare_sample")
    pts = vox.points - origin
    slot = np.arange(vox.max_points_per_voxel)[None, :] < vox.counts[:, None]
    pts[~slot] = 0.0
    return [
        ("visible_points", pts.astype(np.float32)),
        ("voxel_counts", vox.counts.astype(np.float32)),
        ("voxel_indices", vox.indices.astype(np.float32)),
        ("masked_cell_indices", sample.masked_cell_indices.astype(np.float32)),
        ("coord_targets", sample.coord_targets.astype(np.float32)),
        ("target_counts", sample.target_counts.astype(np.float32)),
        ("density_targets", sample.density_targets.astype(np.float32)),
    ]


def write_sample(sample: MaskedSample, out_dir: str | Path, sample_id: str, extra: dict | None = None) -> dict:
    """Write ``{sample_id}.bin`` (little-endian float32) and ``{sample_id}.json``; return the index row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = sample_arrays(sample)
    layout = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        blob = arr.astype("<f4").tobytes()
        layout.append({"name": name, "dtype": "<f4", "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    (out / f"{sample_id}.bin").write_bytes(b"".join(blobs))
    vox = sample.visible_voxels
    sidecar = {
        "sample_id": sample_id,
        "arrays": layout,
        "origin": list(vox.origin),
        "voxel_size": vox.voxel_size,
        "max_points_per_voxel": vox.max_points_per_voxel,
        "mask_ratio": sample.ratio,
        "meta": sample.meta,
    }
    if extra:
        sidecar.update(extra)
    (out / f"{sample_id}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {
        "sample_id": sample_id,
        "bin": f"{sample_id}.bin",
        "json": f"{sample_id}.json",
        "voxels": int(len(vox)),
        "masked_cells": int(len(sample.masked_cells)),
        "visible_cells": int(len(sample.visible_cells)),
    }


def read_sample(out_dir: str | Path, sample_id: str) -> tuple[dict, dict[str, np.ndarray]]:
    out = Path(out_dir)
    sidecar = json.loads((out / f"{sample_id}.json").read_text(encoding="utf-8"))
    blob = (out / f"{sample_id}.bin").read_bytes()
    arrays = {}
    for item in sidecar["arrays"]:
        arr = np.frombuffer(blob, dtype=item["dtype"], count=int(np.prod(item["shape"])), offset=item["offset"])
        arrays[item["name"]] = arr.reshape(item["shape"])
    return sidecar, arrays
