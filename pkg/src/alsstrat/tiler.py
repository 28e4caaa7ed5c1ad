"""Sliding-window cutting of parent tiles and parent-level train/val/test splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import TilingError
from .pointcloud import PointTile, crop, write_las_file

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class WindowSpec:
    window: float = 100.0
    stride: float = 100.0
    flush: bool = False

    def __post_init__(self):
        if not 0 < self.stride <= self.window:
            raise TilingError(f"need 0 < stride <= window, got stride={self.stride} window={self.window}")


TRAIN_WINDOWS = WindowSpec(100.0, 50.0)
EVAL_WINDOWS = WindowSpec(100.0, 100.0)


def axis_starts(length: float, window: float, stride: float, flush: bool = False) -> list[float]:
    """Offsets ``0, s, 2s, ...``; ``floor((L - w) / s) + 1`` of them.

    With ``flush`` a final window ending exactly at ``L`` is appended when
    the regular starts leave a gap.
    """
    if length < window:
        raise TilingError(f"extent {length} is smaller than window {window}")
    # guard against float noise such as (500 - 100) / 50 = 7.999999
    count = int(math.floor((length - window) / stride + 1e-9)) + 1
    starts = [k * stride for k in range(count)]
    if flush and starts[-1] + window < length - 1e-9:
        starts.append(length - window)
    return starts


def windows(extent, spec: WindowSpec = EVAL_WINDOWS, origin=(0.0, 0.0)) -> list[tuple[int, int, tuple[float, float, float, float]]]:
    """``(row, col, bbox)`` for every window, rows along y from the lower-left origin."""
    lx, ly = extent
    ox, oy = origin
    xs = axis_starts(lx, spec.window, spec.stride, spec.flush)
    ys = axis_starts(ly, spec.window, spec.stride, spec.flush)
    out = []
    for r, y in enumerate(ys):
        for c, x in enumerate(xs):
            out.append((r, c, (ox + x, oy + y, ox + x + spec.window, oy + y + spec.window)))
    return out


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, str]
    fractions: tuple[float, float, float]
    seed: int

    def members(self, split: str) -> list[str]:
        return sorted(k for k, v in self.assignment.items() if v == split)

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(self.members(s)) for s in SPLIT_NAMES)

    def __getitem__(self, tile_id: str) -> str:
        return self.assignment[tile_id]


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [f * total for f in fractions]
    base = [int(math.floor(q + 1e-9)) for q in quotas]
    rest = total - sum(base)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def split(tile_ids: Sequence[str], fractions=(0.6625, 0.16875, 0.16875), seed: int = 0) -> SplitAssignment:
    """Assign parent tiles to train/val/test; windows inherit their parent's split."""
    ids = sorted({str(t) for t in tile_ids})
    if not ids:
        raise TilingError("no tile ids to split")
    if len(ids) != len(tile_ids):
        raise TilingError("duplicate tile ids")
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
        raise TilingError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    sizes = largest_remainder(len(ids), fr)
    assignment = {}
    k = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        for idx in perm[k : k + size]:
            assignment[ids[idx]] = name
        k += size
    return SplitAssignment(dict(sorted(assignment.items())), fr, seed)


@dataclass
class Window:
    row: int
    col: int
    bbox: tuple[float, float, float, float]
    tile: PointTile

    @property
    def empty(self) -> bool:
        return len(self.tile) == 0


def cut(tile: PointTile, spec: WindowSpec = EVAL_WINDOWS) -> list[Window]:
    """Crop ``tile`` at every window; empty windows are kept.

    Membership is half-open except along the parent's own upper edges.
    """
    minx, miny, maxx, maxy = tile.bounds
    out = []
    for r, c, bbox in windows((maxx - minx, maxy - miny), spec, (minx, miny)):
        inclusive = (abs(bbox[2] - maxx) < 1e-9, abs(bbox[3] - maxy) < 1e-9)
        out.append(Window(r, c, bbox, crop(tile, bbox, inclusive_max=inclusive)))
    return out


def write_windows(parts: Sequence[Window], out_dir, split_name: str, parent_id: str, label=None) -> list[dict]:
    """Write ``{split}/{parent}/{row}_{col}.las``; return index rows."""
    base = Path(out_dir) / split_name / parent_id
    base.mkdir(parents=True, exist_ok=True)
    rows = []
    for w in parts:
        name = f"{w.row}_{w.col}.las"
        write_las_file(w.tile, base / name)
        rows.append({
            "split": split_name,
            "parent_id": parent_id,
            "row": w.row,
            "col": w.col,
            "bbox": [round(v, 3) for v in w.bbox],
            "points": len(w.tile),
            "empty": w.empty,
            "label": label,
            "path": f"{split_name}/{parent_id}/{name}",
        })
    return rows


def index_jsonl(rows: Sequence[dict]) -> bytes:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in rows).encode()
