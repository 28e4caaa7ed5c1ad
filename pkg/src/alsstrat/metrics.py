"""Per-class IoU, mean IoU and overall accuracy from label pairs."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import MetricsError


@dataclass(frozen=True)
class ConfusionCounts:
    """Full confusion matrix; rows are truth, columns are prediction."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise MetricsError(f"confusion matrix must be square and non-empty, got shape {m.shape}")
        if np.any(m < 0):
            raise MetricsError("negative confusion counts")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise MetricsError(f"cannot merge {self.num_classes}-class and {other.num_classes}-class counts")
        return ConfusionCounts(self.matrix + other.matrix)

    __add__ = merge


def accumulate(pred, truth, num_classes: int) -> ConfusionCounts:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape or p.ndim != 1:
        raise MetricsError(f"prediction and truth lengths differ: {p.shape} vs {t.shape}")
    if p.size and not (np.issubdtype(p.dtype, np.integer) and np.issubdtype(t.dtype, np.integer)):
        raise MetricsError("labels must be integers")
    p = p.astype(np.int64)
    t = t.astype(np.int64)
    for name, arr in (("prediction", p), ("truth", t)):
        bad = (arr < 0) | (arr >= num_classes)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise MetricsError(f"{name} label {arr[i]} at position {i} is outside [0, {num_classes})")
    flat = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionCounts(flat.reshape(num_classes, num_classes))


def iou(c: ConfusionCounts, i: int) -> float:
    """``TP / (TP + FP + FN)``; ``nan`` when the class never occurs."""
    if not 0 <= i < c.num_classes:
        raise MetricsError(f"class index {i} outside [0, {c.num_classes})")
    tp, fp, fn = int(c.tp[i]), int(c.fp[i]), int(c.fn[i])
    denom = tp + fp + fn
    return math.nan if denom == 0 else tp / denom


def per_class_iou(c: ConfusionCounts) -> list[float]:
    return [iou(c, i) for i in range(c.num_classes)]


def mean_of_ious(values: Sequence[float], strict: bool = False) -> float:
    """Unweighted mean; ``strict`` counts undefined entries as 0 instead of skipping them."""
    vals = [float(v) for v in values]
    if strict:
        if not vals:
            raise MetricsError("no classes")
        return math.fsum(0.0 if math.isnan(v) else v for v in vals) / len(vals)
    defined = [v for v in vals if not math.isnan(v)]
    if not defined:
        raise MetricsError("every class IoU is undefined")
    return math.fsum(defined) / len(defined)


def miou(c: ConfusionCounts, strict: bool = False) -> float:
    return mean_of_ious(per_class_iou(c), strict)


def oa(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise MetricsError("empty evaluation")
    return int(c.tp.sum()) / c.total


def report(c: ConfusionCounts, class_names: Sequence[str] | None = None, strict: bool = False) -> dict:
    """JSON-ready metrics; percentages rounded to one decimal alongside raw fractions."""
    names = list(class_names) if class_names else [str(i) for i in range(c.num_classes)]
    if len(names) != c.num_classes:
        raise MetricsError(f"{len(names)} class names for {c.num_classes} classes")
    ious = per_class_iou(c)
    m = miou(c, strict)
    o = oa(c)
    return {
        "num_classes": c.num_classes,
        "total": c.total,
        "strict": strict,
        "oa": o,
        "oa_percent": round(100 * o, 1),
        "miou": m,
        "miou_percent": round(100 * m, 1),
        "undefined_classes": [n for n, v in zip(names, ious) if math.isnan(v)],
        "per_class": {
            n: {
                "iou": None if math.isnan(v) else v,
                "iou_percent": None if math.isnan(v) else round(100 * v, 1),
                "tp": int(tp), "fp": int(fp), "fn": int(fn),
            }
            for n, v, tp, fp, fn in zip(names, ious, c.tp, c.fp, c.fn)
        },
        "confusion": c.matrix.tolist(),
    }


# -- label files -------------------------------------------------------------


def read_labels(path) -> dict[str, int]:
    """``id -> label`` from a CSV with an ``id,label`` header or from JSONL records."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    out: dict[str, int] = {}
    if path.suffix.lower() in (".jsonl", ".json"):
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, lab = str(rec["id"]), rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise MetricsError(f"{path}:{n}: bad label record ({exc})") from None
            _put(out, key, lab, path, n)
        return out
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["id", "label"]:
        raise MetricsError(f"{path}: expected an 'id,label' header")
    for n, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) < 2:
            raise MetricsError(f"{path}:{n}: expected two columns")
        _put(out, row[0].strip(), row[1].strip(), path, n)
    return out


def _put(out, key, lab, path, n):
    try:
        value = int(lab)
    except (TypeError, ValueError):
        raise MetricsError(f"{path}:{n}: label {lab!r} is not an integer") from None
    if key in out:
        raise MetricsError(f"{path}:{n}: duplicate id {key!r}")
    out[key] = value


def pair_labels(pred: dict[str, int], truth: dict[str, int]) -> tuple[np.ndarray, np.ndarray]:
    missing = sorted(set(truth) - set(pred))
    if missing:
        raise MetricsError(f"{len(missing)} ids lack a prediction, e.g. {missing[0]!r}")
    ids = sorted(truth)
    return np.array([pred[i] for i in ids], dtype=np.int64), np.array([truth[i] for i in ids], dtype=np.int64)
