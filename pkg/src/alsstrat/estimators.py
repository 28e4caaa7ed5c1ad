"""scikit-learn style wrappers around the functional core.

Only the steps with a natural fit/transform shape are wrapped; the
functions in each module remain the primary API. All estimators follow
sklearn conventions: constructor arguments are stored verbatim and are
visible through ``get_params``, learned state ends with an underscore,
and ``fit`` returns ``self``.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import maeprep, metrics
from .pointcloud import PointTile
from .raster import SLOPE_THRESHOLDS, LandCoverL1, RasterGrid, classify_slope, slope_degrees
from .sampler import (
    DEFAULT_ALLOWED,
    DEFAULT_CAP,
    inverse_probability_sample,
    inverse_weights,
    joint_distribution,
)

# -- validation helpers ------------------------------------------------------


def check_points(X) -> np.ndarray:
    """``(N, 3)`` float64 coordinates from a PointTile or array-like."""
    if isinstance(X, PointTile):
        return X.xyz
    arr = check_array(X, dtype=np.float64, ensure_min_samples=0)
    if arr.shape[1] != 3:
        raise ValueError(f"expected (n_points, 3) coordinates, got shape {arr.shape}")
    return arr


def check_tile(X) -> PointTile:
    if isinstance(X, PointTile):
        return X
    xyz = check_points(X)
    if len(xyz):
        bounds = (xyz[:, 0].min(), xyz[:, 1].min(), xyz[:, 0].max(), xyz[:, 1].max())
    else:
        bounds = (0.0, 0.0, 0.0, 0.0)
    return PointTile(xyz[:, 0], xyz[:, 1], xyz[:, 2], bounds=bounds)


def check_grid(X) -> RasterGrid:
    if not isinstance(X, RasterGrid):
        raise TypeError(f"expected a RasterGrid, got {type(X).__name__}")
    return X


def check_scalar(value, name: str, low=None, high=None, include_low=True, include_high=True, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if isinstance(value, bool) or not isinstance(value, kind):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {value!r}")
    if low is not None and (value < low or (value == low and not include_low)):
        raise ValueError(f"{name}={value} is below the allowed range")
    if high is not None and (value > high or (value == high and not include_high)):
        raise ValueError(f"{name}={value} is above the allowed range")
    return value


def _many(X):
    """Treat a single object as a batch of one; report whether it was single."""
    if isinstance(X, (PointTile, RasterGrid)) or (isinstance(X, np.ndarray) and X.ndim == 2):
        return [X], True
    return list(X), False


# -- raster ------------------------------------------------------------------


class SlopeClassifier(TransformerMixin, BaseEstimator):
    """DEM grid(s) to Flat/Sloped/Steep class grid(s)."""

    def __init__(self, thresholds=SLOPE_THRESHOLDS):
        self.thresholds = thresholds

    def fit(self, X=None, y=None):
        lo, hi = self.thresholds
        check_scalar(lo, "thresholds[0]", 0, 90, include_high=False)
        check_scalar(hi, "thresholds[1]", lo, 90, include_low=False, include_high=False)
        self.thresholds_ = (float(lo), float(hi))
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        grids, single = _many(X)
        out = [classify_slope(slope_degrees(check_grid(g)), self.thresholds_) for g in grids]
        return out[0] if single else out


# -- sampling ----------------------------------------------------------------


class InverseProbabilitySampler(BaseEstimator):
    """Fit on a project's patch labels, then draw a balanced subset.

    ``fit`` restricts candidates to ``allowed_landcover`` and records the
    joint class distribution and per-patch weights.
    """

    def __init__(self, n=DEFAULT_CAP, allowed_landcover=tuple(sorted(DEFAULT_ALLOWED)), method="systematic", seed=0):
        self.n = n
        self.allowed_landcover = allowed_landcover
        self.method = method
        self.seed = seed

    def fit(self, X, y=None):
        check_scalar(self.n, "n", 0, integer=True)
        if self.method not in ("systematic", "reservoir"):
            raise ValueError(f"method must be 'systematic' or 'reservoir', got {self.method!r}")
        allowed = None if self.allowed_landcover is None else {LandCoverL1(a) if not isinstance(a, str) else LandCoverL1[a]
                                                               for a in self.allowed_landcover}
        labels = list(X)
        self.candidates_ = labels if allowed is None else [lab for lab in labels if lab.landcover in allowed]
        self.allowed_ = allowed
        if self.candidates_:
            self.distribution_ = joint_distribution(self.candidates_)
            self.weights_ = inverse_weights(self.candidates_, self.distribution_)
        else:
            self.distribution_ = None
            self.weights_ = np.empty(0)
        return self

    def sample(self, seed=None):
        check_is_fitted(self, "candidates_")
        return inverse_probability_sample(
            self.candidates_, self.distribution_, self.n, self.seed if seed is None else seed,
            allowed_landcover=None, method=self.method,
        )

    def fit_sample(self, X, y=None):
        return self.fit(X).sample()


# -- MAE preparation -----------------------------------------------------------


class Voxelizer(TransformerMixin, BaseEstimator):
    def __init__(self, voxel_size=0.6, max_voxels=200_000, max_points_per_voxel=5, origin=None, seed=0):
        self.voxel_size = voxel_size
        self.max_voxels = max_voxels
        self.max_points_per_voxel = max_points_per_voxel
        self.origin = origin
        self.seed = seed

    def fit(self, X=None, y=None):
        self.spec_ = maeprep.VoxelSpec(
            check_scalar(self.voxel_size, "voxel_size", 0, include_low=False),
            check_scalar(self.max_voxels, "max_voxels", 1, integer=True),
            check_scalar(self.max_points_per_voxel, "max_points_per_voxel", 1, integer=True),
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        items, single = _many(X)
        out = [
            maeprep.voxelize(x if isinstance(x, PointTile) else check_points(x), self.spec_, self.origin, self.seed)
            for x in items
        ]
        return out[0] if single else out


class BevMasker(TransformerMixin, BaseEstimator):
    """Point clouds to masked BEV samples with visible voxels."""

    def __init__(self, cell_size=(4.8, 4.8, 288.0), max_cells=200_000, max_points_per_cell=30, mask_ratio=0.7,
                 voxel_size=0.6, max_voxels=200_000, max_points_per_voxel=5, seed=0):
        self.cell_size = cell_size
        self.max_cells = max_cells
        self.max_points_per_cell = max_points_per_cell
        self.mask_ratio = mask_ratio
        self.voxel_size = voxel_size
        self.max_voxels = max_voxels
        self.max_points_per_voxel = max_points_per_voxel
        self.seed = seed

    def fit(self, X=None, y=None):
        check_scalar(self.mask_ratio, "mask_ratio", 0, 1, include_low=False, include_high=False)
        self.bev_spec_ = maeprep.BevSpec(tuple(self.cell_size), self.max_cells, self.max_points_per_cell)
        self.voxel_spec_ = maeprep.VoxelSpec(self.voxel_size, self.max_voxels, self.max_points_per_voxel)
        return self

    def transform(self, X):
        check_is_fitted(self, "bev_spec_")
        items, single = _many(X)
        out = []
        for k, x in enumerate(items):
            tile = check_tile(x)
            bev = maeprep.build_bev(tile, self.bev_spec_, seed=self.seed)
            sample = maeprep.mask_bev(bev, self.mask_ratio, np.random.default_rng([self.seed, k]))
            sample.visible_voxels = maeprep.voxelize(tile.xyz[sample.visible_point_index], self.voxel_spec_,
                                                     origin=bev.origin, seed=self.seed)
            out.append(sample)
        return out[0] if single else out


# -- evaluation ----------------------------------------------------------------


class ConfusionAccumulator(BaseEstimator):
    """Incremental confusion counts; ``score`` returns mIoU."""

    def __init__(self, num_classes=2, strict=False):
        self.num_classes = num_classes
        self.strict = strict

    def partial_fit(self, y_pred, y_true):
        check_scalar(self.num_classes, "num_classes", 1, integer=True)
        batch = metrics.accumulate(np.asarray(y_pred), np.asarray(y_true), self.num_classes)
        self.counts_ = batch if not hasattr(self, "counts_") else self.counts_.merge(batch)
        return self

    def fit(self, y_pred, y_true):
        if hasattr(self, "counts_"):
            del self.counts_
        return self.partial_fit(y_pred, y_true)

    def score(self, y_pred=None, y_true=None):
        if y_pred is not None:
            counts = metrics.accumulate(np.asarray(y_pred), np.asarray(y_true), self.num_classes)
        else:
            check_is_fitted(self, "counts_")
            counts = self.counts_
        return metrics.miou(counts, self.strict)

    def report(self, class_names=None):
        check_is_fitted(self, "counts_")
        return metrics.report(self.counts_, class_names, self.strict)
