from collections import Counter

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from alsstrat.estimators import (
    BevMasker,
    ConfusionAccumulator,
    InverseProbabilitySampler,
    SlopeClassifier,
    Voxelizer,
    check_points,
    check_scalar,
    check_tile,
)
from alsstrat.geo import Crs
from alsstrat.metrics import accumulate, miou
from alsstrat.raster import LandCoverL1 as LC
from alsstrat.raster import RasterGrid, SlopeClass as SC
from alsstrat.sampler import PatchLabel

from .helpers import random_tile


def test_get_params_and_clone():
    for est in (SlopeClassifier((4.0, 20.0)), InverseProbabilitySampler(n=7, seed=3), Voxelizer(0.3),
                BevMasker(mask_ratio=0.5), ConfusionAccumulator(4, strict=True)):
        c = clone(est)
        assert c.get_params() == est.get_params()
    assert Voxelizer(0.3).set_params(voxel_size=0.5).voxel_size == 0.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SlopeClassifier().transform(None)
    with pytest.raises(NotFittedError):
        InverseProbabilitySampler().sample()


def test_slope_classifier_ramp():
    cols = np.arange(10) * 30.0
    dem = RasterGrid(0.0, 300.0, 30.0, np.tile(cols * 0.2, (10, 1)), -9999.0, Crs.utm(18))
    out = SlopeClassifier().fit().transform(dem)
    assert set(np.unique(out.band)) == {SC.Sloped}
    assert len(SlopeClassifier().fit_transform([dem, dem])) == 2
    with pytest.raises(ValueError):
        SlopeClassifier((20.0, 5.0)).fit()


def test_sampler_balances():
    labels = []
    k = 0
    for key, n in {(LC.Developed, SC.Flat): 300, (LC.Forest, SC.Steep): 30, (LC.Water, SC.Flat): 500}.items():
        for _ in range(n):
            labels.append(PatchLabel((k, 0, k + 1, 1), *key))
            k += 1
    est = InverseProbabilitySampler(n=40).fit(labels)
    assert len(est.candidates_) == 330 and est.distribution_.total == 330
    totals = Counter()
    for s in range(200):
        totals.update(lab.joint_key for lab in est.sample(seed=s))
    assert abs(totals[(LC.Developed, SC.Flat)] / 200 - 20) < 2
    assert est.sample() == est.sample()
    assert InverseProbabilitySampler(n=5, allowed_landcover=["Water"]).fit_sample(labels)[0].landcover is LC.Water


def test_voxelizer_and_masker():
    t = random_tile(3000, seed=2, side=144.0)
    g = Voxelizer(0.6).fit().transform(t)
    assert g.counts.max() <= 5
    assert len(Voxelizer().fit().transform([t, t.xyz])) == 2
    m = BevMasker(mask_ratio=0.5).fit().transform(t)
    assert m.visible_voxels is not None
    assert len(m.masked_point_index) + len(m.visible_point_index) == len(t)


def test_confusion_accumulator():
    rng = np.random.default_rng(0)
    p, y = rng.integers(0, 3, 500), rng.integers(0, 3, 500)
    est = ConfusionAccumulator(3)
    for a in range(0, 500, 100):
        est.partial_fit(p[a : a + 100], y[a : a + 100])
    assert est.score() == pytest.approx(miou(accumulate(p, y, 3)))
    assert est.fit(p[:10], y[:10]).counts_.total == 10
    assert est.report()["total"] == 10


def test_validation_helpers():
    assert check_points([[1, 2, 3]]).dtype == np.float64
    with pytest.raises(ValueError):
        check_points([[1, 2]])
    assert check_tile(np.array([[0, 0, 0], [2, 3, 1.0]])).bounds == (0, 0, 2, 3)
    with pytest.raises(TypeError):
        check_scalar("a", "x")
    with pytest.raises(ValueError):
        check_scalar(0, "x", 0, include_low=False)
