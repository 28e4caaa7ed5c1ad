import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alsstrat.exceptions import ManifestError, RasterError, SamplingError
from alsstrat.geo import Crs, Polygon
from alsstrat.raster import LandCoverL1 as LC
from alsstrat.raster import RasterGrid, SlopeClass as SC, merge_grid_to_level1
from alsstrat.sampler import (
    MANIFEST_KEYS,
    JointDistribution,
    PatchLabel,
    build_manifest,
    derive_seed,
    inclusion_probabilities,
    inverse_probability_sample,
    joint_distribution,
    label_patches,
    label_patches_with_report,
    read_manifest,
    select_nlcd_year,
    uniform_sample,
)

UTM = Crs.utm(18)


def pool(counts, project="p"):
    labels = []
    k = 0
    for (lc, sc), n in counts.items():
        for _ in range(n):
            labels.append(PatchLabel((k * 500.0, 0.0, k * 500.0 + 500, 500.0), lc, sc, project, 2019, 32618))
            k += 1
    return labels


def grids(lc_band, sl_band, cell=50.0):
    lc = RasterGrid(0.0, lc_band.shape[0] * cell, cell, lc_band.astype(np.uint8), 0, UTM)
    sl = RasterGrid(0.0, sl_band.shape[0] * cell, cell, sl_band.astype(np.uint8), 0, UTM)
    return lc, sl


@pytest.mark.parametrize("year,expected", [(2019, 2019), (2020, 2021), (1995, 2001), (2030, 2021), (2005, 2006), (2012, 2013), (2009, 2008)])
def test_select_nlcd_year(year, expected):
    assert select_nlcd_year(year) == expected


def test_select_year_tie_toward_later():
    assert select_nlcd_year(2005, [2004, 2006]) == 2006
    with pytest.raises(ValueError):
        select_nlcd_year(2000, [])


def test_uniform_region_four_patches():
    lc, sl = grids(np.full((20, 20), LC.Forest), np.full((20, 20), SC.Flat))
    labels = label_patches(lc, sl, Polygon.from_bbox(0, 0, 1000, 1000), 500)
    assert len(labels) == 4
    assert {lab.joint_key for lab in labels} == {(LC.Forest, SC.Flat)}
    assert sorted(lab.bbox for lab in labels)[0] == (0.0, 0.0, 500.0, 500.0)


def test_modal_majority_from_level2_codes():
    band = np.full((10, 10), 42)
    band[:4, :] = 23  # 40% developed, 60% forest
    l2 = RasterGrid(0.0, 500.0, 50.0, band.astype(np.int32), 0, UTM)
    lc = merge_grid_to_level1(l2)
    sl = RasterGrid(0.0, 500.0, 50.0, np.full((10, 10), SC.Sloped, dtype=np.uint8), 0, UTM)
    (lab,) = label_patches(lc, sl, None, 500)
    assert lab.landcover is LC.Forest and lab.slope is SC.Sloped


def test_modal_tie_goes_to_lower_code_block():
    rng = np.random.default_rng(0)
    band = np.full(100, LC.Forest)
    band[rng.permutation(100)[:50]] = LC.Developed
    band = band.reshape(10, 10)
    # brute-force recount confirms a genuine tie
    c = Counter(band.ravel().tolist())
    assert c[LC.Developed] == c[LC.Forest] == 50
    lc, sl = grids(band, np.full((10, 10), SC.Flat))
    (lab,) = label_patches(lc, sl, None, 500)
    assert lab.landcover is LC.Developed


def test_drops_partial_outside_and_nodata():
    band = np.full((25, 25), LC.Developed)  # 1250 m -> 2 full patches per axis
    slope = np.full((25, 25), SC.Steep)
    band[:10, 10:] = 0  # upper-right patch: 100% nodata
    lc, sl = grids(band, slope)
    tri = Polygon([(0, 0), (1250, 0), (0, 1250), (0, 0)])
    labels, rep = label_patches_with_report(lc, sl, tri, 500)
    assert rep["formed"] == 4
    # upper-right patch centre (750, 1000) lies outside the triangle
    assert rep["dropped_outside"] == 1
    assert rep["labelled"] == 3
    assert rep["formed"] - rep["dropped_outside"] - rep["dropped_nodata"] == len(labels)


def test_nodata_threshold():
    band = np.full((10, 10), LC.Forest)
    band[:5, :] = 0
    lc, sl = grids(band, np.full((10, 10), SC.Flat))
    assert len(label_patches(lc, sl, None, 500)) == 1  # exactly 50% survives
    band[5, 0] = 0
    lc, sl = grids(band, np.full((10, 10), SC.Flat))
    assert len(label_patches(lc, sl, None, 500)) == 0


def test_patch_count_formula():
    for w, h, s in [(37, 23, 250.0), (20, 20, 500.0), (33, 17, 300.0)]:
        lc, sl = grids(np.full((h, w), LC.Forest), np.full((h, w), SC.Flat))
        labels = label_patches(lc, sl, None, s)
        assert len(labels) == int(w * 50 // s) * int(h * 50 // s)


def test_crs_mismatch():
    lc, sl = grids(np.full((10, 10), LC.Forest), np.full((10, 10), SC.Flat))
    other = RasterGrid(0.0, 500.0, 50.0, sl.band, 0, Crs.utm(17))
    with pytest.raises(RasterError):
        label_patches(lc, other)


def test_joint_distribution():
    labels = pool({(LC.Developed, SC.Flat): 8, (LC.Forest, SC.Steep): 2})
    d = joint_distribution(labels)
    assert d.p((LC.Developed, SC.Flat)) == 0.8
    assert d.p((LC.Forest, SC.Steep)) == 0.2
    assert sum(d.counts.values()) == d.total == 10
    assert joint_distribution(labels[:1]).p(labels[0].joint_key) == 1.0
    with pytest.raises(SamplingError):
        joint_distribution([])


def test_constant_weights_uniform_subset():
    labels = pool({(LC.Forest, SC.Flat): 50})
    sel = inverse_probability_sample(labels, n=10, seed=3)
    assert len(sel) == 10 and len(set(sel)) == 10
    hits = Counter()
    for s in range(2000):
        hits.update(lab.bbox for lab in inverse_probability_sample(labels, n=10, seed=s))
    freq = np.array([hits[lab.bbox] for lab in labels]) / 2000
    assert np.allclose(freq, 0.2, atol=0.04)


def test_n_larger_than_pool_returns_all():
    labels = pool({(LC.Forest, SC.Flat): 5, (LC.Developed, SC.Steep): 3})
    assert set(inverse_probability_sample(labels, n=100, seed=1)) == set(labels)


def test_filter_before_weighting():
    labels = pool({(LC.Water, SC.Flat): 1000, (LC.Forest, SC.Flat): 10, (LC.Forest, SC.Steep): 10})
    sel = inverse_probability_sample(labels, n=20, seed=0)
    assert all(lab.landcover is LC.Forest for lab in sel)
    assert len(sel) == 20
    assert inverse_probability_sample(pool({(LC.Water, SC.Flat): 5}), n=3, seed=0) == []


@pytest.mark.parametrize("method", ["systematic", "reservoir"])
def test_determinism(method):
    labels = pool({(LC.Developed, SC.Flat): 300, (LC.Forest, SC.Steep): 30})
    a = inverse_probability_sample(labels, n=40, seed=9, method=method)
    b = inverse_probability_sample(labels, n=40, seed=9, method=method)
    assert a == b
    assert len(set(a)) == len(a)


def test_monte_carlo_two_class_balance():
    labels = pool({(LC.Developed, SC.Flat): 900, (LC.Forest, SC.Steep): 100})
    totals = Counter()
    for seed in range(1000):
        totals.update(lab.joint_key for lab in inverse_probability_sample(labels, n=100, seed=seed))
    for key in [(LC.Developed, SC.Flat), (LC.Forest, SC.Steep)]:
        assert abs(totals[key] / 1000 - 50) <= 5


def test_balancing_ratio_vs_uniform():
    counts = {(LC.Developed, SC.Flat): 600, (LC.Developed, SC.Steep): 60, (LC.Forest, SC.Sloped): 40, (LC.Forest, SC.Flat): 30}
    labels = pool(counts)
    inv, uni = Counter(), Counter()
    for seed in range(500):
        inv.update(lab.joint_key for lab in inverse_probability_sample(labels, n=100, seed=seed))
        uni.update(lab.joint_key for lab in uniform_sample(labels, n=100, seed=seed))
    assert max(inv.values()) / min(inv.values()) <= 1.25
    assert max(uni.values()) / min(uni.values()) >= 0.9 * (600 / 30)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=60), st.integers(0, 70))
def test_inclusion_probabilities_properties(weights, n):
    pi = inclusion_probabilities(np.array(weights), n)
    assert np.all(pi >= 0) and np.all(pi <= 1 + 1e-12)
    assert pi.sum() == pytest.approx(min(n, len(weights)))


def test_derive_seed_stable():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_build_manifest_cap_and_summary():
    sel = {f"p{k}": pool({(LC.Developed, SC.Flat): 30, (LC.Forest, SC.Steep): 20}, f"p{k}") for k in range(3)}
    m = build_manifest(sel, cap=40, seed=5)
    assert len(m) == 120
    s = m.summary()
    assert s["counts"]["All"]["All"] == 120
    assert sum(s["counts"][r]["All"] for r in ("Flat", "Sloped", "Steep")) == 120
    assert s["per_project"] == {"p0": 40, "p1": 40, "p2": 40}
    assert s["counts"]["Flat"]["Developed"] == 90


def test_build_manifest_duplicate_bbox():
    labs = pool({(LC.Developed, SC.Flat): 2})
    with pytest.raises(ManifestError):
        build_manifest({"p": [labs[0], labs[1], labs[0]]})
    with pytest.raises(ManifestError):
        build_manifest({"p": labs}, cap=0)


def test_manifest_jsonl_format_and_roundtrip():
    sel = {"b": pool({(LC.Forest, SC.Sloped): 2}, "b"), "a": pool({(LC.Developed, SC.Flat): 1}, "a")}
    m = build_manifest(sel, source_urls={"a": "http://x/a.las"}, seed=1)
    data = m.to_jsonl()
    lines = data.decode().splitlines()
    assert len(lines) == 3
    first = json.loads(lines[0])
    assert list(first) == list(MANIFEST_KEYS)
    assert first["project_id"] == "a" and first["source_url"] == "http://x/a.las"
    assert '"minx": 0.000' in lines[0]
    assert build_manifest(sel, source_urls={"a": "http://x/a.las"}, seed=1).to_jsonl() == data
    back = read_manifest(data)
    assert back.entries == m.entries


def test_joint_distribution_restricted():
    d = JointDistribution({(LC.Water, SC.Flat): 5, (LC.Forest, SC.Flat): 5}, 10)
    r = d.restricted([LC.Forest])
    assert r.total == 5 and r.p((LC.Forest, SC.Flat)) == 1.0
