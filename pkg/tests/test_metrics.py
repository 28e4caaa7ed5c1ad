import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alsstrat.exceptions import MetricsError
from alsstrat.metrics import (
    ConfusionCounts,
    accumulate,
    iou,
    mean_of_ious,
    miou,
    oa,
    pair_labels,
    read_labels,
    report,
)

TABLE5_OURS = [78.5, 63.7, 92.2, 62.0, 82.2, 97.5, 88.2, 79.0, 93.7, 0.0, 93.3, 85.6, 93.3]


def brute_tallies(pred, truth, c):
    tp, fp, fn = [0] * c, [0] * c, [0] * c
    for p, t in zip(pred, truth):
        if p == t:
            tp[p] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    return tp, fp, fn


def test_perfect_and_single_error():
    c = accumulate([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert c.fp.tolist() == [0, 0, 0] and c.fn.tolist() == [0, 0, 0]
    assert oa(c) == 1.0
    c = accumulate([1], [2], 3)
    assert c.fp.tolist() == [0, 1, 0] and c.fn.tolist() == [0, 0, 1]


def test_iou_examples():
    m = np.zeros((3, 3), dtype=np.int64)
    m[0, 0], m[1, 0], m[0, 1] = 50, 25, 25
    c = ConfusionCounts(m)
    assert iou(c, 0) == 0.5
    assert math.isnan(iou(c, 2))
    assert iou(accumulate([0] * 5, [0] * 5, 2), 0) == 1.0
    with pytest.raises(MetricsError):
        iou(c, 3)


def test_miou_examples():
    assert mean_of_ious([1.0, 0.0]) == 0.5
    assert mean_of_ious([0.3] * 7) == pytest.approx(0.3)
    assert mean_of_ious([v / 100 for v in TABLE5_OURS], strict=True) * 100 == pytest.approx(77.6, abs=0.05)
    assert mean_of_ious([1.0, math.nan]) == 1.0
    assert mean_of_ious([1.0, math.nan], strict=True) == 0.5
    with pytest.raises(MetricsError):
        mean_of_ious([math.nan])


def test_brute_force_oracle_10k():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 9, 10_000)
    truth = rng.integers(0, 9, 10_000)
    c = accumulate(pred, truth, 9)
    tp, fp, fn = brute_tallies(pred.tolist(), truth.tolist(), 9)
    assert c.tp.tolist() == tp and c.fp.tolist() == fp and c.fn.tolist() == fn
    assert c.total == 10_000
    for i in range(9):
        assert iou(c, i) == pytest.approx(tp[i] / (tp[i] + fp[i] + fn[i]), rel=1e-12)
    assert oa(c) == sum(tp) / 10_000


def test_imbalanced_high_oa_low_miou():
    truth = [0] * 90 + [1] * 5 + [2] * 5
    pred = [0] * 100
    c = accumulate(pred, truth, 3)
    assert oa(c) == pytest.approx(0.9)
    assert miou(c) < 0.5
    tp, fp, fn = brute_tallies(pred, truth, 3)
    assert tp[0] / (tp[0] + fp[0] + fn[0]) == pytest.approx(0.9)


def test_errors():
    with pytest.raises(MetricsError):
        accumulate([0, 1], [0], 2)
    with pytest.raises(MetricsError, match="outside"):
        accumulate([0, 5], [0, 1], 2)
    with pytest.raises(MetricsError):
        oa(ConfusionCounts.zeros(3))
    with pytest.raises(MetricsError):
        accumulate([0], [0], 2).merge(ConfusionCounts.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=200), st.integers(0, 10_000))
def test_metric_properties(pairs, seed):
    pred, truth = (np.array(v) for v in zip(*pairs))
    c = accumulate(pred, truth, 5)
    ious = [v for v in (iou(c, i) for i in range(5)) if not math.isnan(v)]
    assert all(0 <= v <= 1 for v in ious)
    assert miou(c) <= max(ious) + 1e-12
    assert 0 <= oa(c) <= 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pred))
    c2 = accumulate(pred[order], truth[order], 5)
    assert np.array_equal(c.matrix, c2.matrix)
    relabel = rng.permutation(5)
    c3 = accumulate(relabel[pred], relabel[truth], 5)
    assert miou(c3) == pytest.approx(miou(c)) and oa(c3) == oa(c)
    half = len(pred) // 2
    merged = accumulate(pred[:half], truth[:half], 5).merge(accumulate(pred[half:], truth[half:], 5))
    assert np.array_equal(merged.matrix, c.matrix)


def test_report_json():
    c = accumulate([0, 1, 1], [0, 1, 0], 3)
    r = report(c, ["a", "b", "c"])
    json.dumps(r)
    assert r["undefined_classes"] == ["c"]
    assert r["per_class"]["c"]["iou"] is None
    assert r["oa_percent"] == 66.7
    assert report(c, strict=True)["miou"] == pytest.approx((0.5 + 0.5 + 0) / 3)


def test_label_files(tmp_path):
    (tmp_path / "p.csv").write_text("id,label\na,1\nb,2\n")
    (tmp_path / "t.jsonl").write_text('{"id": "b", "label": 2}\n{"id": "a", "label": 0}\n')
    pred, truth = pair_labels(read_labels(tmp_path / "p.csv"), read_labels(tmp_path / "t.jsonl"))
    assert pred.tolist() == [1, 2] and truth.tolist() == [0, 2]
    (tmp_path / "bad.csv").write_text("id,label\na,x\n")
    with pytest.raises(MetricsError):
        read_labels(tmp_path / "bad.csv")
    (tmp_path / "dup.csv").write_text("id,label\na,1\na,2\n")
    with pytest.raises(MetricsError, match="duplicate"):
        read_labels(tmp_path / "dup.csv")
    with pytest.raises(MetricsError, match="lack"):
        pair_labels({"a": 1}, {"a": 1, "b": 2})
