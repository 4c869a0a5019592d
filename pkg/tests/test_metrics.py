import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cloudfcn.errors import InputError, ShapeError
from cloudfcn.metrics import ConfusionCounts, MetricReport, aggregate, compute_metrics, confusion
from cloudfcn.raster_io import MaskGrid
from oracles import confusion_loop


def test_reference_counts():
    m = compute_metrics(ConfusionCounts(tp=6, tn=90, fp=2, fn=2))
    assert m.jaccard == pytest.approx(0.6)
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.75)
    assert m.overall_accuracy == pytest.approx(0.96)


def test_hand_made_4x4_masks():
    pred = np.zeros((4, 4), bool)
    truth = np.zeros((4, 4), bool)
    pred[0, :4] = True  # 4 predicted
    truth[0, :3] = True
    truth[1, 0] = True  # 4 true, 3 shared
    c = confusion(MaskGrid(pred), MaskGrid(truth))
    assert (c.tp, c.tn, c.fp, c.fn) == (3, 11, 1, 1)
    m = compute_metrics(c)
    assert (m.jaccard, m.precision, m.recall, m.overall_accuracy) == (0.6, 0.75, 0.75, 0.875)


def test_undefined_ratios():
    m = compute_metrics(ConfusionCounts(tn=5))
    assert m.jaccard is None and m.precision is None and m.recall is None
    assert m.overall_accuracy == 1.0


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2), bool), np.zeros((2, 3), bool))


@settings(max_examples=80, deadline=None)
@given(
    st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(
        lambda s: st.tuples(hnp.arrays(bool, s), hnp.arrays(bool, s))
    )
)
def test_confusion_matches_loop_and_identities(masks):
    pred, truth = masks
    c = confusion(pred, truth)
    assert (c.tp, c.tn, c.fp, c.fn) == confusion_loop(pred, truth)
    assert c.total == pred.size
    m = compute_metrics(c)
    if m.jaccard is not None and m.precision is not None and m.recall is not None:
        assert m.jaccard <= min(m.precision, m.recall) + 1e-12
    for v in m.as_dict().values():
        assert v is None or 0 <= v <= 1


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(bool, (5, 5)))
def test_self_comparison_is_perfect(mask):
    m = compute_metrics(confusion(mask, mask))
    assert m.overall_accuracy == 1.0
    if mask.any():
        assert m.jaccard == m.precision == m.recall == 1.0


def test_pooled_versus_mean():
    a = ConfusionCounts(tp=1, tn=0, fp=0, fn=3)  # jaccard 1/4
    b = ConfusionCounts(tp=3, tn=0, fp=1, fn=0)  # jaccard 3/4
    assert aggregate([a, b], "pooled").jaccard == pytest.approx(4 / 8)
    assert aggregate([a, b], "mean").jaccard == pytest.approx(0.5)
    half = ConfusionCounts(tp=1, fn=1)  # jaccard 1/2
    three_quarters = ConfusionCounts(tp=3, fn=1)  # jaccard 3/4
    assert aggregate([half, three_quarters], "pooled").jaccard == pytest.approx(4 / 6)
    assert aggregate([half, three_quarters], "mean").jaccard == pytest.approx(0.625)


def test_mean_skips_undefined():
    m = aggregate([ConfusionCounts(tn=4), ConfusionCounts(tp=1, fp=1)], "mean")
    assert m.jaccard == 0.5 and m.recall == 1.0


def test_aggregate_errors():
    with pytest.raises(InputError):
        aggregate([])
    with pytest.raises(InputError):
        aggregate([MetricReport(1, 1, 1, 1)], "pooled")
    with pytest.raises(InputError):
        aggregate([ConfusionCounts()], "median")


def test_counts_add():
    assert ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(1, 1, 1, 1) == ConfusionCounts(2, 3, 4, 5)
