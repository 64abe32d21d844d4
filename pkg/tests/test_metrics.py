"""Confusion accumulation, mIoU, and the retrieval-rate metric."""
import numpy as np
import pytest

from ciss import (
    ConfusionAccumulator,
    LabelGrid,
    ValidationError,
    accumulate,
    evaluation_report,
    iou_per_class,
    miou,
    parse_layout,
    pseudo_label_retrieval_rate,
)


def g(values, width=None):
    values = list(values)
    width = width or len(values)
    return LabelGrid(width=width, height=len(values) // width, data=np.array(values, dtype=np.uint8))


def brute_force_iou(pred: LabelGrid, gt: LabelGrid, classes) -> dict:
    """Independent per-pixel counter used as the oracle."""
    out = {}
    for c in classes:
        tp = fp = fn = 0
        for p, t in zip(pred.data.tolist(), gt.data.tolist()):
            if t == 255:
                continue
            if p == c and t == c:
                tp += 1
            elif p == c and t != c:
                fp += 1
            elif p != c and t == c:
                fn += 1
        out[c] = None if tp + fp + fn == 0 else 100.0 * tp / (tp + fp + fn)
    return out


def test_perfect_prediction_has_no_errors():
    grid = g([1, 2, 0, 255])
    acc = accumulate(grid, grid)
    for c in (0, 1, 2):
        tp, fp, fn = acc.counts(c)
        assert fp == 0 and fn == 0
    assert miou(acc, {1, 2}) == 100.0


def test_hand_counted_two_by_two():
    pred = g([1, 1, 2, 0], width=2)
    gt = g([1, 2, 2, 0], width=2)
    acc = accumulate(pred, gt)
    assert acc.counts(1) == (1, 1, 0)
    assert acc.counts(2) == (1, 0, 1)
    assert miou(acc, {1, 2}) == pytest.approx(50.0)


def test_all_ignore_changes_nothing():
    pred = g([1, 2])
    gt = g([255, 255])
    acc = accumulate(pred, gt)
    assert acc.tp.sum() == acc.fp.sum() == acc.fn.sum() == 0


def test_dimension_mismatch_rejected():
    with pytest.raises(ValidationError):
        accumulate(g([1, 2]), g([1, 2, 0]))


def test_absent_class_is_null_and_counts_zero():
    pred = g([1, 1])
    gt = g([1, 1])
    per = iou_per_class(accumulate(pred, gt), {1, 2})
    assert per[1] == 100.0 and per[2] is None
    assert miou(accumulate(pred, gt), {1, 2}) == pytest.approx(50.0)


def test_empty_class_set_rejected():
    with pytest.raises(ValidationError):
        miou(ConfusionAccumulator(), set())


@pytest.mark.parametrize("seed", range(8))
def test_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    pred = g(rng.integers(0, 4, size=64).tolist(), width=8)
    gt_values = rng.integers(0, 4, size=64)
    gt_values[rng.random(64) < 0.1] = 255
    gt = g(gt_values.tolist(), width=8)
    acc = accumulate(pred, gt)
    expected = brute_force_iou(pred, gt, range(4))
    got = iou_per_class(acc, range(4))
    for c in range(4):
        if expected[c] is None:
            assert got[c] is None
        else:
            assert got[c] == pytest.approx(expected[c], abs=1e-12)


def test_merge_equals_sequential_accumulation():
    rng = np.random.default_rng(12)
    grids = [
        (g(rng.integers(0, 3, 16).tolist(), width=4), g(rng.integers(0, 3, 16).tolist(), width=4))
        for _ in range(6)
    ]
    sequential = ConfusionAccumulator()
    for pred, gt in grids:
        accumulate(pred, gt, sequential)
    left = ConfusionAccumulator()
    right = ConfusionAccumulator()
    for pred, gt in grids[:3]:
        accumulate(pred, gt, left)
    for pred, gt in grids[3:]:
        accumulate(pred, gt, right)
    merged = left + right
    assert np.array_equal(merged.tp, sequential.tp)
    assert np.array_equal(merged.fp, sequential.fp)
    assert np.array_equal(merged.fn, sequential.fn)
    assert miou(merged, {0, 1, 2}) == miou(sequential, {0, 1, 2})


class TestRetrievalRate:
    def test_perfect_pseudo_labels_score_100(self):
        pairs = []
        rng = np.random.default_rng(3)
        for _ in range(5):
            grid = g(rng.integers(0, 3, 20).tolist(), width=5)
            pairs.append((grid, grid))
        assert pseudo_label_retrieval_rate(pairs, {1, 2}) == 100.0

    def test_all_background_closed_form(self):
        # oracle holds every old class; the only defined-positive class is bg
        oracle = g([1, 2, 0, 0, 0])
        blank = g([0, 0, 0, 0, 0])
        # bg: tp=3, fp=2, fn=0 -> 60; classes 1, 2: IoU 0; mean over 3 classes
        value = pseudo_label_retrieval_rate([(oracle, blank)], {1, 2})
        assert value == pytest.approx((60.0 + 0.0 + 0.0) / 3)

    def test_dataset_mean_of_per_image_scores(self):
        # image A: class 1 IoU 60, bg IoU 100 -> 80
        oracle_a = g([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        pseudo_a = g([1, 1, 1, 9, 9, 0, 0, 0, 0, 0])
        # image B: class 1 IoU 20, bg IoU 100 -> 60
        oracle_b = g([1, 1, 1, 1, 1, 0, 0, 0, 0, 0])
        pseudo_b = g([1, 9, 9, 9, 9, 0, 0, 0, 0, 0])
        value = pseudo_label_retrieval_rate([(oracle_a, pseudo_a), (oracle_b, pseudo_b)], {1})
        assert value == pytest.approx(70.0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(9)
        pairs = [
            (g(rng.integers(0, 3, 12).tolist(), width=4), g(rng.integers(0, 3, 12).tolist(), width=4))
            for _ in range(5)
        ]
        forward = pseudo_label_retrieval_rate(pairs, {1, 2})
        backward = pseudo_label_retrieval_rate(list(reversed(pairs)), {1, 2})
        assert forward == pytest.approx(backward)

    def test_pixels_outside_measured_classes_do_not_leak(self):
        # relabeling unmeasured pixels to a current-task class leaves the
        # measured counts alone as long as they stay outside the measured set
        oracle = g([1, 0, 7, 7])
        pseudo = g([1, 0, 7, 7])
        moved = g([1, 0, 9, 9])
        base = pseudo_label_retrieval_rate([(oracle, pseudo)], {1})
        assert base == pseudo_label_retrieval_rate([(oracle, moved)], {1})

    def test_empty_input_rejected(self):
        with pytest.raises(ValidationError):
            pseudo_label_retrieval_rate([], {1})


def test_evaluation_report_groups():
    spec = parse_layout("2-1", 3)
    pred = g([1, 2, 3, 0])
    gt = g([1, 2, 3, 0])
    report = evaluation_report(accumulate(pred, gt), spec)
    assert report["miou_groups"]["base"] == 100.0
    assert report["miou_groups"]["incremental"] == 100.0
    assert report["miou_groups"]["all"] == 100.0
    assert report["per_class_iou"]["0"] == 100.0
    single = parse_layout("3-3", 3)
    report = evaluation_report(accumulate(pred, gt), single)
    assert report["miou_groups"]["incremental"] is None
