from fractions import Fraction

import numpy as np
import pytest

from figforge.detection import (
    COCO_IOU_THRESHOLDS,
    EvalSettings,
    average_precision,
    count_matches,
    evaluate_detections,
    iou,
    match_greedy,
)
from figforge.errors import EvaluationError
from figforge.formats import Detection, DetectionSet
from figforge.layout import BBox

from instances import as_inputs, random_instance
from oracles import brute_ap, brute_counts, iou_exact


def dset(image_id, *items):
    return DetectionSet(image_id, tuple(Detection(BBox(*b), s) for b, s in items))


def test_iou_examples():
    assert iou(BBox(0, 0, 10, 10), BBox(0, 0, 10, 10)) == 1.0
    assert iou(BBox(0, 0, 10, 10), BBox(20, 20, 5, 5)) == 0.0
    assert iou(BBox(0, 0, 10, 10), BBox(5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou(BBox(0, 0, 10, 10), BBox(10, 0, 10, 10)) == 0.0  # touching edge


def test_iou_matches_exact_fraction():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        a = rng.integers(0, 20, 2).tolist() + rng.integers(1, 20, 2).tolist()
        b = rng.integers(0, 20, 2).tolist() + rng.integers(1, 20, 2).tolist()
        assert iou(BBox(*a), BBox(*b)) == pytest.approx(float(iou_exact(a, b)), abs=1e-15)
        assert iou(BBox(*a), BBox(*b)) == iou(BBox(*b), BBox(*a))


def test_match_examples():
    gt = [BBox(0, 0, 10, 10), BBox(20, 0, 10, 10)]
    perfect = dset("a", ((0, 0, 10, 10), 0.9), ((20, 0, 10, 10), 0.8))
    assert match_greedy(perfect, gt, 0.5) == {0: 0, 1: 1}

    one = [BBox(0, 0, 10, 10)]
    two = dset("a", ((50, 50, 5, 5), 0.3), ((0, 0, 10, 10), 0.9))
    assert match_greedy(two, one, 0.5) == {1: 0}
    assert match_greedy(DetectionSet("a"), gt, 0.5) == {}


def test_match_one_to_one_and_score_order():
    gt = [BBox(0, 0, 10, 10)]
    # both overlap; the higher-scored one wins even though it comes second
    d = dset("a", ((1, 0, 10, 10), 0.5), ((0, 0, 10, 10), 0.6))
    assert match_greedy(d, gt, 0.5) == {1: 0}
    # equal scores: input order decides
    d = dset("a", ((1, 0, 10, 10), 0.5), ((0, 0, 10, 10), 0.5))
    assert match_greedy(d, gt, 0.5) == {0: 0}


def test_ap_examples():
    gts = {"a": [BBox(0, 0, 10, 10)]}
    exact = [dset("a", ((0, 0, 10, 10), 1.0))]
    for t in COCO_IOU_THRESHOLDS:
        assert average_precision(exact, gts, t) == 1.0
    mixed = [dset("a", ((0, 0, 10, 10), 0.9), ((50, 50, 10, 10), 0.8))]
    assert average_precision(mixed, gts, 0.5) == 1.0
    # false positive ranked first halves precision everywhere
    flipped = [dset("a", ((0, 0, 10, 10), 0.8), ((50, 50, 10, 10), 0.9))]
    assert average_precision(flipped, gts, 0.5) == pytest.approx(0.5, abs=1e-15)


def test_report_examples():
    gts = {"a": [BBox(0, 0, 10, 10), BBox(20, 0, 10, 10)], "b": [BBox(5, 5, 30, 30)]}
    dets = [dset(k, *[(b.as_list(), 1.0) for b in v]) for k, v in gts.items()]
    rep = evaluate_detections(dets, gts)
    assert rep.map == 1.0 and rep.f1 == 1.0 and rep.ap50 == 1.0
    assert (rep.tp, rep.fp, rep.fn) == (3, 0, 0)

    gts = {"a": [BBox(0, 0, 10, 10)]}
    rep = evaluate_detections([dset("a", ((0, 0, 10, 10), 0.9), ((50, 50, 10, 10), 0.8))], gts)
    assert rep.precision == 0.5 and rep.recall == 1.0
    assert rep.f1 == 2 / 3
    assert set(rep.ap_per_threshold) == {f"{t:.2f}" for t in COCO_IOU_THRESHOLDS}


def test_score_threshold_drops_before_counting():
    gts = {"a": [BBox(0, 0, 10, 10)]}
    dets = [dset("a", ((0, 0, 10, 10), 0.9), ((50, 50, 10, 10), 0.2))]
    assert count_matches(dets, gts, 0.5, score_threshold=0.5) == (1, 0, 0)
    assert count_matches(dets, gts, 0.5) == (1, 1, 0)


def test_images_without_detections_count_as_misses():
    gts = {"a": [BBox(0, 0, 10, 10)], "b": [BBox(0, 0, 10, 10)]}
    rep = evaluate_detections([dset("a", ((0, 0, 10, 10), 0.9))], gts)
    assert (rep.tp, rep.fp, rep.fn) == (1, 0, 1)
    assert rep.ap50 == pytest.approx(51 / 101, abs=1e-15)


def test_errors():
    gts = {"a": [BBox(0, 0, 10, 10)]}
    with pytest.raises(EvaluationError, match="'x'"):
        evaluate_detections([dset("x", ((0, 0, 1, 1), 0.5)), dset("a")], gts)
    with pytest.raises(EvaluationError, match="ground-truth"):
        average_precision([], {"a": []}, 0.5)
    for bad in ([], [0.6, 0.5], [0.0], [1.2]):
        with pytest.raises(ValueError):
            EvalSettings(iou_thresholds=bad)
    with pytest.raises(ValueError):
        EvalSettings(f1_iou=0.0)


# ---------------------------------------------------------------- oracle


def check_against_oracle(images):
    dets, gts = as_inputs(images)
    rep = evaluate_detections(dets, gts)
    oracle_aps = [brute_ap(images, t) for t in COCO_IOU_THRESHOLDS]
    for t, ap in zip(COCO_IOU_THRESHOLDS, oracle_aps):
        assert abs(rep.ap_per_threshold[f"{t:.2f}"] - float(ap)) <= 1e-9
    assert abs(rep.map - float(sum(oracle_aps) / len(oracle_aps))) <= 1e-9
    tp, fp, fn = brute_counts(images, 0.5)
    assert (rep.tp, rep.fp, rep.fn) == (tp, fp, fn)
    p = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    r = Fraction(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r else Fraction(0)
    assert abs(rep.f1 - float(f1)) <= 1e-9


def test_oracle_equivalence_sample():
    rng = np.random.default_rng(11)
    for _ in range(200):
        check_against_oracle(random_instance(rng))


def test_monotone_score_transform_invariance():
    rng = np.random.default_rng(12)
    for _ in range(200):
        images = random_instance(rng)
        dets, gts = as_inputs(images)
        moved = [DetectionSet(d.image_id, tuple(Detection(b.bbox, b.score**3 * 0.5 + 0.1) for b in d.boxes))
                 for d in dets]
        a = evaluate_detections(dets, gts)
        b = evaluate_detections(moved, gts)
        assert a.ap_per_threshold == b.ap_per_threshold


def test_low_score_miss_never_helps():
    rng = np.random.default_rng(13)
    for _ in range(200):
        images = random_instance(rng)
        dets, gts = as_inputs(images)
        far = Detection(BBox(1000, 1000, 5, 5), 0.0)
        extra = [DetectionSet(dets[0].image_id, dets[0].boxes + (far,))] + dets[1:]
        for t in (0.5, 0.75):
            assert average_precision(extra, gts, t) <= average_precision(dets, gts, t)
        assert count_matches(extra, gts, 0.5)[0] == count_matches(dets, gts, 0.5)[0]
