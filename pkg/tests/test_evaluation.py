import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmatch.evaluation import (
    Detection,
    apply_nms,
    average_precision,
    duplicate_rate,
    evaluate,
    interpolated_ap,
    nms,
    olrp,
    pr_curve,
    predictions_to_detections,
)
from hybridmatch.geometry import Box, iou, to_corners
from hybridmatch.matching import GroundTruthSet

KEYS = ["ap50", "ap75", "olrp", "olrp_loc", "olrp_fp", "olrp_fn", "duplicate_rate", "pr_curve"]


def det(cx, cy, w, h, label=0, score=0.9):
    return Detection(Box(cx, cy, w, h), label, score)


def truth(rows, labels):
    return GroundTruthSet(np.array(rows, dtype=float), labels)


def random_detections(rng, count, C=3):
    out = []
    for _ in range(count):
        c = rng.uniform(0.15, 0.85, 2)
        wh = rng.uniform(0.05, 0.3, 2)
        out.append(Detection(Box(*c, *wh), int(rng.integers(C)), float(rng.choice([0.2, 0.4, 0.6, 0.8, 0.95]))))
    return out


def perturbed_scene(rng, m=4, C=3, jitter=0.03, extra=3):
    c = rng.uniform(0.2, 0.8, (m, 2))
    wh = rng.uniform(0.1, 0.3, (m, 2))
    gt = GroundTruthSet(np.c_[c, wh], rng.integers(0, C, m), C)
    dets = [Detection(Box(*(b + rng.normal(0, jitter, 4) * [1, 1, 0.2, 0.2])), int(l), float(rng.uniform(0.3, 1)))
            for b, l in zip(gt.boxes, gt.labels)]
    return dets + random_detections(rng, extra, C), gt


def perfect_scene(rng, m=5, C=3):
    wh = rng.uniform(0.05, 0.2, (m, 2))
    c = rng.uniform(wh / 2, 1 - wh / 2)
    gt = GroundTruthSet(np.c_[c, wh], rng.integers(0, C, m), C)
    return [Detection(Box(*b), int(l), 0.99) for b, l in zip(gt.boxes, gt.labels)], gt


# ---------------------------------------------------------------------------
# NMS


def test_nms_hand_case():
    dets = [det(0.5, 0.5, 0.2, 0.2, score=0.9), det(0.51, 0.5, 0.2, 0.2, score=0.8),
            det(0.51, 0.5, 0.2, 0.2, label=1, score=0.7), det(0.9, 0.9, 0.1, 0.1, score=0.6)]
    assert nms(dets, 0.5) == [0, 2, 3]


def test_nms_threshold_is_strict():
    a, b = det(0.25, 0.5, 0.5, 1.0, score=0.9), det(0.5, 0.5, 0.5, 1.0, score=0.8)
    # IoU is exactly 1/3
    assert iou(to_corners(a.box), to_corners(b.box)) == pytest.approx(1 / 3, abs=1e-15)
    assert nms([a, b], 0.4) == [0, 1]
    assert nms([a, b], 0.3) == [0]


def test_nms_empty_and_bad_threshold():
    assert nms([], 0.5) == []
    with pytest.raises(ValueError):
        nms([det(0.5, 0.5, 0.1, 0.1)], 1.5)


def test_nms_idempotent_and_sound_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        dets = random_detections(rng, int(rng.integers(0, 25)))
        once = [dets[i] for i in nms(dets, 0.5)]
        assert len(nms(once, 0.5)) == len(once)
        for i, a in enumerate(once):
            for b in once[i + 1:]:
                if a.label == b.label:
                    assert iou(to_corners(a.box), to_corners(b.box)) <= 0.5
        kept = set(nms(dets, 0.5))
        for k, d in enumerate(dets):
            if k not in kept:
                assert any(dets[j].label == d.label and dets[j].score >= d.score
                           and iou(to_corners(dets[j].box), to_corners(d.box)) > 0.5 for j in kept)


def test_duplicate_rate():
    dets = [det(0.5, 0.5, 0.2, 0.2, score=0.9), det(0.5, 0.5, 0.2, 0.2, score=0.8), det(0.2, 0.2, 0.1, 0.1, score=0.1)]
    assert duplicate_rate(dets, score_cut=0.3) == 0.5
    assert duplicate_rate(dets[2:], score_cut=0.3) == 0.0


# ---------------------------------------------------------------------------
# AP and PR curves


def test_ap_hand_case():
    gt = truth([[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], [0, 0])
    dets = [det(0.2, 0.2, 0.2, 0.2, score=0.9), det(0.45, 0.45, 0.1, 0.1, score=0.8),
            det(0.7, 0.7, 0.2, 0.2, score=0.7)]
    curve = pr_curve([dets], [gt], 0.5)
    assert curve == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    assert average_precision([dets], [gt], 0.5) == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-15)


def test_ap_class_mean_and_label_requirement():
    gt = truth([[0.2, 0.2, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], [0, 1])
    good = [det(0.2, 0.2, 0.2, 0.2, label=0), det(0.7, 0.7, 0.2, 0.2, label=1)]
    wrong = [det(0.2, 0.2, 0.2, 0.2, label=0), det(0.7, 0.7, 0.2, 0.2, label=0)]
    assert average_precision([good], [gt]) == 1.0
    assert average_precision([wrong], [gt]) == pytest.approx(0.5)


def test_ap_duplicate_is_false_positive():
    gt = truth([[0.5, 0.5, 0.2, 0.2]], [0])
    dets = [det(0.5, 0.5, 0.2, 0.2, score=0.9), det(0.5, 0.5, 0.2, 0.2, score=0.8)]
    assert pr_curve([dets], [gt]) == [(1.0, 1.0), (1.0, 0.5)]


def test_ap_no_truth_cases():
    empty = GroundTruthSet(np.zeros((0, 4)), [])
    assert average_precision([[]], [empty]) is None
    assert average_precision([[det(0.5, 0.5, 0.1, 0.1)]], [empty]) == 0.0


def test_ap_consistent_with_pr_curve():
    rng = np.random.default_rng(1)
    for _ in range(30):
        dets, gt = perturbed_scene(rng, C=1)
        dets = [Detection(d.box, 0, d.score) for d in dets]
        gt = GroundTruthSet(gt.boxes, np.zeros(gt.m, dtype=int), 1)
        assert average_precision([dets], [gt]) == interpolated_ap(pr_curve([dets], [gt], label=0))


def test_ap_unchanged_by_trailing_false_positive():
    rng = np.random.default_rng(2)
    for _ in range(30):
        dets, gt = perturbed_scene(rng)
        tail = Detection(Box(0.05, 0.05, 0.02, 0.02), int(gt.labels[0]), 0.0)
        a = average_precision([dets], [gt])
        assert average_precision([dets + [tail]], [gt]) == a
        assert 0 <= a <= 1


def test_ap_non_decreasing_with_extra_top_true_positive():
    # a top-ranked exact hit on a truth nobody else claims can only raise precision
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(40):
        dets, gt = perturbed_scene(rng, C=1, extra=2)
        rest = dets[1:]
        extra = Detection(Box(*gt.boxes[0]), int(gt.labels[0]), 1.0)
        before, after = pr_curve([rest], [gt]), pr_curve([[extra] + rest], [gt])
        if round(after[-1][0] * gt.m) != round(before[-1][0] * gt.m) + 1:
            continue
        checked += 1
        assert average_precision([[extra] + rest], [gt]) >= average_precision([rest], [gt])
    assert checked >= 20


def test_perfect_predictions():
    rng = np.random.default_rng(4)
    scenes = [perfect_scene(rng) for _ in range(5)]
    dets, gts = [s[0] for s in scenes], [s[1] for s in scenes]
    rep = evaluate(dets, gts)
    assert rep.ap50 == 1.0 and rep.ap75 == 1.0
    assert rep.olrp == 0.0 and rep.olrp_loc == 0.0 and rep.olrp_fp == 0.0 and rep.olrp_fn == 0.0
    assert rep.duplicate_rate == 0.0


# ---------------------------------------------------------------------------
# oLRP


def brute_olrp_single(dets, gts, label, tau):
    """Recompute LRP from scratch at every cutoff; oracle for the sweep."""
    G = sum(int(np.sum(g.labels == label)) for g in gts)
    cutoffs = sorted({d.score for ds in dets for d in ds if d.label == label}, reverse=True)
    best = (1.0, 0.0, 0.0, 1.0)
    for s in cutoffs:
        kept = [[d for d in ds if d.label == label and d.score >= s] for ds in dets]
        tp = fp = 0
        loc = 0.0
        flat = [(img, k) for img, ds in enumerate(kept) for k in range(len(ds))]
        order = sorted(((kept[img][k].score, gi, img, k) for gi, (img, k) in enumerate(flat)),
                       key=lambda r: (-r[0], r[1]))
        taken = [set() for _ in gts]
        for _, _, img, k in order:
            d = kept[img][k]
            best_j, best_iou = -1, -1.0
            for j, (b, l) in enumerate(zip(gts[img].boxes, gts[img].labels)):
                if l != label or j in taken[img]:
                    continue
                v = iou(to_corners(d.box), to_corners(Box(*b)))
                if v > best_iou:
                    best_j, best_iou = j, v
            if best_j >= 0 and best_iou >= tau:
                taken[img].add(best_j)
                tp += 1
                loc += 1 - best_iou
            else:
                fp += 1
        fn = G - tp
        lrp = (loc / (1 - tau) + fp + fn) / (tp + fp + fn)
        if lrp < best[0]:
            best = (lrp, loc / tp if tp else 0.0, fp / (tp + fp), fn / G)
    return best


def test_olrp_matches_brute_force_sweep():
    rng = np.random.default_rng(5)
    for _ in range(25):
        scenes = [perturbed_scene(rng, m=int(rng.integers(1, 5)), jitter=0.05) for _ in range(3)]
        dets, gts = [s[0] for s in scenes], [s[1] for s in scenes]
        classes = sorted({int(l) for g in gts for l in g.labels})
        want = np.mean([brute_olrp_single(dets, gts, c, 0.5) for c in classes], axis=0)
        np.testing.assert_allclose(olrp(dets, gts, 0.5), want, rtol=0, atol=1e-12)


def test_olrp_no_detections():
    gt = truth([[0.5, 0.5, 0.2, 0.2]], [0])
    assert olrp([[]], [gt]) == (1.0, 0.0, 0.0, 1.0)


def test_olrp_zero_only_when_perfect():
    gt = truth([[0.5, 0.5, 0.2, 0.2]], [0])
    assert olrp([[det(0.5, 0.5, 0.2, 0.2)]], [gt])[0] == 0.0
    assert olrp([[det(0.51, 0.5, 0.2, 0.2)]], [gt])[0] > 0.0
    assert olrp([[det(0.5, 0.5, 0.2, 0.2), det(0.2, 0.2, 0.1, 0.1, score=0.95)]], [gt])[0] > 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_olrp_components_in_range(seed):
    rng = np.random.default_rng(seed)
    dets, gt = perturbed_scene(rng, jitter=0.05)
    total, loc, fp, fn = olrp([dets], [gt])
    assert 0 <= total <= 1 and 0 <= loc <= 0.5 and 0 <= fp <= 1 and 0 <= fn <= 1


# ---------------------------------------------------------------------------
# report


def test_report_json_keys_and_values():
    rng = np.random.default_rng(6)
    dets, gt = perturbed_scene(rng)
    rep = evaluate([dets], [gt])
    data = json.loads(rep.to_json())
    assert list(data) == KEYS
    assert all(isinstance(p, list) and len(p) == 2 for p in data["pr_curve"])
    assert 0 <= data["ap50"] <= 1 and min(data["olrp_loc"], data["olrp_fp"], data["olrp_fn"]) >= 0


def test_predictions_to_detections_and_apply_nms():
    scores = np.array([[0.1, 0.7], [0.6, 0.2]])
    boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])
    dets = predictions_to_detections(scores, boxes)
    assert [(d.label, d.score) for d in dets] == [(1, 0.7), (0, 0.6)]
    same = predictions_to_detections(np.array([[0.7], [0.6]]), boxes)
    assert len(apply_nms([same])[0]) == 1


def test_detection_score_validated():
    with pytest.raises(ValueError):
        det(0.5, 0.5, 0.1, 0.1, score=1.5)
