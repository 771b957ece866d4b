"""Detection metrics: NMS, AP, precision-recall, oLRP and duplicate rate.

Inputs are per-image lists of :class:`Detection` and per-image
:class:`~hybridmatch.matching.GroundTruthSet`. Ranking is by descending
score with ties broken by ascending detection index (image-major order).
AP and oLRP are computed per class and averaged over the classes that have
ground truth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Box, as_box_array, cxcywh_to_xyxy, pairwise_iou
from .matching import GroundTruthSet


@dataclass(frozen=True)
class Detection:
    box: Box
    label: int
    score: float

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be finite in [0, 1], got {self.score}")


def _arrays(dets: Sequence[Detection]):
    if not dets:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0)
    boxes = as_box_array([d.box for d in dets])
    return boxes, np.array([d.label for d in dets], dtype=np.int64), np.array([d.score for d in dets], dtype=float)


def _rank(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, kind="stable")


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[int]:
    """Greedy per-class suppression; returns kept indices in rank order."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    boxes, labels, scores = _arrays(dets)
    if len(scores) == 0:
        return []
    order = _rank(scores)
    xyxy = cxcywh_to_xyxy(boxes)
    ious = pairwise_iou(xyxy, xyxy)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= (labels == labels[i]) & (ious[i] > iou_threshold)
    return keep


def duplicate_rate(dets: Sequence[Detection], score_cut: float = 0.3, iou_threshold: float = 0.5) -> float:
    """Share of detections scoring at least ``score_cut`` that NMS would remove."""
    above = [d for d in dets if d.score >= score_cut]
    if not above:
        return 0.0
    return 1.0 - len(nms(above, iou_threshold)) / len(above)


# ---------------------------------------------------------------------------
# greedy TP/FP labeling


@dataclass
class _Ranked:
    """Class-restricted detections in rank order with their match outcome."""

    scores: np.ndarray
    tp: np.ndarray
    iou: np.ndarray
    num_truths: int


def _label_detections(all_dets, all_truths, iou_threshold: float, label: Optional[int]) -> _Ranked:
    recs = []  # (score, global index, image, det index)
    per_image = []
    gidx = 0
    for img, (dets, gt) in enumerate(zip(all_dets, all_truths)):
        boxes, labels, scores = _arrays(dets)
        keep = np.ones(len(labels), dtype=bool) if label is None else labels == label
        gt_keep = np.ones(gt.m, dtype=bool) if label is None else gt.labels == label
        per_image.append((boxes, labels, gt.boxes[gt_keep], gt.labels[gt_keep]))
        for k in np.flatnonzero(keep):
            recs.append((scores[k], gidx + k, img, k))
        gidx += len(labels)
    num_truths = sum(len(p[3]) for p in per_image)
    recs.sort(key=lambda r: (-r[0], r[1]))

    ious = []
    for boxes, _, gboxes, _ in per_image:
        if len(boxes) and len(gboxes):
            ious.append(pairwise_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gboxes)))
        else:
            ious.append(np.zeros((len(boxes), len(gboxes))))
    taken = [np.zeros(len(p[3]), dtype=bool) for p in per_image]

    tp = np.zeros(len(recs), dtype=bool)
    best_iou = np.zeros(len(recs))
    for r, (_, _, img, k) in enumerate(recs):
        dlabel = per_image[img][1][k]
        cand = ious[img][k].copy()
        cand[taken[img] | (per_image[img][3] != dlabel)] = -1.0
        if cand.size == 0:
            continue
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[img][j] = True
            tp[r] = True
            best_iou[r] = cand[j]
    return _Ranked(np.array([r[0] for r in recs]), tp, best_iou, num_truths)


def _classes(all_truths) -> list[int]:
    present = set()
    for gt in all_truths:
        present.update(gt.labels.tolist())
    return sorted(present)


def pr_curve(all_dets, all_truths, iou_threshold: float = 0.5, label: Optional[int] = None):
    """``(recall, precision)`` after each detection in rank order.

    With ``label=None`` all classes share one ranking (matches still require
    equal labels). Returns ``None`` when there are no truths and no detections.
    """
    r = _label_detections(all_dets, all_truths, iou_threshold, label)
    if r.num_truths == 0 and len(r.tp) == 0:
        return None
    ctp = np.cumsum(r.tp)
    cfp = np.cumsum(~r.tp)
    recall = ctp / r.num_truths if r.num_truths else np.zeros(len(ctp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return list(zip(recall.tolist(), precision.tolist()))


def interpolated_ap(curve) -> float:
    """101-point interpolated AP of a precision-recall curve."""
    if not curve:
        return 0.0
    rec = np.array([c[0] for c in curve])
    prec = np.array([c[1] for c in curve])
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(rec, grid, side="left")
    sampled = np.where(idx < len(rec), envelope[np.minimum(idx, len(rec) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(all_dets, all_truths, iou_threshold: float = 0.5) -> Optional[float]:
    """Class-mean 101-point AP; ``None`` when there is neither truth nor detection."""
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    classes = _classes(all_truths)
    if not classes:
        if any(len(d) for d in all_dets):
            return 0.0
        return None
    return float(np.mean([interpolated_ap(pr_curve(all_dets, all_truths, iou_threshold, c)) for c in classes]))


# ---------------------------------------------------------------------------
# oLRP


def _olrp_single(r: _Ranked, tau: float):
    """Exact sweep over score cutoffs for one class; returns (lrp, loc, fp, fn)."""
    G = r.num_truths
    best = (1.0, 0.0, 0.0, 1.0)  # nothing kept: every truth missed; loc/FP undefined -> 0
    if len(r.tp) == 0:
        return best
    ctp = np.cumsum(r.tp)
    cfp = np.cumsum(~r.tp)
    cloc = np.cumsum(np.where(r.tp, 1 - r.iou, 0.0))
    # only the last detection of a block of equal scores is a valid cutoff
    ends = np.r_[r.scores[1:] != r.scores[:-1], True]
    for k in np.flatnonzero(ends):
        tp, fp = int(ctp[k]), int(cfp[k])
        fn = G - tp
        lrp = (cloc[k] / (1 - tau) + fp + fn) / (tp + fp + fn)
        if lrp < best[0]:
            loc = cloc[k] / tp if tp else 0.0
            best = (float(lrp), float(loc), fp / (tp + fp), fn / G)
    return best


def olrp(all_dets, all_truths, iou_threshold: float = 0.5):
    """Class-mean optimal LRP and its components at each class's optimal cutoff.

    Returns ``(total, loc, fp, fn)`` where loc is mean ``1 - IoU`` of true
    positives, fp is ``1 - precision`` and fn is ``1 - recall``; ``None`` with no truths.
    """
    classes = _classes(all_truths)
    if not classes:
        return None
    vals = np.array([_olrp_single(_label_detections(all_dets, all_truths, iou_threshold, c), iou_threshold)
                     for c in classes])
    return tuple(float(v) for v in vals.mean(axis=0))


# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    ap50: Optional[float]
    ap75: Optional[float]
    olrp: Optional[float]
    olrp_loc: Optional[float]
    olrp_fp: Optional[float]
    olrp_fn: Optional[float]
    duplicate_rate: float
    pr_curve: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


def evaluate(all_dets, all_truths, score_cut: float = 0.3, dup_iou: float = 0.5) -> EvalReport:
    ap50 = average_precision(all_dets, all_truths, 0.5)
    ap75 = average_precision(all_dets, all_truths, 0.75)
    lrp = olrp(all_dets, all_truths, 0.5)
    above = sum(1 for dets in all_dets for d in dets if d.score >= score_cut)
    removed = sum(
        len([d for d in dets if d.score >= score_cut]) - len(nms([d for d in dets if d.score >= score_cut], dup_iou))
        for dets in all_dets
    )
    curve = pr_curve(all_dets, all_truths, 0.5) or []
    return EvalReport(
        ap50=ap50,
        ap75=ap75,
        olrp=None if lrp is None else lrp[0],
        olrp_loc=None if lrp is None else lrp[1],
        olrp_fp=None if lrp is None else lrp[2],
        olrp_fn=None if lrp is None else lrp[3],
        duplicate_rate=removed / above if above else 0.0,
        pr_curve=[[r, p] for r, p in curve],
    )


def predictions_to_detections(class_scores: np.ndarray, boxes: np.ndarray) -> list[Detection]:
    """One detection per query: its arg-max class and that class's probability."""
    labels = np.argmax(class_scores, axis=1)
    scores = class_scores[np.arange(len(labels)), labels]
    return [Detection(Box(*map(float, b)), int(l), float(s)) for b, l, s in zip(boxes, labels, scores)]


def apply_nms(all_dets, iou_threshold: float = 0.5):
    return [[dets[i] for i in sorted(nms(dets, iou_threshold))] for dets in all_dets]


__all__ = [
    "Detection",
    "EvalReport",
    "apply_nms",
    "average_precision",
    "duplicate_rate",
    "evaluate",
    "interpolated_ap",
    "nms",
    "olrp",
    "pr_curve",
    "predictions_to_detections",
]
