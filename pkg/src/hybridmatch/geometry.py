"""Box conversions, IoU / GIoU and pairwise cost geometry.

Boxes are stored in normalized center-size form ``(cx, cy, w, h)``. Area
arithmetic runs on corner form ``(x0, y0, x1, y1)``. The scalar functions and
the vectorized ones perform the same floating point operations in the same
order, so a pairwise matrix equals the corresponding scalar calls bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateGeometryError, InvalidGeometryError


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidGeometryError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidGeometryError(f"box must have positive size, got w={self.w} h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class CornerBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidGeometryError(f"non-finite box {vals}")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise InvalidGeometryError(f"corners out of order: {vals}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


BoxesLike = Union[np.ndarray, Sequence[Box]]


def to_corners(b: Box) -> CornerBox:
    hw = 0.5 * b.w
    hh = 0.5 * b.h
    return CornerBox(b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)


def from_corners(c: CornerBox) -> Box:
    return Box(0.5 * (c.x0 + c.x1), 0.5 * (c.y0 + c.y1), c.x1 - c.x0, c.y1 - c.y0)


def iou(a: CornerBox, b: CornerBox) -> float:
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    union = area_a + area_b - inter
    if not union > 0:
        raise DegenerateGeometryError("zero-area union")
    return inter / union


def giou(a: CornerBox, b: CornerBox) -> float:
    """Generalized IoU in [-1, 1]; never larger than :func:`iou`."""
    iw = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    ih = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = iw * ih
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    union = area_a + area_b - inter
    ew = max(a.x1, b.x1) - min(a.x0, b.x0)
    eh = max(a.y1, b.y1) - min(a.y0, b.y0)
    enclosing = ew * eh
    if not union > 0 or not enclosing > 0:
        raise DegenerateGeometryError("zero-area union or enclosing box")
    # rounding can push union a hair above the enclosing area
    return inter / union - max(0.0, enclosing - union) / enclosing


# ---------------------------------------------------------------------------
# array versions, boxes as (N, 4) float64


def as_box_array(boxes: BoxesLike) -> np.ndarray:
    """Coerce a list of :class:`Box` or an array-like into ``(N, 4)`` float64."""
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        boxes = list(boxes)
        if boxes and isinstance(boxes[0], Box):
            arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
        else:
            arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidGeometryError(f"expected (N, 4) boxes, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidGeometryError("non-finite box coordinates")
    return arr


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    hw = 0.5 * w
    hh = 0.5 * h
    return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = np.moveaxis(boxes, -1, 0)
    return np.stack([0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0], axis=-1)


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    ax0, ay0, ax1, ay1 = (a[:, None, k] for k in range(4))
    bx0, by0, bx1, by1 = (b[None, :, k] for k in range(4))
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    ew = np.maximum(ax1, bx1) - np.minimum(ax0, bx0)
    eh = np.maximum(ay1, by1) - np.minimum(ay0, by0)
    return inter, union, ew * eh


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between corner-form boxes ``a`` (N, 4) and ``b`` (M, 4)."""
    inter, union, _ = _pairwise_terms(a, b)
    if not np.all(union > 0):
        raise DegenerateGeometryError("zero-area union")
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, enclosing = _pairwise_terms(a, b)
    if not (np.all(union > 0) and np.all(enclosing > 0)):
        raise DegenerateGeometryError("zero-area union or enclosing box")
    return inter / union - np.maximum(0.0, enclosing - union) / enclosing


def pairwise_l1(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Sum of absolute center-size differences, shape (N, M)."""
    d = np.abs(preds[:, None, :] - targets[None, :, :])
    return ((d[..., 0] + d[..., 1]) + d[..., 2]) + d[..., 3]


def pairwise_geometry(preds: BoxesLike, targets: BoxesLike) -> tuple[np.ndarray, np.ndarray]:
    """L1 and GIoU matrices between center-size predictions and targets.

    An empty target list yields ``(N, 0)`` matrices; callers decide what zero
    ground truth means for them.
    """
    p = as_box_array(preds)
    t = as_box_array(targets)
    if len(t) == 0 or len(p) == 0:
        empty = np.zeros((len(p), len(t)))
        return empty, empty.copy()
    return pairwise_l1(p, t), pairwise_giou(cxcywh_to_xyxy(p), cxcywh_to_xyxy(t))


def l1_scalar(a: Box, b: Box) -> float:
    return (((abs(a.cx - b.cx) + abs(a.cy - b.cy)) + abs(a.w - b.w)) + abs(a.h - b.h))


def paired_giou_and_grad(preds: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise GIoU of ``preds[i]`` vs ``targets[i]`` and its gradient.

    Both inputs are center-size ``(P, 4)``. The gradient is taken with
    respect to the prediction coordinates only; at ties in min/max the
    prediction is treated as the active argument on the lower side.
    """
    a = cxcywh_to_xyxy(preds)
    b = cxcywh_to_xyxy(targets)
    ax0, ay0, ax1, ay1 = a.T
    bx0, by0, bx1, by1 = b.T

    lo_x, hi_x = np.maximum(ax0, bx0), np.minimum(ax1, bx1)
    lo_y, hi_y = np.maximum(ay0, by0), np.minimum(ay1, by1)
    iw_raw = hi_x - lo_x
    ih_raw = hi_y - lo_y
    iw = np.maximum(0.0, iw_raw)
    ih = np.maximum(0.0, ih_raw)
    inter = iw * ih
    aw, ah = ax1 - ax0, ay1 - ay0
    area_a = aw * ah
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    ew = np.maximum(ax1, bx1) - np.minimum(ax0, bx0)
    eh = np.maximum(ay1, by1) - np.minimum(ay0, by0)
    enclosing = ew * eh
    if not (np.all(union > 0) and np.all(enclosing > 0)):
        raise DegenerateGeometryError("zero-area union or enclosing box")
    value = inter / union - np.maximum(0.0, enclosing - union) / enclosing

    # d(iw)/d(corner): only when the overlap is positive and the corner is active
    x_on = (iw_raw > 0).astype(np.float64)
    y_on = (ih_raw > 0).astype(np.float64)
    diw_dx0 = -x_on * (ax0 >= bx0)
    diw_dx1 = x_on * (ax1 <= bx1)
    dih_dy0 = -y_on * (ay0 >= by0)
    dih_dy1 = y_on * (ay1 <= by1)
    dinter = np.stack([diw_dx0 * ih, dih_dy0 * iw, diw_dx1 * ih, dih_dy1 * iw], axis=1)
    darea = np.stack([-ah, -aw, ah, aw], axis=1)
    dunion = darea - dinter
    dew_dx0 = -1.0 * (ax0 <= bx0)
    dew_dx1 = 1.0 * (ax1 >= bx1)
    deh_dy0 = -1.0 * (ay0 <= by0)
    deh_dy1 = 1.0 * (ay1 >= by1)
    denc = np.stack([dew_dx0 * eh, deh_dy0 * ew, dew_dx1 * eh, deh_dy1 * ew], axis=1)

    # value = inter/union - 1 + union/enclosing  (penalty branch active)
    u = union[:, None]
    e = enclosing[:, None]
    dcorner = dinter / u - inter[:, None] * dunion / u**2 + dunion / e - u * denc / e**2
    clipped = (enclosing - union) <= 0
    if np.any(clipped):
        dcorner[clipped] = (dinter / u - inter[:, None] * dunion / u**2)[clipped]

    g0, g1, g2, g3 = dcorner.T
    grad = np.stack([g0 + g2, g1 + g3, 0.5 * (g2 - g0), 0.5 * (g3 - g1)], axis=1)
    return value, grad
