"""Axis-aligned boxes, IoU, the CIoU regression loss and distance-aware NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_V_SCALE = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_seq(cls, seq) -> "BBox":
        return cls(*(float(v) for v in seq))

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def contains(self, x, y) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def translated(self, dx, dy) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


def _intersection(a: BBox, b: BBox):
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    return iw, ih


def iou(a: BBox, b: BBox) -> float:
    iw, ih = _intersection(a, b)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _center_penalty(a: BBox, b: BBox) -> float:
    """rho^2 / c^2 (squared centre distance over squared enclosing diagonal)."""
    # pair the sums so identical boxes give exactly zero
    rho2 = (((a.x_min + a.x_max) - (b.x_min + b.x_max)) / 2.0) ** 2 + (
        ((a.y_min + a.y_max) - (b.y_min + b.y_max)) / 2.0
    ) ** 2
    cw = max(a.x_max, b.x_max) - min(a.x_min, b.x_min)
    ch = max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    return rho2 / (cw * cw + ch * ch)


def diou(a: BBox, b: BBox) -> float:
    return iou(a, b) - _center_penalty(a, b)


def ciou_loss(pred: BBox, gt: BBox) -> float:
    return ciou_loss_grad(pred, gt)[0]


def ciou_loss_grad(pred: BBox, gt: BBox) -> tuple[float, np.ndarray]:
    """CIoU loss and its gradient w.r.t. ``(x_min, y_min, x_max, y_max)`` of
    ``pred``.  The trade-off weight alpha is differentiated as well, so the
    gradient is that of the exact scalar returned."""
    x1, y1, x2, y2 = pred.as_tuple()
    gx1, gy1, gx2, gy2 = gt.as_tuple()
    w, h = x2 - x1, y2 - y1
    gw, gh = gx2 - gx1, gy2 - gy1

    # intersection / union
    iw_raw = min(x2, gx2) - max(x1, gx1)
    ih_raw = min(y2, gy2) - max(y1, gy1)
    iw, ih = max(0.0, iw_raw), max(0.0, ih_raw)
    inter = iw * ih
    union = w * h + gw * gh - inter
    iou_v = inter / union

    diw = np.zeros(4)
    dih = np.zeros(4)
    if iw_raw > 0.0:
        diw[0] = -1.0 if x1 > gx1 else 0.0
        diw[2] = 1.0 if x2 < gx2 else 0.0
    if ih_raw > 0.0:
        dih[1] = -1.0 if y1 > gy1 else 0.0
        dih[3] = 1.0 if y2 < gy2 else 0.0
    d_inter = diw * ih + dih * iw
    d_area = np.array([-h, -w, h, w])
    d_union = d_area - d_inter
    d_iou = (d_inter * union - inter * d_union) / union ** 2

    # centre distance over enclosing diagonal
    dx = ((x1 + x2) - (gx1 + gx2)) / 2.0
    dy = ((y1 + y2) - (gy1 + gy2)) / 2.0
    rho2 = dx * dx + dy * dy
    d_rho2 = np.array([dx, dy, dx, dy])
    cw = max(x2, gx2) - min(x1, gx1)
    ch = max(y2, gy2) - min(y1, gy1)
    c2 = cw * cw + ch * ch
    d_cw = np.array([-1.0 if x1 < gx1 else 0.0, 0.0, 1.0 if x2 > gx2 else 0.0, 0.0])
    d_ch = np.array([0.0, -1.0 if y1 < gy1 else 0.0, 0.0, 1.0 if y2 > gy2 else 0.0])
    d_c2 = 2.0 * cw * d_cw + 2.0 * ch * d_ch
    dist = rho2 / c2
    d_dist = d_rho2 / c2 - rho2 * d_c2 / c2 ** 2

    # aspect-ratio consistency
    diff = math.atan(gw / gh) - math.atan(w / h)
    v = _V_SCALE * diff * diff
    s = 1.0 - iou_v
    if v == 0.0:
        av = 0.0
        d_av = np.zeros(4)
    else:
        av = v * v / (s + v)
        dav_dv = (v * v + 2.0 * v * s) / (s + v) ** 2
        dav_ds = -v * v / (s + v) ** 2
        r2 = w * w + h * h
        dv_dt = -2.0 * _V_SCALE * diff  # t = atan(w / h)
        dt = np.array([-h / r2, w / r2, h / r2, -w / r2])
        d_av = dav_dv * dv_dt * dt + dav_ds * (-d_iou)

    loss = 1.0 - iou_v + dist + av
    grad = -d_iou + d_dist + d_av
    return loss, grad


def ciou_nms(boxes: Sequence[BBox], scores: Sequence[float], threshold: float = 0.5,
             distance_penalty: bool = True) -> list[int]:
    """Greedy suppression in descending score order (ties: lower index first).

    A box is dropped when ``IoU - rho^2/c^2`` (or plain IoU with
    ``distance_penalty=False``) against an already kept box exceeds
    ``threshold``.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    overlap = diou if distance_penalty else iou
    kept: list[int] = []
    for i in order:
        if all(overlap(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept
