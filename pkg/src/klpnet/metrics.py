"""Evaluation metrics: PCK, box AP over IoU thresholds, link precision /
recall / F1 and rank-based link AUC."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, iou

PCK_ALPHA = 0.1
AP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def box_normalizer(box: BBox) -> float:
    """PCK size normalizer: the longer side of the instance's gt box."""
    return max(box.width, box.height)


def pck(preds: Mapping, gts: Mapping, normalizers: Mapping, alpha: float = PCK_ALPHA) -> float | None:
    """Fraction of gt keypoints whose prediction lies within
    ``alpha * normalizers[instance]``.

    ``preds`` and ``gts`` map ``(instance, slot)`` to ``(x, y)``; a gt key
    without a prediction is a miss.  Returns None when there is no gt.
    """
    if not gts:
        return None
    hits = 0
    for key, (gx, gy) in gts.items():
        p = preds.get(key)
        if p is None:
            continue
        if math.hypot(p[0] - gx, p[1] - gy) <= alpha * normalizers[key[0]]:
            hits += 1
    return hits / len(gts)


@dataclass
class APResult:
    per_threshold: dict[float, float]
    mean: float

    @property
    def ap50(self) -> float:
        return self.per_threshold[0.5]

    @property
    def ap75(self) -> float:
        return self.per_threshold[0.75]

    @property
    def ap(self) -> float:
        return self.mean


def _split_gt(g):
    return (g, None) if isinstance(g, BBox) else (g[0], g[1])


def _split_pred(p):
    return (p[0], p[1], p[2] if len(p) > 2 else None)


def _exact_ap(tp: Sequence[bool], n_gt: int) -> Fraction:
    if n_gt == 0:
        raise ValueError("average precision needs at least one gt box")
    hits = 0
    precision = []
    for k, t in enumerate(tp, 1):
        hits += bool(t)
        precision.append(Fraction(hits, k))
    # running max from the right gives the interpolated precision envelope
    for k in reversed(range(len(precision) - 1)):
        precision[k] = max(precision[k], precision[k + 1])
    # recall rises by 1/n_gt at every true positive
    return sum((p for p, t in zip(precision, tp) if t), Fraction(0)) / n_gt


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the PR curve of a ranked list,
    computed in exact rational arithmetic."""
    return float(_exact_ap(tp, n_gt))


def _ranked(preds):
    items = []
    for img, dets in enumerate(preds):
        for d in dets:
            box, score, cat = _split_pred(d)
            items.append((float(score), img, box, cat))
    # descending score; ties broken by content so the result ignores input order
    items.sort(key=lambda t: (-t[0], t[1], t[2].as_tuple(), -1 if t[3] is None else t[3]))
    return items


def match_detections(preds, gts, threshold: float) -> list[bool]:
    """Greedy matching in score order: each detection takes the unmatched
    same-image (same-category) gt box of highest IoU >= ``threshold``."""
    gt_split = [[_split_gt(g) for g in img] for img in gts]
    taken = [[False] * len(img) for img in gt_split]
    out = []
    for _, img, box, cat in _ranked(preds):
        best, best_iou = -1, -1.0
        for j, (gbox, gcat) in enumerate(gt_split[img]):
            if taken[img][j] or (cat is not None and gcat is not None and cat != gcat):
                continue
            v = iou(box, gbox)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[img][best] = True
        out.append(best >= 0)
    return out


def ap_iou(preds, gts, thresholds: Sequence[float] = AP_THRESHOLDS) -> APResult | None:
    """AP per IoU threshold.

    ``preds[i]`` lists ``(BBox, score[, category])`` for image i and
    ``gts[i]`` lists ``BBox`` or ``(BBox, category)``.  Detections are pooled
    over images.  Returns None when there are no gt boxes at all.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    exact = {float(t): _exact_ap(match_detections(preds, gts, t), n_gt) for t in thresholds}
    return APResult({t: float(v) for t, v in exact.items()}, float(sum(exact.values()) / len(exact)))


def _edge_set(edges) -> set[tuple[int, int]]:
    return {(min(i, j), max(i, j)) for i, j in edges if i != j}


def link_prf(pred, gt) -> tuple[float, float, float]:
    """Set-overlap precision, recall, F1 over undirected edges.  An empty
    prediction has precision 1, an empty gt has recall 1."""
    p, g = _edge_set(pred), _edge_set(gt)
    hit = len(p & g)
    precision = hit / len(p) if p else 1.0
    recall = hit / len(g) if g else 1.0
    if not p and not g:
        return 1.0, 1.0, 1.0
    # 2PR / (P + R) reduces to a single count ratio
    f1 = 2 * hit / (len(p) + len(g))
    return precision, recall, f1


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def link_auc(scores, A, cat=None) -> float | None:
    """Probability that a true edge outscores a non-edge (ties count half),
    over off-diagonal pairs i < j, restricted to same-category pairs when
    ``cat`` is given.  None when either class is empty."""
    S = np.asarray(scores, dtype=np.float64)
    A = np.asarray(A)
    n = S.shape[0]
    if S.shape != (n, n) or A.shape != (n, n):
        raise ValueError(f"score {S.shape} and adjacency {A.shape} must be matching squares")
    ii, jj = np.triu_indices(n, 1)
    if cat is not None:
        cat = np.asarray(cat)
        keep = cat[ii] == cat[jj]
        ii, jj = ii[keep], jj[keep]
    s = S[ii, jj]
    y = A[ii, jj] != 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


_FIELDS = ("pck", "ap50", "ap75", "ap", "precision", "recall", "f1", "auc")


@dataclass
class EvalReport:
    pck: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    ap: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    auc: float | None = None
    n_scenes: int = 0

    def __post_init__(self):
        for name in _FIELDS:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        lines = [f"{'metric':<10} {'value':>8}"]
        for name in _FIELDS:
            v = getattr(self, name)
            lines.append(f"{name:<10} {'-' if v is None else f'{v:.4f}':>8}")
        lines.append(f"{'scenes':<10} {self.n_scenes:>8}")
        return "\n".join(lines) + "\n"
