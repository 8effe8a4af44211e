"""End-to-end synthetic evaluation: heatmaps -> peaks -> LIS assignment ->
link prediction -> pruning -> metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import clpg, lis, metrics
from .geometry import BBox
from .heatmap import decode, grid_extent, render_gt
from .synthgen import BOX_MARGIN, Scene, feature_codebook, template_map, to_graph


# the table template puts some keypoints ~7 px apart; stride 4 would merge them
PIPELINE_STRIDE = 2


@dataclass
class SceneResult:
    detections: list[lis.Detection]
    nodes: lis.SceneNodes
    assignment: lis.Assignment
    identity: dict[int, tuple[int, int]]        # detection -> (instance, slot)
    keypoints: dict[tuple[int, int], tuple[float, float]]
    links: set[tuple[tuple[int, int], tuple[int, int]]]
    boxes: list[tuple[BBox, float, int]]


def _slot_of(feature, category, codes) -> int | None:
    best, best_cos = None, -math.inf
    nf = np.linalg.norm(feature)
    for (c, s), v in sorted(codes.items()):
        if c != category or nf == 0.0:
            continue
        cos = float(feature @ v) / nf
        if cos > best_cos:
            best, best_cos = s, cos
    return best


def detect(scene: Scene, stride=PIPELINE_STRIDE, kernel: int = 3, threshold: float = 0.5) -> list[lis.Detection]:
    """Decode one category-implicit heatmap per category.  Each peak carries
    the descriptor of its nearest keypoint and a slot guess from the
    closest code vector."""
    codes = feature_codebook()
    grid = grid_extent(scene.image, stride)
    kps = scene.keypoints()
    out = []
    for c in sorted({k.category for k in kps}):
        mine = [(n, k) for n, k in enumerate(kps) if k.category == c]
        stack = render_gt([k for _, k in mine], grid, stride, kernel)
        for x, y, score in decode(stack, threshold, max_peaks=4 * len(mine)):
            n, _ = min(mine, key=lambda nk: (math.hypot(nk[1].x - x, nk[1].y - y), nk[0]))
            f = scene.features[n]
            out.append(lis.Detection(x, y, c, f, _slot_of(f, c, codes), score))
    return out


def _box_from(points) -> BBox:
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(0), pts.max(0)
    m = BOX_MARGIN * float(np.hypot(*(hi - lo)))
    return BBox(lo[0] - m, lo[1] - m, hi[0] + m, hi[1] + m)


def run_scene(scene: Scene, params: clpg.ClpgParams, stride=PIPELINE_STRIDE, kernel: int = 3,
              threshold: float = 0.5, link_threshold: float = 0.5) -> SceneResult:
    templates = template_map()
    dets = detect(scene, stride, kernel, threshold)
    instances = [lis.Instance(o.bbox, o.category) for o in scene.objects]
    nodes = lis.classify_nodes(dets, instances)
    assignment = lis.resolve(nodes, templates)
    ident = lis.identities(nodes, assignment)
    kept = sorted(ident)
    links: set = set()
    if len(kept) >= 2:
        g = clpg.Graph(np.eye(len(kept)), np.stack([dets[i].feature for i in kept]),
                       np.array([dets[i].category for i in kept], dtype=np.int64))
        local = clpg.predict_links(params, g, link_threshold)
        pruned = lis.prune_links({(kept[i], kept[j]) for i, j in local}, nodes, assignment, templates)
        links = {tuple(sorted((ident[i], ident[j]))) for i, j in pruned}
    keypoints = {ident[i]: (dets[i].x, dets[i].y) for i in kept}
    boxes = []
    for inst, o in enumerate(scene.objects):
        members = [i for i in kept if ident[i][0] == inst]
        if len(members) >= 2:
            box = _box_from([(dets[i].x, dets[i].y) for i in members])
            boxes.append((box, float(np.mean([dets[i].score for i in members])), o.category))
    return SceneResult(dets, nodes, assignment, ident, keypoints, links, boxes)


def evaluate(scenes: Sequence[Scene], params: clpg.ClpgParams, stride=PIPELINE_STRIDE, kernel: int = 3,
             threshold: float = 0.5, link_threshold: float = 0.5, alpha: float = metrics.PCK_ALPHA) -> metrics.EvalReport:
    """Pooled PCK, box AP and link P/R/F1 over ``scenes``; AUC is the mean
    per-scene link AUC of the model on the ground-truth keypoints."""
    if not scenes:
        raise ValueError("cannot evaluate an empty dataset")
    width = scenes[0].features.shape[1]
    if params.in_width - params.n_categories != width:
        raise ValueError(f"model expects feature width {params.in_width - params.n_categories}, "
                         f"dataset has {width}")
    hits = total = 0
    pred_links: set = set()
    gt_links: set = set()
    box_preds, box_gts, aucs = [], [], []
    for n, scene in enumerate(scenes):
        res = run_scene(scene, params, stride, kernel, threshold, link_threshold)
        gts = {(inst, s): (x, y) for inst, o in enumerate(scene.objects) for x, y, s in o.keypoints}
        norms = {inst: metrics.box_normalizer(o.bbox) for inst, o in enumerate(scene.objects)}
        p = metrics.pck(res.keypoints, gts, norms, alpha)
        if p is not None:
            hits += round(p * len(gts))
            total += len(gts)
        # links keyed by (scene, instance, slot) so the pooled sets stay disjoint
        pred_links |= {((n,) + a, (n,) + b) for a, b in res.links}
        for inst, o in enumerate(scene.objects):
            for i, j in o.links:
                a, b = (n, inst, o.keypoints[i][2]), (n, inst, o.keypoints[j][2])
                gt_links.add((min(a, b), max(a, b)))
        box_preds.append(res.boxes)
        box_gts.append([(o.bbox, o.category) for o in scene.objects])
        g = to_graph(scene)
        if g.n >= 2:
            auc = metrics.link_auc(clpg.link_scores(params, g), g.A - np.eye(g.n), g.cat)
            if auc is not None:
                aucs.append(auc)
    ids = {k: i for i, k in enumerate(sorted({v for e in pred_links | gt_links for v in e}))}
    prec, rec, f1 = metrics.link_prf({(ids[a], ids[b]) for a, b in pred_links},
                                     {(ids[a], ids[b]) for a, b in gt_links})
    ap = metrics.ap_iou(box_preds, box_gts)
    return metrics.EvalReport(
        pck=hits / total if total else None,
        ap50=ap.ap50 if ap else None, ap75=ap.ap75 if ap else None, ap=ap.ap if ap else None,
        precision=prec, recall=rec, f1=f1,
        auc=float(np.mean(aucs)) if aucs else None, n_scenes=len(scenes))
