"""Shared scene generators and brute-force oracles for the test suite."""

import itertools
import math
from fractions import Fraction

import numpy as np

from klpnet import lis, numerics, synthgen
from klpnet.heatmap import Keypoint
from klpnet.synthgen import PlacementError, SceneSpec


def occlusion_scene(gen, max_debatable=lis.EXHAUSTIVE_MAX_NODES, max_vacancies=lis.EXHAUSTIVE_MAX_VACANCIES):
    """Random overlapping same-category scene whose classified nodes stay
    within the given limits.  Returns (scene, detections, nodes)."""
    while True:
        spec = SceneSpec(n_objects=int(gen.integers(2, 4)), categories=(0, 2),
                         overlap=float(gen.uniform(0.1, 0.5)), scale_range=(30.0, 50.0),
                         position_jitter=float(gen.uniform(0, 1.5)), feature_noise=0.1)
        try:
            scene = synthgen.generate(spec, int(gen.integers(1 << 30)))
        except PlacementError:
            continue
        dets = []
        for n, kp in enumerate(scene.keypoints()):
            slot = None if gen.random() < 0.15 else kp.slot
            dets.append(lis.Detection(kp.x, kp.y, kp.category, scene.features[n], slot))
        box = scene.objects[0].bbox
        for _ in range(int(gen.integers(0, 3))):
            x, y = gen.uniform(box.x_min, box.x_max), gen.uniform(box.y_min, box.y_max)
            dets.append(lis.Detection(x, y, scene.objects[0].category,
                                      gen.standard_normal(synthgen.FEATURE_WIDTH), None))
        instances = [lis.Instance(o.bbox, o.category) for o in scene.objects]
        nodes = lis.classify_nodes(dets, instances)
        vac = lis.vacancies(nodes, synthgen.template_map())
        n_vac = sum(len(vac[i]) for i in {c for d in nodes.debatable for c in d.candidates})
        if len(nodes.debatable) <= max_debatable and n_vac <= max_vacancies:
            return scene, dets, nodes


def score_oracle(node, inst, slot, nodes, templates, lam_f=1.0, lam_d=1.0):
    """Straight-line recomputation of the candidate score."""
    me = nodes.instances[inst]
    t = templates[me.category]
    refs = [f.feature for f in nodes.fixed
            if f.slot == slot and nodes.instances[f.instance].category == me.category]
    feat = 0.0
    if refs:
        ref = sum(refs) / len(refs)
        na, nb = math.sqrt(float(node.feature @ node.feature)), math.sqrt(float(ref @ ref))
        feat = float(node.feature @ ref) / (na * nb) if na and nb else 0.0
    mine = [f for f in nodes.fixed if f.instance == inst]
    if not mine:
        return lam_f * feat
    diag = math.hypot(me.bbox.x_max - me.bbox.x_min, me.bbox.y_max - me.bbox.y_min)
    devs = []
    for f in mine:
        d = math.hypot(node.position[0] - f.position[0], node.position[1] - f.position[1]) / diag
        ld = math.hypot(*(t.layout[slot] - t.layout[f.slot]))
        devs.append(abs(d - ld))
    return lam_f * feat - lam_d * sum(devs) / len(devs)


def brute_force_resolve(nodes, templates, score_fn=None):
    """Enumerate every assignment; among those filling the most vacancies
    return the best total score and fill count.  ``score_fn`` defaults to
    the independent recomputation."""
    score_fn = score_fn or score_oracle
    used = {(f.instance, f.slot) for f in nodes.fixed}
    options = []
    for node in nodes.debatable:
        row = [None]
        for inst in node.candidates:
            k = templates[nodes.instances[inst].category].k
            row += [(inst, s) for s in range(k) if (inst, s) not in used]
        options.append(row)
    best = (-1, -math.inf)
    for combo in itertools.product(*options):
        picked = [c for c in combo if c is not None]
        if len(set(picked)) != len(picked):
            continue
        score = sum(score_fn(node, c[0], c[1], nodes, templates)
                    for node, c in zip(nodes.debatable, combo) if c is not None)
        best = max(best, (len(picked), score))
    return best


def node_counts(nodes, assignment):
    counts = {i: 0 for i in range(len(nodes.instances))}
    for inst, _ in lis.identities(nodes, assignment).values():
        counts[inst] += 1
    return counts


def random_links(gen, n, p=0.3):
    return {(i, j) for i in range(n) for j in range(i + 1, n) if gen.random() < p}


def skeleton_links(links, nodes, assignment, templates):
    """Oracle for link pruning: keep edges whose endpoints share an instance
    and map onto a skeleton edge."""
    ident = lis.identities(nodes, assignment)
    out = set()
    for i, j in links:
        if i in ident and j in ident and ident[i][0] == ident[j][0]:
            t = templates[nodes.instances[ident[i][0]].category]
            if (min(ident[i][1], ident[j][1]), max(ident[i][1], ident[j][1])) in t.edges():
                out.add((min(i, j), max(i, j)))
    return out


def rng(seed):
    return numerics.rng(seed)


# metric oracles: plain loops and exact rationals

def pck_oracle(preds, gts, norms, alpha):
    hits = 0
    for key in gts:
        if key in preds:
            dx, dy = preds[key][0] - gts[key][0], preds[key][1] - gts[key][1]
            if math.sqrt(dx * dx + dy * dy) <= alpha * norms[key[0]]:
                hits += 1
    return Fraction(hits, len(gts))


def _box_iou(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(w, 0.0) * max(h, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def ap_oracle(preds, gts, threshold):
    """Greedy score-order matching, then area under the interpolated PR
    curve summed over distinct recall levels."""
    dets = sorted(((float(s), img, box.as_tuple(), c) for img, row in enumerate(preds) for box, s, c in row),
                  key=lambda d: (-d[0], d[1], d[2], d[3]))
    n_gt = sum(len(g) for g in gts)
    used = set()
    tp = []
    for _, img, box, c in dets:
        cands = [(_box_iou(box, g.as_tuple()), j) for j, (g, gc) in enumerate(gts[img])
                 if (img, j) not in used and gc == c]
        cands = [(v, -j) for v, j in cands if v >= threshold]
        if cands:
            used.add((img, -max(cands)[1]))
        tp.append(bool(cands))
    points = []
    hits = 0
    for k, t in enumerate(tp, 1):
        hits += t
        points.append((Fraction(hits, n_gt), Fraction(hits, k)))
    area, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        area += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return area


def prf_oracle(pred, gt):
    p = {frozenset(e) for e in pred if e[0] != e[1]}
    g = {frozenset(e) for e in gt if e[0] != e[1]}
    hit = sum(1 for e in p if e in g)
    prec = Fraction(hit, len(p)) if p else Fraction(1)
    rec = Fraction(hit, len(g)) if g else Fraction(1)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else Fraction(0)
    return prec, rec, f1


def auc_oracle(S, A, cat=None):
    n = len(S)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if cat is None or cat[i] == cat[j]]
    pos = [S[i][j] for i, j in pairs if A[i][j]]
    neg = [S[i][j] for i, j in pairs if not A[i][j]]
    if not pos or not neg:
        return None
    wins = sum(Fraction(1) if a > b else Fraction(1, 2) if a == b else Fraction(0) for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


# random small metric instances (at most 10 elements each)

def random_pck_case(gen):
    n_inst = int(gen.integers(1, 4))
    gts, norms, preds = {}, {}, {}
    while len(gts) < 1:
        for inst in range(n_inst):
            norms[inst] = float(gen.uniform(10, 60))
            for slot in range(int(gen.integers(1, 4))):
                if len(gts) < 10:
                    gts[(inst, slot)] = tuple(gen.uniform(0, 100, 2))
    for key, (x, y) in gts.items():
        if gen.random() < 0.85:
            r = gen.uniform(0, 0.2) * norms[key[0]]
            a = gen.uniform(0, 2 * math.pi)
            preds[key] = (x + r * math.cos(a), y + r * math.sin(a))
    if gen.random() < 0.3:
        preds[(99, 0)] = (0.0, 0.0)          # prediction for an unknown instance is ignored
    return preds, gts, norms


def random_ap_case(gen):
    from klpnet.geometry import BBox
    n_img = int(gen.integers(1, 4))
    gts = [[] for _ in range(n_img)]
    preds = [[] for _ in range(n_img)]
    for _ in range(int(gen.integers(1, 11))):
        img = int(gen.integers(n_img))
        x, y = gen.uniform(0, 50, 2)
        w, h = gen.uniform(5, 30, 2)
        gts[img].append((BBox(x, y, x + w, y + h), int(gen.integers(2))))
    for _ in range(int(gen.integers(0, 11))):
        img = int(gen.integers(n_img))
        if gts[img] and gen.random() < 0.7:
            g, c = gts[img][int(gen.integers(len(gts[img])))]
            d = gen.normal(0, 0.12 * min(g.width, g.height), 4)
            box = BBox(g.x_min + d[0], g.y_min + d[1], g.x_max + abs(d[2]) + 1e-3, g.y_max + abs(d[3]) + 1e-3)
            c = c if gen.random() < 0.9 else 1 - c
        else:
            x, y = gen.uniform(0, 50, 2)
            w, h = gen.uniform(5, 30, 2)
            box, c = BBox(x, y, x + w, y + h), int(gen.integers(2))
        preds[img].append((box, round(float(gen.random()), 1), c))
    return preds, gts


def random_edges(gen, n_nodes=5, max_edges=10):
    pairs = [(i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes)]
    k = int(gen.integers(0, min(max_edges, len(pairs)) + 1))
    picks = gen.choice(len(pairs), size=k, replace=False)
    # random orientation exercises undirected handling
    return {pairs[p] if gen.random() < 0.5 else pairs[p][::-1] for p in picks}


def random_auc_case(gen):
    n = int(gen.integers(2, 6))                # at most 10 pairs
    S = np.round(gen.random((n, n)), 1)
    S = np.triu(S, 1) + np.triu(S, 1).T
    A = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if gen.random() < 0.4:
                A[i, j] = A[j, i] = 1
    cat = gen.integers(0, 2, n) if gen.random() < 0.5 else None
    return S, A, cat


def separated_keypoints(gen, n, grid, stride, min_cells):
    """``n`` keypoints whose cells are at least ``min_cells`` apart (Chebyshev)."""
    cols, rows = grid
    pts = []
    while len(pts) < n:
        u, v = gen.uniform(0, cols), gen.uniform(0, rows)
        if all(max(abs(math.floor(u) - math.floor(a)), abs(math.floor(v) - math.floor(b))) >= min_cells
               for a, b in pts):
            pts.append((u, v))
    return [Keypoint(u * stride, v * stride) for u, v in pts]
