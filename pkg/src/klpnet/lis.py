"""Location instability strategy: assign keypoints that fall inside the
overlap of same-category instance boxes to an (instance, slot) vacancy or
mark them as outliers, keeping every instance at its template node count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox

EXHAUSTIVE_MAX_NODES = 6
EXHAUSTIVE_MAX_VACANCIES = 8


class ConstraintError(ValueError):
    pass


@dataclass
class InstanceTemplate:
    category: int
    name: str
    layout: np.ndarray          # k x 2, centred, bounding-box diagonal 1
    skeleton: np.ndarray        # k x k symmetric 0/1, zero diagonal

    def __post_init__(self):
        self.layout = np.asarray(self.layout, dtype=np.float64)
        self.skeleton = np.asarray(self.skeleton, dtype=np.int64)
        k = self.layout.shape[0]
        if k < 2 or self.layout.shape != (k, 2):
            raise ValueError(f"template {self.name!r} needs k >= 2 points in 2-d")
        if self.skeleton.shape != (k, k) or not np.array_equal(self.skeleton, self.skeleton.T):
            raise ValueError(f"template {self.name!r} skeleton must be a symmetric {k}x{k} matrix")
        if np.any(np.diag(self.skeleton)):
            raise ValueError(f"template {self.name!r} skeleton must have zero diagonal")

    @property
    def k(self) -> int:
        return self.layout.shape[0]

    def layout_distances(self) -> np.ndarray:
        d = self.layout[:, None, :] - self.layout[None, :, :]
        return np.sqrt((d ** 2).sum(-1))

    def edges(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(np.triu(self.skeleton, 1))
        return [(int(i), int(j)) for i, j in zip(ii, jj)]


@dataclass
class Detection:
    x: float
    y: float
    category: int
    feature: np.ndarray
    slot: int | None = None
    score: float = 1.0


@dataclass
class Instance:
    bbox: BBox
    category: int


@dataclass
class FixedNode:
    index: int
    position: tuple[float, float]
    feature: np.ndarray
    slot: int
    instance: int


@dataclass
class DebatableNode:
    index: int
    position: tuple[float, float]
    feature: np.ndarray
    candidates: list[int]       # instance ids whose box holds the node


@dataclass
class SceneNodes:
    instances: list[Instance]
    fixed: list[FixedNode] = field(default_factory=list)
    debatable: list[DebatableNode] = field(default_factory=list)
    outliers: list[int] = field(default_factory=list)

    def fixed_of(self, inst: int) -> list[FixedNode]:
        return [f for f in self.fixed if f.instance == inst]


OUTLIER = None


@dataclass
class Assignment:
    choice: dict[int, tuple[int, int] | None]   # debatable node index -> (instance, slot) | OUTLIER
    score: float = 0.0
    unfilled: dict[int, int] = field(default_factory=dict)
    exhaustive: bool = True


def classify_nodes(detections: Sequence[Detection], instances: Sequence[Instance]) -> SceneNodes:
    """Split detections into fixed, debatable and outlier nodes.

    Only boxes of the detection's own category are considered (each category
    has its own heatmap).  A node in exactly one such box is fixed to it when
    its slot is known and not already taken; a node in several boxes, or with
    an unknown / duplicate slot, is debatable; a node in none is an outlier.
    """
    scene = SceneNodes(list(instances))
    taken: set[tuple[int, int]] = set()
    for idx, det in enumerate(detections):
        holders = [i for i, inst in enumerate(instances)
                   if inst.category == det.category and inst.bbox.contains(det.x, det.y)]
        feat = np.asarray(det.feature, dtype=np.float64)
        pos = (float(det.x), float(det.y))
        if not holders:
            scene.outliers.append(idx)
        elif len(holders) == 1 and det.slot is not None and (holders[0], det.slot) not in taken:
            taken.add((holders[0], det.slot))
            scene.fixed.append(FixedNode(idx, pos, feat, int(det.slot), holders[0]))
        else:
            scene.debatable.append(DebatableNode(idx, pos, feat, holders))
    return scene


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _templates_by_category(templates) -> Mapping[int, InstanceTemplate]:
    if isinstance(templates, Mapping):
        return templates
    return {t.category: t for t in templates}


def candidate_score(node, instance: int, slot: int, scene: SceneNodes, templates,
                    lam_f: float = 1.0, lam_d: float = 1.0) -> float:
    """lam_f * cos(feature, mean same-slot fixed feature of the category)
    - lam_d * mean |dist(node, fixed) / box diagonal - layout distance|."""
    tmpl = _templates_by_category(templates)
    inst = scene.instances[instance]
    t = tmpl[inst.category]
    same_cat = {i for i, other in enumerate(scene.instances) if other.category == inst.category}
    refs = [f.feature for f in scene.fixed if f.slot == slot and f.instance in same_cat]
    feat_term = _cosine(node.feature, np.mean(refs, axis=0)) if refs else 0.0
    mine = scene.fixed_of(instance)
    if not mine:
        return lam_f * feat_term
    scale = inst.bbox.diagonal
    ld = t.layout_distances()
    x, y = node.position
    devs = [abs(math.hypot(x - f.position[0], y - f.position[1]) / scale - ld[slot, f.slot]) for f in mine]
    return lam_f * feat_term - lam_d * float(np.mean(devs))


def vacancies(scene: SceneNodes, templates) -> dict[int, list[int]]:
    tmpl = _templates_by_category(templates)
    out = {}
    for i, inst in enumerate(scene.instances):
        k = tmpl[inst.category].k
        fixed = scene.fixed_of(i)
        if len(fixed) > k:
            raise ConstraintError(f"instance {i} holds {len(fixed)} fixed nodes but its template allows {k}")
        used = {f.slot for f in fixed}
        out[i] = [s for s in range(k) if s not in used]
    return out


def _options(scene, templates, vac, lam_f, lam_d):
    opts = []
    for node in scene.debatable:
        row = []
        for inst in sorted(node.candidates):
            for slot in vac.get(inst, []):
                row.append((inst, slot, candidate_score(node, inst, slot, scene, templates, lam_f, lam_d)))
        opts.append(row)
    return opts


def _max_fill(opts) -> int:
    """Size of a maximum matching between nodes and (instance, slot) vacancies."""
    owner: dict[tuple[int, int], int] = {}

    def augment(n, seen):
        for inst, slot, _ in opts[n]:
            key = (inst, slot)
            if key in seen:
                continue
            seen.add(key)
            if key not in owner or augment(owner[key], seen):
                owner[key] = n
                return True
        return False

    return sum(augment(n, set()) for n in range(len(opts)))


def _exhaustive(opts, target):
    n = len(opts)
    best_pos = [max([0.0] + [s for _, _, s in row]) for row in opts]
    suffix = [0.0] * (n + 1)
    for i in reversed(range(n)):
        suffix[i] = suffix[i + 1] + best_pos[i]
    best = {"score": -math.inf, "pick": None}
    used: set[tuple[int, int]] = set()
    pick: list = [None] * n

    def dfs(i, filled, score):
        if filled + (n - i) < target:
            return
        if score + suffix[i] <= best["score"]:
            return
        if i == n:
            if filled == target and score > best["score"]:
                best["score"], best["pick"] = score, list(pick)
            return
        for inst, slot, s in opts[i]:
            if (inst, slot) in used or filled >= target:
                continue
            used.add((inst, slot))
            pick[i] = (inst, slot)
            dfs(i + 1, filled + 1, score + s)
            used.discard((inst, slot))
        pick[i] = None
        dfs(i + 1, filled, score)

    dfs(0, 0, 0.0)
    return best["pick"], best["score"]


def _greedy(opts, target):
    cands = sorted(((s, i, inst, slot) for i, row in enumerate(opts) for inst, slot, s in row),
                   key=lambda c: (-c[0], c[1], c[2], c[3]))
    pick: list = [None] * len(opts)
    used: set[tuple[int, int]] = set()
    filled = 0
    score = 0.0
    # positive-score picks first, then forced fills until the target count is met
    for s, i, inst, slot in cands:
        if filled >= target:
            break
        if pick[i] is not None or (inst, slot) in used:
            continue
        if s <= 0.0:
            continue
        pick[i] = (inst, slot)
        used.add((inst, slot))
        filled += 1
        score += s
    for s, i, inst, slot in cands:
        if filled >= target:
            break
        if pick[i] is not None or (inst, slot) in used:
            continue
        pick[i] = (inst, slot)
        used.add((inst, slot))
        filled += 1
        score += s
    return pick, score


def resolve(scene: SceneNodes, templates, lam_f: float = 1.0, lam_d: float = 1.0) -> Assignment:
    """Assign debatable nodes to vacancies or OUTLIER, filling as many
    vacancies as the scene allows (all of them when enough candidates exist)
    and, among such assignments, maximising the summed candidate score."""
    vac = vacancies(scene, templates)
    if not scene.debatable:
        return Assignment({}, 0.0, {i: len(v) for i, v in vac.items() if v})
    opts = _options(scene, templates, vac, lam_f, lam_d)
    target = _max_fill(opts)
    n_vac = sum(len(vac[i]) for i in {c for node in scene.debatable for c in node.candidates})
    exhaustive = len(scene.debatable) <= EXHAUSTIVE_MAX_NODES and n_vac <= EXHAUSTIVE_MAX_VACANCIES
    pick, score = (_exhaustive if exhaustive else _greedy)(opts, target)
    choice = {node.index: pick[n] for n, node in enumerate(scene.debatable)}
    counts = {i: 0 for i in vac}
    for c in choice.values():
        if c is not None:
            counts[c[0]] += 1
    unfilled = {i: len(vac[i]) - counts[i] for i in vac if len(vac[i]) > counts[i]}
    return Assignment(choice, float(score), unfilled, exhaustive)


def identities(scene: SceneNodes, assignment: Assignment) -> dict[int, tuple[int, int]]:
    """Detection index -> (instance, slot) for every non-outlier node."""
    out = {f.index: (f.instance, f.slot) for f in scene.fixed}
    for idx, c in assignment.choice.items():
        if c is not None:
            out[idx] = c
    return out


def prune_links(links, scene: SceneNodes, assignment: Assignment, templates) -> set[tuple[int, int]]:
    """Drop edges that cross instances, touch outliers, or are absent from
    the instance's template skeleton."""
    tmpl = _templates_by_category(templates)
    ident = identities(scene, assignment)
    kept = set()
    for i, j in links:
        if i not in ident or j not in ident:
            continue
        (ii, si), (ij, sj) = ident[i], ident[j]
        if ii != ij:
            continue
        if tmpl[scene.instances[ii].category].skeleton[si, sj]:
            kept.add((min(i, j), max(i, j)))
    return kept
