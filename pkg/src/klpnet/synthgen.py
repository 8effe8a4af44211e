"""Deterministic synthetic rigid-body scenes with keypoints, skeleton links,
node features and controllable same-category occlusion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics
from .clpg import Graph
from .geometry import BBox, iou
from .heatmap import Keypoint
from .lis import InstanceTemplate

FEATURE_WIDTH = 16
FORMAT_VERSION = 1
CODEBOOK_SEED = 20210
BOX_MARGIN = 0.08   # box padding as a fraction of object scale


class PlacementError(ValueError):
    pass


def _normalised(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(0), p.max(0)
    p = p - (lo + hi) / 2.0
    return p / np.hypot(*(hi - lo))


def _skeleton(k, edges) -> np.ndarray:
    s = np.zeros((k, k), dtype=np.int64)
    for i, j in edges:
        s[i, j] = s[j, i] = 1
    return s


def builtin_templates() -> list[InstanceTemplate]:
    """Monitor (k=4), table (k=8) and chair (k=6); categories 0, 1, 2."""
    monitor = [(-0.5, -0.35), (0.5, -0.35), (0.5, 0.35), (-0.5, 0.35)]
    table = [(-0.5, -0.1), (0.5, -0.1), (0.35, -0.35), (-0.35, -0.35),
             (-0.5, 0.4), (0.5, 0.4), (0.35, 0.2), (-0.35, 0.2)]
    chair = [(-0.35, -0.6), (0.35, -0.6), (-0.35, 0.0), (0.35, 0.0), (-0.45, 0.55), (0.45, 0.55)]
    return [
        InstanceTemplate(0, "monitor", _normalised(monitor), _skeleton(4, [(0, 1), (1, 2), (2, 3), (3, 0)])),
        InstanceTemplate(1, "table", _normalised(table), _skeleton(8, [
            (0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 5), (2, 6), (3, 7)])),
        InstanceTemplate(2, "chair", _normalised(chair), _skeleton(6, [
            (0, 1), (0, 2), (1, 3), (2, 3), (2, 4), (3, 5)])),
    ]


def template_map() -> dict[int, InstanceTemplate]:
    return {t.category: t for t in builtin_templates()}


def feature_codebook() -> dict[tuple[int, int], np.ndarray]:
    """Fixed unit-norm, zero-mean code vector per (category, slot)."""
    gen = numerics.rng(CODEBOOK_SEED)
    out = {}
    for t in builtin_templates():
        for s in range(t.k):
            v = gen.standard_normal(FEATURE_WIDTH)
            v -= v.mean()
            out[(t.category, s)] = v / np.linalg.norm(v)
    return out


@dataclass
class ObjectSpec:
    category: int
    translation: tuple[float, float]
    scale: float
    rotation: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"object scale must be positive, got {self.scale}")


@dataclass
class SceneSpec:
    image: tuple[int, int] = (128, 128)
    objects: list[ObjectSpec] | None = None
    n_objects: int = 2
    categories: tuple[int, ...] = (0, 1, 2)
    scale_range: tuple[float, float] = (40.0, 60.0)
    rotation_range: float = 0.0
    feature_noise: float = 0.05
    position_jitter: float = 0.0
    overlap: float = 0.0
    distinct_categories: bool = False

    def __post_init__(self):
        self.image = tuple(int(v) for v in self.image)
        self.categories = tuple(int(c) for c in self.categories)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.objects is not None:
            self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if not (0.0 <= self.overlap < 1.0):
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.feature_noise < 0 or self.position_jitter < 0:
            raise ValueError("noise levels must be non-negative")
        if self.image[0] <= 0 or self.image[1] <= 0:
            raise ValueError(f"image extents must be positive, got {self.image}")
        if not (0 < self.scale_range[0] <= self.scale_range[1]):
            raise ValueError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")
        known = {t.category for t in builtin_templates()}
        bad = [c for c in self.categories if c not in known]
        if bad or not self.categories:
            raise ValueError(f"categories must be drawn from {sorted(known)}, got {self.categories}")
        if self.distinct_categories and self.n_objects > len(self.categories):
            raise ValueError("distinct_categories needs n_objects <= number of categories")

    def to_dict(self):
        d = asdict(self)
        d["image"] = list(self.image)
        d["categories"] = list(self.categories)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        fields = set(cls.__dataclass_fields__)
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown scene spec field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class SceneObject:
    category: int
    bbox: BBox
    keypoints: list[tuple[float, float, int]]      # (x, y, slot)
    links: list[tuple[int, int]]                    # local keypoint indices


@dataclass
class Scene:
    image: tuple[int, int]
    objects: list[SceneObject]
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_WIDTH)))

    def keypoints(self) -> list[Keypoint]:
        out = []
        for inst, obj in enumerate(self.objects):
            for x, y, slot in obj.keypoints:
                out.append(Keypoint(x, y, obj.category, inst, slot))
        return out

    def links(self) -> set[tuple[int, int]]:
        """Global (keypoint-enumeration order) link set."""
        out = set()
        base = 0
        for obj in self.objects:
            for i, j in obj.links:
                out.add((base + min(i, j), base + max(i, j)))
            base += len(obj.keypoints)
        return out

    @property
    def boxes(self) -> list[BBox]:
        return [o.bbox for o in self.objects]

    def to_json(self) -> dict:
        return {
            "image": list(self.image),
            "objects": [{
                "category": o.category,
                "bbox": list(o.bbox.as_tuple()),
                "keypoints": [[x, y, s] for x, y, s in o.keypoints],
                "links": [list(e) for e in o.links],
            } for o in self.objects],
            "features": self.features.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "Scene":
        objs = [SceneObject(int(o["category"]), BBox.from_seq(o["bbox"]),
                            [(float(x), float(y), int(s)) for x, y, s in o["keypoints"]],
                            [(int(i), int(j)) for i, j in o["links"]]) for o in d["objects"]]
        feats = np.array(d["features"], dtype=np.float64).reshape(-1, FEATURE_WIDTH)
        return cls(tuple(d["image"]), objs, feats)


def check_scene(scene: Scene) -> None:
    """Raise ValueError unless every object matches its template."""
    tmpl = template_map()
    n = 0
    for inst, obj in enumerate(scene.objects):
        t = tmpl[obj.category]
        if len(obj.keypoints) != t.k:
            raise ValueError(f"object {inst} has {len(obj.keypoints)} keypoints, template wants {t.k}")
        if sorted(s for _, _, s in obj.keypoints) != list(range(t.k)):
            raise ValueError(f"object {inst} slots are not a permutation of 0..{t.k - 1}")
        for i, j in obj.links:
            si, sj = obj.keypoints[i][2], obj.keypoints[j][2]
            if not t.skeleton[si, sj]:
                raise ValueError(f"object {inst} link ({i}, {j}) is not in the skeleton")
        for x, y, _ in obj.keypoints:
            if not (0 <= x < scene.image[0] and 0 <= y < scene.image[1]):
                raise ValueError(f"object {inst} keypoint ({x}, {y}) outside the image")
        n += t.k
    if scene.features.shape != (n, FEATURE_WIDTH):
        raise ValueError(f"feature matrix {scene.features.shape} does not match {n} keypoints")


def _pose(t: InstanceTemplate, o: ObjectSpec) -> np.ndarray:
    c, s = math.cos(o.rotation), math.sin(o.rotation)
    R = np.array([[c, -s], [s, c]])
    return o.scale * t.layout @ R.T + np.asarray(o.translation, dtype=np.float64)


def _box(points, scale) -> BBox:
    m = BOX_MARGIN * scale
    lo, hi = points.min(0) - m, points.max(0) + m
    return BBox(lo[0], lo[1], hi[0], hi[1])


def _inside(points, box: BBox, image) -> bool:
    return (box.x_min >= 0 and box.y_min >= 0 and box.x_max <= image[0] and box.y_max <= image[1])


def _sample_objects(spec: SceneSpec, gen) -> list[ObjectSpec]:
    tmpl = template_map()
    W, H = spec.image
    if spec.distinct_categories:
        cats = list(gen.permutation(spec.categories)[:spec.n_objects])
    else:
        cats = list(gen.choice(spec.categories, size=spec.n_objects))
    if spec.overlap > 0 and len(cats) >= 2:
        cats[1] = cats[0]
    placed: list[tuple[ObjectSpec, BBox]] = []
    for n, c in enumerate(cats):
        for _ in range(500):
            scale = gen.uniform(*spec.scale_range)
            rot = gen.uniform(-spec.rotation_range, spec.rotation_range) if spec.rotation_range else 0.0
            o = ObjectSpec(int(c), (0.0, 0.0), float(scale), float(rot))
            pts = _pose(tmpl[int(c)], o)
            box = _box(pts, scale)
            lo_x, hi_x = -box.x_min, W - box.x_max
            lo_y, hi_y = -box.y_min, H - box.y_max
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            o.translation = (float(gen.uniform(lo_x, hi_x)), float(gen.uniform(lo_y, hi_y)))
            b = _box(_pose(tmpl[int(c)], o), scale)
            # start disjoint; the occluding pair is slid together afterwards
            if all(_gap(b, pb) > 0 for _, pb in placed):
                placed.append((o, b))
                break
        else:
            raise PlacementError(f"could not place object {n} without overlap in a {W}x{H} image")
    return [o for o, _ in placed]


def _gap(a: BBox, b: BBox) -> float:
    return max(b.x_min - a.x_max, a.x_min - b.x_max, b.y_min - a.y_max, a.y_min - b.y_max)


def _apply_overlap(objs: list[ObjectSpec], target: float, image) -> None:
    """Slide object 1 along the line between the two centres until the box
    IoU with object 0 matches ``target`` (bisection on the travel fraction)."""
    tmpl = template_map()
    a, b = objs[0], objs[1]
    box_a = _box(_pose(tmpl[a.category], a), a.scale)
    start = np.asarray(b.translation, dtype=np.float64)
    goal = np.asarray(a.translation, dtype=np.float64)

    def iou_at(frac):
        b.translation = tuple(start + frac * (goal - start))
        return iou(box_a, _box(_pose(tmpl[b.category], b), b.scale))

    if iou_at(1.0) < target:
        b.translation = tuple(start)
        raise PlacementError(f"overlap {target} unreachable for this object pair")
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if iou_at(mid) < target:
            lo = mid
        else:
            hi = mid
    iou_at(hi)


def generate(spec: SceneSpec, seed) -> Scene:
    """One scene, a pure function of ``(spec, seed)``."""
    gen = numerics.rng(seed)
    tmpl = template_map()
    codes = feature_codebook()
    W, H = spec.image
    if spec.objects is not None:
        objs = [ObjectSpec(o.category, tuple(o.translation), o.scale, o.rotation) for o in spec.objects]
    else:
        objs = _sample_objects(spec, gen)
    if spec.overlap > 0 and len(objs) >= 2:
        _apply_overlap(objs, spec.overlap, spec.image)
    objects = []
    feats = []
    for n, o in enumerate(objs):
        t = tmpl[o.category]
        pts = _pose(t, o)
        box = _box(pts, o.scale)
        if not _inside(pts, box, spec.image):
            raise PlacementError(f"object {n} ({t.name}) leaves the {W}x{H} image")
        if spec.position_jitter > 0:
            pts = pts + gen.normal(0.0, spec.position_jitter, size=pts.shape)
            pts = np.clip(pts, [box.x_min, box.y_min], [box.x_max, box.y_max])
        kps = [(float(x), float(y), s) for s, (x, y) in enumerate(pts)]
        objects.append(SceneObject(o.category, box, kps, t.edges()))
        for s in range(t.k):
            f = codes[(o.category, s)]
            if spec.feature_noise > 0:
                f = f + gen.normal(0.0, spec.feature_noise, size=FEATURE_WIDTH)
            feats.append(f)
    features = np.array(feats, dtype=np.float64).reshape(-1, FEATURE_WIDTH)
    return Scene(tuple(spec.image), objects, features)


def scene_seed(seed: int, index: int):
    return (int(seed), int(index))


def generate_many(n: int, spec: SceneSpec, seed: int) -> list[Scene]:
    return [generate(spec, scene_seed(seed, i)) for i in range(n)]


def to_graph(scene: Scene) -> Graph:
    n = sum(len(o.keypoints) for o in scene.objects)
    A = np.eye(n)
    for i, j in scene.links():
        A[i, j] = A[j, i] = 1.0
    cat = [o.category for o in scene.objects for _ in o.keypoints]
    inst = [k for k, o in enumerate(scene.objects) for _ in o.keypoints]
    return Graph(A, scene.features, np.array(cat, dtype=np.int64), np.array(inst, dtype=np.int64))


def dataset_lines(n: int, spec: SceneSpec, seed: int) -> Iterable[str]:
    yield json.dumps({"version": FORMAT_VERSION, "seed": int(seed), "spec": spec.to_dict()}, sort_keys=True)
    for i in range(n):
        yield json.dumps(generate(spec, scene_seed(seed, i)).to_json(), sort_keys=True)


def emit_dataset(n: int, spec: SceneSpec, seed: int, path) -> Path:
    """Write ``n`` scenes as JSON lines (header first), atomically."""
    text = "\n".join(dataset_lines(n, spec, seed)) + "\n"
    numerics.atomic_write(path, text)
    return Path(path)


def load_dataset(path) -> tuple[dict, list[Scene]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: missing header line")
    header = json.loads(lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    return header, [Scene.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
