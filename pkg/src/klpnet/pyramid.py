"""Feature-pyramid topology (top-down FPN path, bottom-up aggregation path,
extra coarse levels), cross-stage feature aggregation and a MAC/parameter
cost model.

Feature maps are ``(rows, cols, channels)`` float64 arrays.  Every ``g`` and
``T`` site is a 1x1 mix, i.e. a ``C_in x C_out`` matrix applied per cell.

Cost convention (see :func:`flops_estimate`): a 1x1 mix over a ``W x H`` map
from ``C_in`` to ``C_out`` channels costs ``W*H*C_in*C_out`` multiply-
accumulates (MACs, not 2xMACs) and ``C_in*C_out`` parameters; a 2x resample
costs ``W*H*C`` reads of its input; concatenation is free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics
from .heatmap import (HeatmapStack, KernelSchedule, Keypoint, decode, grid_extent,
                      kd_loss_grad, render_gt)
from .numerics import ShapeError, concat, resample2x, sigmoid


class TrainingError(RuntimeError):
    pass


# -- 1x1 mixing ---------------------------------------------------------------

def mix(x, W) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if x.ndim != 3 or W.ndim != 2 or x.shape[2] != W.shape[0]:
        raise ShapeError(f"cannot mix map {x.shape} with weights {W.shape}")
    r, c, ch = x.shape
    return (x.reshape(r * c, ch) @ W).reshape(r, c, W.shape[1])


def mix_grad(x, W, d_out):
    """Gradients of a 1x1 mix w.r.t. its weights and its input."""
    r, c, ch = x.shape
    flat = x.reshape(r * c, ch)
    d = d_out.reshape(r * c, W.shape[1])
    return flat.T @ d, (d @ W.T).reshape(x.shape)


@dataclass
class FeatureMap:
    level: int
    tensor: np.ndarray

    @property
    def extent(self):
        return self.tensor.shape[:2]

    @property
    def channels(self):
        return self.tensor.shape[2]


MixParams = dict  # site name -> C_in x C_out matrix


def _levels(maps: Mapping[int, np.ndarray]) -> list[int]:
    lv = sorted(maps)
    if not lv or lv != list(range(lv[0], lv[-1] + 1)):
        raise ShapeError(f"levels must be contiguous, got {lv}")
    for a, b in zip(lv, lv[1:]):
        ea, eb = maps[a].shape[:2], maps[b].shape[:2]
        if (ea[0], ea[1]) != (2 * eb[0], 2 * eb[1]):
            raise ShapeError(f"level {b} extent {eb} is not half of level {a} extent {ea}")
    return lv


def fpn_topdown(P: Mapping[int, np.ndarray], params: MixParams) -> dict[int, np.ndarray]:
    """C_top = g(P_top); C_l = concat(U(C_{l+1}), g(P_l)) for lower levels."""
    lv = _levels(P)
    C = {lv[-1]: mix(P[lv[-1]], params[f"g_P{lv[-1]}"])}
    for l in reversed(lv[:-1]):
        C[l] = concat(resample2x(C[l + 1], "up"), mix(P[l], params[f"g_P{l}"]), axis=2)
    return dict(sorted(C.items()))


def bottomup_aggregate(C: Mapping[int, np.ndarray], params: MixParams) -> dict[int, np.ndarray]:
    """N_bottom = g(C_bottom); N_l = concat(D(N_{l-1}), g(C_l)) going up."""
    lv = _levels(C)
    N = {lv[0]: mix(C[lv[0]], params[f"g_C{lv[0]}"])}
    for l in lv[1:]:
        N[l] = concat(resample2x(N[l - 1], "down"), mix(C[l], params[f"g_C{l}"]), axis=2)
    return N


def extend_levels(C: Mapping[int, np.ndarray], extra: int = 2) -> dict[int, np.ndarray]:
    """Append ``extra`` coarser levels, each the 2x2 mean of the one below
    (C8 = D(C7), C9 = D(C8) for the default pyramid)."""
    lv = _levels(C)
    out = dict(C)
    for l in range(lv[-1] + 1, lv[-1] + 1 + extra):
        out[l] = resample2x(out[l - 1], "down")
    return out


def csfa_fine(f_coarse: FeatureMap, f_prev_out: FeatureMap, T) -> FeatureMap:
    """T(concat(f_coarse, f_prev_out)) on equal extents."""
    if f_coarse.extent != f_prev_out.extent:
        raise ShapeError(f"extent mismatch {f_coarse.extent} vs {f_prev_out.extent}")
    return FeatureMap(f_coarse.level, mix(concat(f_coarse.tensor, f_prev_out.tensor, axis=2), T))


def csfa_out(f_fine: FeatureMap, f_prev_fine: FeatureMap, T) -> FeatureMap:
    """T(concat(D(f_fine), U(f_prev_fine))).  ``f_fine`` must be twice and
    ``f_prev_fine`` half the output extent, which is that of the previous
    stage's layer."""
    down = resample2x(f_fine.tensor, "down")
    up = resample2x(f_prev_fine.tensor, "up")
    if down.shape[:2] != up.shape[:2]:
        raise ShapeError(f"resampled extents disagree: {down.shape[:2]} vs {up.shape[:2]}")
    return FeatureMap(f_prev_fine.level - 1, mix(concat(down, up, axis=2), T))


def csfa_fine_grad(f_coarse: FeatureMap, f_prev_out: FeatureMap, T, d_out):
    x = concat(f_coarse.tensor, f_prev_out.tensor, axis=2)
    return mix_grad(x, T, d_out)[0]


def csfa_out_grad(f_fine: FeatureMap, f_prev_fine: FeatureMap, T, d_out):
    x = concat(resample2x(f_fine.tensor, "down"), resample2x(f_prev_fine.tensor, "up"), axis=2)
    return mix_grad(x, T, d_out)[0]


# -- configuration and cost model ---------------------------------------------

@dataclass
class PyramidConfig:
    levels: tuple[int, int] = (3, 7)
    base_extent: tuple[int, int] = (64, 64)
    in_channels: tuple[int, ...] | int = 8
    g_width: int = 4
    extra_levels: int = 2
    stages: int = 0
    stage_channels: int = 0
    stage_blocks: int = 0

    def __post_init__(self):
        lo, hi = (int(v) for v in self.levels)
        self.levels = (lo, hi)
        self.base_extent = tuple(int(v) for v in self.base_extent)
        n = hi - lo + 1 if hi >= lo else 0
        if isinstance(self.in_channels, int):
            self.in_channels = (self.in_channels,) * n
        self.in_channels = tuple(int(c) for c in self.in_channels)
        if len(self.in_channels) != n:
            raise ValueError(f"need {n} input channel counts, got {len(self.in_channels)}")
        if any(c <= 0 for c in self.in_channels) or (n and self.g_width <= 0):
            raise ValueError("channel counts must be positive")
        if self.extra_levels < 0 or self.stages < 0 or self.stage_blocks < 0:
            raise ValueError("counts must be non-negative")
        if self.stages and self.stage_channels <= 0:
            raise ValueError("stage_channels must be positive when stages > 0")
        depth = (n + self.extra_levels - 1) if n else 0
        for e in self.base_extent:
            if e <= 0 or (depth and e % (2 ** depth)):
                raise ValueError(f"base extent {self.base_extent} cannot be halved {depth} times")

    @property
    def n_levels(self) -> int:
        lo, hi = self.levels
        return max(hi - lo + 1, 0)

    def extent(self, level) -> tuple[int, int]:
        k = level - self.levels[0]
        return (self.base_extent[0] >> k, self.base_extent[1] >> k)

    def level_range(self) -> list[int]:
        lo, hi = self.levels
        return list(range(lo, hi + 1)) if self.n_levels else []

    def all_levels(self) -> list[int]:
        lv = self.level_range()
        return lv + list(range(lv[-1] + 1, lv[-1] + 1 + self.extra_levels)) if lv else []


@dataclass
class CostRow:
    part: str
    site: str
    level: int
    extent: tuple[int, int]
    c_in: int
    c_out: int
    macs: int = 0
    params: int = 0
    reads: int = 0


@dataclass
class FlopsReport:
    rows: list[CostRow] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def reads(self) -> int:
        return sum(r.reads for r in self.rows)

    def by_part(self) -> dict[str, tuple[int, int, int]]:
        out: dict[str, list[int]] = {}
        for r in self.rows:
            acc = out.setdefault(r.part, [0, 0, 0])
            acc[0] += r.macs
            acc[1] += r.params
            acc[2] += r.reads
        return {k: tuple(v) for k, v in out.items()}

    def to_text(self) -> str:
        head = ("# MACs: 1x1 mix = W*H*C_in*C_out multiply-accumulates (not 2x); "
                "params = C_in*C_out; resample = W*H*C input reads\n")
        cols = f"{'part':<9} {'site':<10} {'level':>5} {'extent':>9} {'c_in':>5} {'c_out':>5} {'MACs':>12} {'params':>9} {'reads':>9}"
        lines = [head + cols]
        for r in self.rows:
            ext = f"{r.extent[0]}x{r.extent[1]}"
            lines.append(f"{r.part:<9} {r.site:<10} {r.level:>5} {ext:>9} {r.c_in:>5} {r.c_out:>5} "
                         f"{r.macs:>12} {r.params:>9} {r.reads:>9}")
        lines.append(f"{'total':<9} {'':<10} {'':>5} {'':>9} {'':>5} {'':>5} "
                     f"{self.macs:>12} {self.params:>9} {self.reads:>9}")
        return "\n".join(lines) + "\n"


def channel_plan(config: PyramidConfig) -> tuple[dict[int, int], dict[int, int]]:
    """Channel counts of every C and N map implied by ``config``."""
    lv = config.level_range()
    g = config.g_width
    C: dict[int, int] = {}
    for l in reversed(lv):
        C[l] = g if l == lv[-1] else C[l + 1] + g
    for l in config.all_levels()[len(lv):]:
        C[l] = C[l - 1]
    N: dict[int, int] = {}
    for l in config.all_levels():
        N[l] = g if l == lv[0] else N[l - 1] + g
    return dict(sorted(C.items())), N


def flops_estimate(config: PyramidConfig) -> FlopsReport:
    rep = FlopsReport()
    lv = config.level_range()
    if not lv:
        return rep
    g = config.g_width
    C, N = channel_plan(config)
    lo = lv[0]

    def add_mix(part, site, level, c_in, c_out):
        r, c = config.extent(level)
        rep.rows.append(CostRow(part, site, level, (r, c), c_in, c_out, r * c * c_in * c_out, c_in * c_out))

    def add_read(part, site, level, ch):
        r, c = config.extent(level)
        rep.rows.append(CostRow(part, site, level, (r, c), ch, ch, reads=r * c * ch))

    for l in reversed(lv):
        add_mix("topdown", f"g_P{l}", l, config.in_channels[l - lo], g)
        if l != lv[-1]:
            add_read("topdown", f"U(C{l + 1})", l + 1, C[l + 1])
    for l in config.all_levels()[len(lv):]:
        add_read("extend", f"D(C{l - 1})", l - 1, C[l - 1])
    for l in config.all_levels():
        add_mix("bottomup", f"g_C{l}", l, C[l], g)
        if l != lo:
            add_read("bottomup", f"D(N{l - 1})", l - 1, N[l - 1])
    if config.stages:
        sc = config.stage_channels
        for s in range(config.stages):
            if s == 0:
                add_mix("cklm", "stem", lo, N[lo], sc)
            else:
                add_mix("cklm", f"T{s + 1}", lo, 2 * sc, sc)
            for b in range(config.stage_blocks):
                add_mix("cklm", f"s{s + 1}b{b + 1}", lo, sc, sc)
            add_mix("cklm", f"head{s + 1}", lo, sc, 3)
    return rep


def init_mix_params(config: PyramidConfig, seed=0) -> MixParams:
    gen = numerics.rng(seed)
    C, _ = channel_plan(config)
    lo = config.levels[0]
    p = {}
    for l in config.level_range():
        p[f"g_P{l}"] = gen.normal(0.0, 1.0 / math.sqrt(config.in_channels[l - lo]),
                                  (config.in_channels[l - lo], config.g_width))
    for l in config.all_levels():
        p[f"g_C{l}"] = gen.normal(0.0, 1.0 / math.sqrt(C[l]), (C[l], config.g_width))
    return p


def run_topology(config: PyramidConfig, P: Mapping[int, np.ndarray], params: MixParams):
    """Full top-down, extension and bottom-up pass; returns (C, N)."""
    C = extend_levels(fpn_topdown(P, params), config.extra_levels)
    return C, bottomup_aggregate(C, params)


def toy_inputs(config: PyramidConfig, seed=0) -> dict[int, np.ndarray]:
    gen = numerics.rng(seed)
    lo = config.levels[0]
    return {l: gen.standard_normal(config.extent(l) + (config.in_channels[l - lo],))
            for l in config.level_range()}


# -- toy coarse-to-fine localiser ---------------------------------------------

BLOB_SCALES = (0.75, 1.5, 3.0)


@dataclass
class ToyData:
    keypoints: list[list[Keypoint]]
    features: np.ndarray            # scenes x rows x cols x channels
    grid: tuple[int, int]           # (cols, rows)
    stride: float


def toy_features(keypoints: Sequence[Keypoint], grid, stride, noise, gen) -> np.ndarray:
    """Per-cell evidence: Gaussian blobs of the nearest keypoint at several
    widths, the vector to it (saturating at one cell, and blob-weighted) and
    a constant channel.  Offsets are only linearly recoverable near the
    keypoint, so a sharper peak pays off in sub-pixel accuracy."""
    cols, rows = grid
    cu = np.arange(cols) + 0.5
    cv = np.arange(rows) + 0.5
    dx = np.full((rows, cols), np.inf)
    dy = np.full((rows, cols), np.inf)
    for kp in keypoints:
        ex = kp.x / stride - cu[None, :]
        ey = kp.y / stride - cv[:, None]
        closer = ex ** 2 + ey ** 2 < dx ** 2 + dy ** 2
        dx = np.where(closer, ex, dx)
        dy = np.where(closer, ey, dy)
    d2 = dx ** 2 + dy ** 2
    chans = [np.exp(-d2 / (2 * s * s)) for s in BLOB_SCALES]
    mid = chans[1]
    chans += [np.clip(dx, -1, 1), np.clip(dy, -1, 1), dx * mid, dy * mid, np.ones((rows, cols))]
    F = np.stack(chans, axis=-1)
    if noise > 0:
        F[..., :-1] += gen.normal(0.0, noise, F[..., :-1].shape)
    return F


def toy_dataset(n, seed, grid=(16, 16), stride=4.0, n_keypoints=(2, 4), min_sep=7.0, noise=0.1) -> ToyData:
    """Random keypoint sets (pairwise at least ``min_sep`` cells apart) with
    their noisy toy feature tensors."""
    gen = numerics.rng(seed)
    cols, rows = grid
    kps_all, feats = [], []
    for _ in range(n):
        k = int(gen.integers(n_keypoints[0], n_keypoints[1] + 1))
        pts: list[tuple[float, float]] = []
        while len(pts) < k:
            u, v = gen.uniform(0.5, cols - 0.5), gen.uniform(0.5, rows - 0.5)
            if all(math.hypot(u - a, v - b) >= min_sep for a, b in pts):
                pts.append((u, v))
        kps = [Keypoint(u * stride, v * stride, 0, i, 0) for i, (u, v) in enumerate(pts)]
        kps_all.append(kps)
        feats.append(toy_features(kps, grid, stride, noise, gen))
    return ToyData(kps_all, np.stack(feats), grid, stride)


def toy_from_scenes(scenes, seed, stride=4.0, noise=0.1) -> ToyData:
    """Toy features for the keypoints of synthetic scenes, all categories on
    one class-agnostic heatmap."""
    gen = numerics.rng(seed)
    grid = grid_extent(scenes[0].image, stride)
    kps_all, feats = [], []
    for sc in scenes:
        kps = sc.keypoints()
        kps_all.append(kps)
        feats.append(toy_features(kps, grid, stride, noise, gen))
    return ToyData(kps_all, np.stack(feats), grid, stride)


def default_toy_data(seed, n_train=24, n_test=24, noise=0.1):
    from .synthgen import SceneSpec, generate_many
    spec = SceneSpec()
    return (toy_from_scenes(generate_many(n_train, spec, 2 * int(seed)), (seed, 2), noise=noise),
            toy_from_scenes(generate_many(n_test, spec, 2 * int(seed) + 1), (seed, 3), noise=noise))


def _context(H):
    """3x3 neighbourhood of each cell of ``H`` (scenes x rows x cols) as 9 channels."""
    p = np.pad(H, ((0, 0), (1, 1), (1, 1)))
    r, c = H.shape[1:]
    return np.stack([p[:, 1 + a:1 + a + r, 1 + b:1 + b + c] for a in (-1, 0, 1) for b in (-1, 0, 1)], axis=-1)


@dataclass
class StageHead:
    T: np.ndarray | None     # transmission mix (None on the first stage)
    W: np.ndarray            # channels -> (logit, O_x, O_y)
    b: np.ndarray


def _stage_input(F0, prev):
    if prev is None:
        return F0
    H, Ox, Oy = prev
    return np.concatenate([F0, _context(H), Ox[..., None], Oy[..., None]], axis=-1)


def _apply(head: StageHead, X):
    Z = X if head.T is None else X @ head.T
    out = Z @ head.W + head.b
    return Z, sigmoid(out[..., 0]), out[..., 1], out[..., 2]


def _stage_loss(head: StageHead, X, gts, theta, upsilon):
    n = X.shape[0]
    Z, H, Ox, Oy = _apply(head, X)
    d_out = np.zeros(Z.shape[:-1] + (3,))
    total = 0.0
    for s in range(n):
        pred = HeatmapStack(H[s], Ox[s], Oy[s], gts[s].stride, mask=gts[s].mask)
        loss, g = kd_loss_grad(pred, gts[s], theta, upsilon)
        total += loss
        d_out[s, ..., 0] = g.H * H[s] * (1.0 - H[s])
        d_out[s, ..., 1] = g.O_x
        d_out[s, ..., 2] = g.O_y
    d_out /= n
    flatZ = Z.reshape(-1, Z.shape[-1])
    flatD = d_out.reshape(-1, 3)
    gT = None
    if head.T is not None:
        gT = X.reshape(-1, X.shape[-1]).T @ (flatD @ head.W.T)
    return total / n, (gT, flatZ.T @ flatD, flatD.sum(0))


def _fit_stage(X, gts, head: StageHead, lr, steps, theta=1.0, upsilon=1.0):
    """Gradient descent; a step that raises the loss is rejected and the step
    size halved."""
    loss, grads = _stage_loss(head, X, gts, theta, upsilon)
    losses = [loss]
    for step in range(steps):
        gT, gW, gb = grads
        trial = StageHead(None if head.T is None else head.T - lr * gT, head.W - lr * gW, head.b - lr * gb)
        t_loss, t_grads = _stage_loss(trial, X, gts, theta, upsilon)
        if math.isfinite(t_loss) and t_loss <= loss:
            head.T, head.W, head.b = trial.T, trial.W, trial.b
            loss, grads = t_loss, t_grads
        else:
            lr *= 0.5
            if lr < 1e-12:
                raise TrainingError(f"localiser step size vanished at step {step}")
        losses.append(loss)
    if not math.isfinite(loss):
        raise TrainingError("localiser loss is not finite")
    return losses


def localization_error(keypoints: Sequence[Keypoint], stack: HeatmapStack, threshold=0.3) -> float:
    """Mean distance (pixels) from each keypoint to its nearest decoded peak;
    a keypoint with no peak at all counts as the image diagonal."""
    peaks = decode(stack, threshold, max_peaks=4 * max(len(keypoints), 1))
    rows, cols = stack.shape
    miss = math.hypot(rows, cols) * stack.stride
    errs = []
    for kp in keypoints:
        if not peaks:
            errs.append(miss)
        else:
            errs.append(min(math.hypot(kp.x - x, kp.y - y) for x, y, _ in peaks))
    return float(np.mean(errs))


@dataclass
class LocalizerResult:
    errors: list[float]
    heads: list[StageHead]
    losses: list[list[float]]


def train_toy_localizer(stages: int = 3, schedule: KernelSchedule | Sequence[int] = (7, 5, 3),
                        data: tuple[ToyData, ToyData] | None = None, seed=0, steps: int = 300,
                        lr: float = 0.5, noise: float = 0.1) -> LocalizerResult:
    """Cascade of linear per-cell heads, stage s supervised with the kernel
    ``schedule[s]``; stage s > 1 sees the input features aggregated with the
    previous stage's output through a learned transmission mix.  Returns
    held-out mean decode error per stage (pixels)."""
    if not isinstance(schedule, KernelSchedule):
        schedule = KernelSchedule(tuple(schedule))
    if stages < 1 or len(schedule) != stages:
        raise ValueError(f"need {stages} kernel sizes, schedule has {len(schedule)}")
    if data is None:
        data = default_toy_data(seed, noise=noise)
    train, test = data
    gen = numerics.rng((seed, 4))
    prev_tr = prev_te = None
    errors, heads, losses = [], [], []
    for s, k in enumerate(schedule):
        gts = [render_gt(kps, train.grid, train.stride, k) for kps in train.keypoints]
        X = _stage_input(train.features, prev_tr)
        c = X.shape[-1]
        if s == 0:
            head = StageHead(None, gen.normal(0.0, 0.01, (c, 3)), np.array([-2.0, 0.0, 0.0]))
        else:
            # start from the previous stage's solution, new channels off
            prev = heads[-1]
            W = np.zeros((c, 3))
            W[:prev.W.shape[0]] = prev.W if prev.T is None else prev.T[:prev.W.shape[0], :prev.W.shape[0]] @ prev.W
            head = StageHead(np.eye(c), W, prev.b.copy())
        losses.append(_fit_stage(X, gts, head, lr, steps))
        heads.append(head)
        _, H, Ox, Oy = _apply(head, X)
        prev_tr = (H, Ox, Oy)
        Xt = _stage_input(test.features, prev_te)
        _, Ht, Oxt, Oyt = _apply(head, Xt)
        prev_te = (Ht, Oxt, Oyt)
        errs = [localization_error(kps, HeatmapStack(Ht[i], Oxt[i], Oyt[i], test.stride))
                for i, kps in enumerate(test.keypoints)]
        errors.append(float(np.mean(errs)))
    return LocalizerResult(errors, heads, losses)


def mix_cost(extent, c_in: int, c_out: int) -> tuple[int, int]:
    """(MACs, params) of a single 1x1 site."""
    r, c = extent
    return r * c * c_in * c_out, c_in * c_out


# Small configurations whose counts are easy to derive by hand:
#   single    one level, 4x4, 2 -> 3 channels: g_P3 96 MACs + g_C3 144 MACs
#   two-level levels 3..4, 8x8 base, inputs (4, 6), g width 2
#   extended  levels 3..4 plus one extra level, 8x8 base, g width 1
TOY_CONFIGS = {
    "single": PyramidConfig(levels=(3, 3), base_extent=(4, 4), in_channels=2, g_width=3, extra_levels=0),
    "two-level": PyramidConfig(levels=(3, 4), base_extent=(8, 8), in_channels=(4, 6), g_width=2, extra_levels=0),
    "extended": PyramidConfig(levels=(3, 4), base_extent=(8, 8), in_channels=2, g_width=1, extra_levels=1),
}
