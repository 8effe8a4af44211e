"""Single-channel keypoint heatmaps with sub-cell offset maps.

Grids are indexed ``[row, col]`` = ``[y, x]``.  A keypoint at image position
``(x, y)`` lives in cell ``(floor(x / stride), floor(y / stride))``; the
offset maps hold, for every cell inside a keypoint's window, the vector from
that cell's centre to the keypoint in cell units, so decoding a peak cell
``(i, j)`` gives ``((i + 0.5 + O_x) * stride, (j + 0.5 + O_y) * stride)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BCE_EPS = 1e-7
DEFAULT_STRIDE = 4


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    category: int = 0
    instance: int = 0
    slot: int = 0


@dataclass(frozen=True)
class KernelSchedule:
    sizes: tuple[int, ...] = (7, 5, 3)

    def __post_init__(self):
        sizes = tuple(int(k) for k in self.sizes)
        object.__setattr__(self, "sizes", sizes)
        if not sizes:
            raise ValueError("schedule needs at least one stage")
        for k in sizes:
            if k <= 0 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"kernel sizes must not grow across stages: {sizes}")

    def __len__(self):
        return len(self.sizes)

    def __iter__(self):
        return iter(self.sizes)


DEFAULT_SCHEDULE = KernelSchedule((7, 5, 3))


@dataclass
class HeatmapStack:
    H: np.ndarray
    O_x: np.ndarray
    O_y: np.ndarray
    stride: float = DEFAULT_STRIDE
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        self.O_x = np.asarray(self.O_x, dtype=np.float64)
        self.O_y = np.asarray(self.O_y, dtype=np.float64)
        if not (self.H.shape == self.O_x.shape == self.O_y.shape) or self.H.ndim != 2:
            raise ValueError(
                f"grid extents differ: H{self.H.shape} O_x{self.O_x.shape} O_y{self.O_y.shape}")
        if self.mask is None:
            self.mask = self.H > 0
        else:
            self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def shape(self):
        return self.H.shape

    @classmethod
    def zeros(cls, rows, cols, stride=DEFAULT_STRIDE) -> "HeatmapStack":
        z = np.zeros((rows, cols))
        return cls(z, z.copy(), z.copy(), stride)


def sigma_for(kernel: int) -> float:
    return kernel / 6.0


def grid_extent(image_size, stride=DEFAULT_STRIDE) -> tuple[int, int]:
    """``(cols, rows)`` of the heatmap grid covering an image of ``(W, H)``."""
    w, h = image_size
    return int(math.ceil(w / stride)), int(math.ceil(h / stride))


def render_gt(keypoints: Iterable[Keypoint], grid, stride=DEFAULT_STRIDE, kernel: int = 7) -> HeatmapStack:
    """Rasterise keypoints into a ground-truth stack.

    ``grid`` is ``(cols, rows)``.  Each keypoint contributes a Gaussian with
    sigma = kernel / 6 truncated to its ``kernel x kernel`` window and peaking
    at 1 on its own cell; windows are max-combined.
    """
    if kernel <= 0 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    cols, rows = int(grid[0]), int(grid[1])
    H = np.zeros((rows, cols))
    O_x = np.zeros((rows, cols))
    O_y = np.zeros((rows, cols))
    best_d2 = np.full((rows, cols), np.inf)
    r = kernel // 2
    sigma = sigma_for(kernel)
    offs = np.arange(-r, r + 1)
    window = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2.0 * sigma * sigma))
    for kp in keypoints:
        u, v = kp.x / stride, kp.y / stride
        ci, cj = int(math.floor(u)), int(math.floor(v))
        if not (0 <= ci < cols and 0 <= cj < rows):
            raise RangeError(f"keypoint ({kp.x}, {kp.y}) falls outside a {cols}x{rows} grid")
        j0, j1 = max(cj - r, 0), min(cj + r, rows - 1)
        i0, i1 = max(ci - r, 0), min(ci + r, cols - 1)
        win = window[j0 - cj + r:j1 - cj + r + 1, i0 - ci + r:i1 - ci + r + 1]
        H[j0:j1 + 1, i0:i1 + 1] = np.maximum(H[j0:j1 + 1, i0:i1 + 1], win)
        ox = u - (np.arange(i0, i1 + 1) + 0.5)
        oy = v - (np.arange(j0, j1 + 1) + 0.5)
        d2 = ox[None, :] ** 2 + oy[:, None] ** 2
        sub = best_d2[j0:j1 + 1, i0:i1 + 1]
        closer = d2 < sub
        sub[closer] = d2[closer]
        O_x[j0:j1 + 1, i0:i1 + 1][closer] = np.broadcast_to(ox[None, :], d2.shape)[closer]
        O_y[j0:j1 + 1, i0:i1 + 1][closer] = np.broadcast_to(oy[:, None], d2.shape)[closer]
    return HeatmapStack(H, O_x, O_y, stride, mask=np.isfinite(best_d2))


def _smooth_l1(d):
    a = np.abs(d)
    val = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    grad = np.where(a < 1.0, d, np.sign(d))
    return val, grad


def kd_loss_grad(pred: HeatmapStack, gt: HeatmapStack, theta: float = 1.0,
                 upsilon: float = 1.0) -> tuple[float, HeatmapStack]:
    """Keypoint-detection loss and its gradient w.r.t. ``pred``'s three grids.

    theta * mean_cells BCE(H, H*) + upsilon * mean over supervised cells of
    SmoothL1(O_x - O_x*) + SmoothL1(O_y - O_y*).  Supervised cells are those
    inside some keypoint window of ``gt``.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch {pred.shape} vs {gt.shape}")
    n = pred.H.size
    h = np.clip(pred.H, BCE_EPS, 1.0 - BCE_EPS)
    t = gt.H
    bce = -(t * np.log(h) + (1.0 - t) * np.log(1.0 - h))
    inside = (pred.H > BCE_EPS) & (pred.H < 1.0 - BCE_EPS)
    dH = np.where(inside, (h - t) / (h * (1.0 - h)), 0.0) * (theta / n)
    loss = theta * float(bce.sum()) / n

    m = gt.mask
    k = int(m.sum())
    dOx = np.zeros_like(pred.O_x)
    dOy = np.zeros_like(pred.O_y)
    if k and upsilon != 0.0:
        vx, gx = _smooth_l1(pred.O_x - gt.O_x)
        vy, gy = _smooth_l1(pred.O_y - gt.O_y)
        loss += upsilon * float(vx[m].sum() + vy[m].sum()) / k
        dOx[m] = upsilon * gx[m] / k
        dOy[m] = upsilon * gy[m] / k
    return loss, HeatmapStack(dH, dOx, dOy, pred.stride, mask=m)


def kd_loss(pred: HeatmapStack, gt: HeatmapStack, theta: float = 1.0, upsilon: float = 1.0) -> float:
    return kd_loss_grad(pred, gt, theta, upsilon)[0]


def local_maxima(H: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask of cells strictly greater than all 8 neighbours and above
    ``threshold``."""
    padded = np.pad(H, 1, constant_values=-np.inf)
    rows, cols = H.shape
    peak = H > threshold
    for dj in (-1, 0, 1):
        for di in (-1, 0, 1):
            if dj == 0 and di == 0:
                continue
            peak &= H > padded[1 + dj:1 + dj + rows, 1 + di:1 + di + cols]
    return peak


def decode(stack: HeatmapStack, threshold: float = 0.5, max_peaks: int = 100,
           use_offsets: bool = True) -> list[tuple[float, float, float]]:
    """Peaks of ``stack.H`` as ``(x, y, score)`` in image pixels, highest
    score first (ties in row-major cell order)."""
    peak = local_maxima(stack.H, threshold)
    js, is_ = np.nonzero(peak)  # row-major order
    scores = stack.H[js, is_]
    order = sorted(range(len(js)), key=lambda n: (-scores[n], n))[:max_peaks]
    out = []
    for n in order:
        j, i = int(js[n]), int(is_[n])
        ox = stack.O_x[j, i] if use_offsets else 0.0
        oy = stack.O_y[j, i] if use_offsets else 0.0
        out.append(((i + 0.5 + ox) * stack.stride, (j + 0.5 + oy) * stack.stride, float(scores[n])))
    return out


def support_size(keypoints: Sequence[Keypoint], grid, stride=DEFAULT_STRIDE, kernel=7, level=0.01) -> int:
    """Number of cells where the rendered confidence exceeds ``level``."""
    return int((render_gt(keypoints, grid, stride, kernel).H > level).sum())


def to_pgm(H: np.ndarray) -> bytes:
    """8-bit binary PGM (P5), pixel = round(255 * H)."""
    rows, cols = H.shape
    px = np.rint(np.clip(H, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{cols} {rows}\n255\n".encode() + px.tobytes()


def to_ppm(rgb: np.ndarray) -> bytes:
    """Binary PPM (P6) from a ``rows x cols x 3`` uint8 array."""
    rows, cols = rgb.shape[:2]
    return f"P6\n{cols} {rows}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def read_pnm(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes written by :func:`to_pgm` / :func:`to_ppm`."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, cols, rows, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PNM supported")
    channels = {b"P5": 1, b"P6": 3}[magic]
    arr = np.frombuffer(data[pos:pos + rows * cols * channels], dtype=np.uint8)
    return arr.reshape((rows, cols, channels)) if channels == 3 else arr.reshape((rows, cols))
