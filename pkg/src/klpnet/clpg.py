"""Conditional link-prediction graph: a category-conditioned variational graph
autoencoder over keypoint nodes.

Encoder: four ``tanh(Ã X W_i)`` layers followed by linear mean / log-variance
heads.  Decoder: logistic inner products masked to same-category pairs.
All gradients are written out by hand; ``klpnet.gradcheck`` certifies them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .numerics import ShapeError, sigmoid, softplus

LOGVAR_CLAMP = 30.0
N_LAYERS = 4


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass
class Graph:
    A: np.ndarray
    X: np.ndarray
    cat: np.ndarray
    inst: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.cat = np.asarray(self.cat, dtype=np.int64)
        if self.inst is not None:
            self.inst = np.asarray(self.inst, dtype=np.int64)
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.X.shape[0] != n or self.cat.shape != (n,):
            raise ShapeError(f"inconsistent graph extents A{self.A.shape} X{self.X.shape} cat{self.cat.shape}")
        if not np.array_equal(self.A, self.A.T):
            raise ValueError("adjacency must be symmetric")
        if not np.all(np.diag(self.A) == 1.0):
            raise ValueError("adjacency diagonal must be 1")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("node features must be finite")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def subgraph(self, nodes) -> "Graph":
        idx = np.asarray(nodes, dtype=np.int64)
        return Graph(self.A[np.ix_(idx, idx)], self.X[idx], self.cat[idx],
                     None if self.inst is None else self.inst[idx])

    def instance_subgraphs(self) -> list["Graph"]:
        if self.inst is None:
            return [self]
        return [self.subgraph(np.flatnonzero(self.inst == i)) for i in np.unique(self.inst)]


@dataclass
class ClpgParams:
    W: list[np.ndarray]
    W_mu: np.ndarray
    W_s: np.ndarray
    n_categories: int = 0

    def __post_init__(self):
        if len(self.W) != N_LAYERS:
            raise ShapeError(f"expected {N_LAYERS} encoder layers, got {len(self.W)}")
        for a, b in zip(self.W, self.W[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"layer chain broken: {a.shape} -> {b.shape}")
        h = self.W[-1].shape[1]
        if self.W_mu.shape[0] != h or self.W_s.shape != self.W_mu.shape:
            raise ShapeError(f"heads {self.W_mu.shape}/{self.W_s.shape} do not fit hidden width {h}")

    @property
    def in_width(self) -> int:
        return self.W[0].shape[0]

    @property
    def latent(self) -> int:
        return self.W_mu.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {f"W_{i + 1}": w for i, w in enumerate(self.W)}
        out["W_mu"] = self.W_mu
        out["W_s"] = self.W_s
        return out

    @classmethod
    def from_named(cls, named, n_categories=0) -> "ClpgParams":
        return cls([named[f"W_{i + 1}"] for i in range(N_LAYERS)], named["W_mu"], named["W_s"], n_categories)

    def copy(self) -> "ClpgParams":
        return ClpgParams([w.copy() for w in self.W], self.W_mu.copy(), self.W_s.copy(), self.n_categories)

    @classmethod
    def init(cls, feature_width, hidden=16, latent=8, n_categories=0, seed=0) -> "ClpgParams":
        gen = numerics.rng(seed)
        dims = [feature_width + n_categories] + [hidden] * N_LAYERS

        def glorot(m, n):
            lim = math.sqrt(6.0 / (m + n))
            return gen.uniform(-lim, lim, size=(m, n))

        W = [glorot(dims[i], dims[i + 1]) for i in range(N_LAYERS)]
        return cls(W, glorot(hidden, latent), glorot(hidden, latent), n_categories)


@dataclass
class Posterior:
    mu: np.ndarray
    logvar: np.ndarray

    @property
    def var(self):
        return np.exp(self.logvar)


def normalize_adjacency(A) -> np.ndarray:
    """Symmetric normalisation D^-1/2 A D^-1/2 (A already holds self-loops)."""
    A = np.asarray(A, dtype=np.float64)
    d = A.sum(axis=1)
    if np.any(d <= 0):
        raise ValueError("zero-degree node; adjacency must carry self-loops")
    s = 1.0 / np.sqrt(d)
    return A * s[:, None] * s[None, :]


def condition(X, cat, n_categories) -> np.ndarray:
    """Append a one-hot category code to each feature row."""
    X = np.asarray(X, dtype=np.float64)
    if n_categories == 0:
        return X
    onehot = np.zeros((X.shape[0], n_categories))
    onehot[np.arange(X.shape[0]), np.asarray(cat)] = 1.0
    return np.concatenate([X, onehot], axis=1)


def _forward(g: Graph, p: ClpgParams, adjacency=None):
    At = normalize_adjacency(g.A if adjacency is None else adjacency)
    X0 = condition(g.X, g.cat, p.n_categories)
    if X0.shape[1] != p.in_width:
        raise ShapeError(f"feature width {X0.shape[1]} does not match encoder input {p.in_width}")
    hs = [X0]
    aggs = []
    for W in p.W:
        agg = At @ hs[-1]
        aggs.append(agg)
        hs.append(np.tanh(agg @ W))
    top = At @ hs[-1]
    mu = top @ p.W_mu
    raw = top @ p.W_s
    logvar = np.clip(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    cache = {"At": At, "hs": hs, "aggs": aggs, "top": top,
             "inside": (raw > -LOGVAR_CLAMP) & (raw < LOGVAR_CLAMP)}
    return Posterior(mu, logvar), cache


def encode(g: Graph, p: ClpgParams, adjacency=None) -> Posterior:
    """Posterior over node embeddings.  ``adjacency`` overrides ``g.A`` as the
    message-passing graph (e.g. self-loops only at inference)."""
    return _forward(g, p, adjacency)[0]


def _backward(p: ClpgParams, cache, d_mu, d_logvar) -> ClpgParams:
    At, hs, aggs, top = cache["At"], cache["hs"], cache["aggs"], cache["top"]
    d_raw = d_logvar * cache["inside"]
    g_mu = top.T @ d_mu
    g_s = top.T @ d_raw
    d_h = At @ (d_mu @ p.W_mu.T + d_raw @ p.W_s.T)
    gW = [None] * N_LAYERS
    for i in reversed(range(N_LAYERS)):
        d_pre = d_h * (1.0 - hs[i + 1] ** 2)
        gW[i] = aggs[i].T @ d_pre
        if i:
            d_h = At @ (d_pre @ p.W[i].T)
    return ClpgParams(gW, g_mu, g_s, p.n_categories)


def standard_normal(shape, seed) -> np.ndarray:
    return numerics.rng(seed).standard_normal(shape)


def sample(post: Posterior, seed=None, eps=None) -> np.ndarray:
    """Reparameterised draw Z = mu + exp(logvar / 2) * eps."""
    if eps is None:
        eps = standard_normal(post.mu.shape, seed)
    lv = np.clip(post.logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return post.mu + np.exp(0.5 * lv) * eps


def weights_from_responses(f, tau=1.0) -> np.ndarray:
    """F = tau * max(f, 0) on already-normalised responses, with a uniform
    fallback when every weight vanishes."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    F = tau * np.maximum(np.asarray(f, dtype=np.float64), 0.0)
    if not np.any(F > 0):
        return np.ones_like(F)
    return F


def node_weights(X, tau=1.0) -> np.ndarray:
    """Per-node activation weights from the row-mean response of ``X``,
    centred across nodes and scaled to unit max-abs."""
    f = np.asarray(X, dtype=np.float64).mean(axis=1)
    f = f - f.mean()
    scale = np.abs(f).max() if f.size else 0.0
    if scale <= 1e-12:
        f = np.zeros_like(f)
    else:
        f = f / scale
    return weights_from_responses(f, tau)


def same_category(cat) -> np.ndarray:
    cat = np.asarray(cat)
    return cat[:, None] == cat[None, :]


def rejuvenate(Z, cat) -> np.ndarray:
    """Â_ij = logistic(z_i . z_j) for same-category pairs, 0 otherwise."""
    Z = np.asarray(Z, dtype=np.float64)
    return np.where(same_category(cat), sigmoid(Z @ Z.T), 0.0)


def kl_term(post: Posterior) -> float:
    mu, lv = post.mu, post.logvar
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv))


def kl_grad(post: Posterior):
    return post.mu.copy(), 0.5 * (np.exp(post.logvar) - 1.0)


def _pair_mask(cat):
    n = len(cat)
    return same_category(cat) & ~np.eye(n, dtype=bool)


def reconstruction_loss(A, Z, cat, F) -> tuple[float, np.ndarray]:
    """Weighted BCE between logistic(Z Z^T) and ``A`` over unordered
    same-category off-diagonal pairs, with gradient w.r.t. ``Z``.

    Pair (i, j) is weighted by (F_i + F_j) / 2; edges are up-weighted by
    #non-edges / #edges.
    """
    A = np.asarray(A, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    pairs = np.triu(_pair_mask(cat), 1)
    if not pairs.any():
        return 0.0, np.zeros_like(Z)
    pos = pairs & (A > 0)
    neg = pairs & (A == 0)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    pos_weight = n_neg / n_pos if n_pos and n_neg else 1.0
    w = 0.5 * (F[:, None] + F[None, :])
    S = Z @ Z.T
    per_pair = np.where(pos, pos_weight * softplus(-S), softplus(S))
    loss = float(np.sum(np.where(pairs, w * per_pair, 0.0)))
    sig = sigmoid(S)
    dS = np.where(pos, pos_weight * (sig - 1.0), sig) * w * pairs
    dS = dS + dS.T  # S is symmetric in z; each unordered pair feeds both rows
    return loss, dS @ Z


@dataclass
class LinkLoss:
    value: float
    d_z: np.ndarray
    d_mu: np.ndarray
    d_logvar: np.ndarray
    recon: float = 0.0
    kl: float = 0.0


def link_loss(g: Graph, post: Posterior, z, c_pred, c_true, F, kl_weight: float = 1.0) -> LinkLoss:
    """Piecewise link loss.

    Mismatched category: ``(c_pred - c_true)^2`` (no parameter gradient).
    Matched: negative ELBO = weighted reconstruction BCE + KL.  ``d_z`` is the
    gradient through the reconstruction term; ``d_mu`` / ``d_logvar`` hold
    the KL part only.
    """
    z = np.asarray(z, dtype=np.float64)
    if c_pred != c_true:
        zero = np.zeros_like(post.mu)
        return LinkLoss(float((c_pred - c_true) ** 2), np.zeros_like(z), zero, zero.copy())
    recon, d_z = reconstruction_loss(g.A, z, g.cat, F)
    kl = kl_term(post)
    d_mu, d_lv = kl_grad(post)
    return LinkLoss(recon + kl_weight * kl, d_z, kl_weight * d_mu, kl_weight * d_lv, recon, kl)


def loss_and_grad(g: Graph, p: ClpgParams, eps, tau=1.0, adjacency=None, kl_weight=1.0):
    """Matched-branch link loss of one graph with fixed noise ``eps`` and its
    gradient w.r.t. every parameter matrix."""
    post, cache = _forward(g, p, adjacency)
    lv = post.logvar
    std = np.exp(0.5 * lv)
    z = post.mu + std * eps
    F = node_weights(g.X, tau)
    ll = link_loss(g, post, z, 0, 0, F, kl_weight)
    d_mu = ll.d_z + ll.d_mu
    d_lv = ll.d_z * eps * 0.5 * std + ll.d_logvar
    return ll, _backward(p, cache, d_mu, d_lv)


def total_loss(kd: float, link: float, alpha: float = 0.3, beta: float = 0.7) -> float:
    return alpha * kd + beta * link


@dataclass
class ClpgHyper:
    latent: int = 8
    hidden: int = 16
    tau: float = 1.0
    lr: float = 1e-2
    steps: int = 2000
    seed: int = 0
    batch: int = 8
    edge_dropout: float = 1.0
    kl_weight: float = 0.01
    optimizer: str = "gd"
    n_categories: int | None = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"optimizer must be 'adam' or 'gd', got {self.optimizer!r}")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch >= 1 and lr > 0 are required")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: ClpgParams
    loss: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)


def _observed(A, drop, gen):
    """Copy of ``A`` with each off-diagonal edge hidden with probability ``drop``."""
    if drop <= 0.0:
        return A
    n = A.shape[0]
    keep = np.triu(gen.random((n, n)) >= drop, 1)
    keep = keep | keep.T | np.eye(n, dtype=bool)
    return np.where(keep, A, 0.0)


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def steps(self, grads):
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        out = []
        for k, g in enumerate(grads):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            out.append(self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def train_clpg(dataset: Sequence[Graph], hyper: ClpgHyper | None = None) -> TrainResult:
    """Gradient descent on the mean matched-branch link loss over mini-batches
    of per-instance subgraphs.  Deterministic for a given ``hyper.seed``."""
    hyper = hyper or ClpgHyper()
    if not dataset:
        raise ValueError("empty dataset")
    widths = {g.X.shape[1] for g in dataset}
    if len(widths) != 1:
        raise ShapeError(f"graphs disagree on feature width: {sorted(widths)}")
    n_cat = hyper.n_categories
    if n_cat is None:
        n_cat = int(max(int(g.cat.max()) for g in dataset)) + 1
    parts = [sub for g in dataset for sub in g.instance_subgraphs() if sub.n >= 2]
    if not parts:
        raise ValueError("dataset holds no subgraph with two or more nodes")
    params = ClpgParams.init(widths.pop(), hyper.hidden, hyper.latent, n_cat, seed=(hyper.seed, 0))
    result = TrainResult(params)
    gen = numerics.rng((hyper.seed, 1))
    B = min(hyper.batch, len(parts))
    opt = _Adam(hyper.lr) if hyper.optimizer == "adam" else None
    for step in range(hyper.steps):
        picks = gen.choice(len(parts), size=B, replace=False)
        total = 0.0
        kl_sum = 0.0
        grads = None
        for k in picks:
            sub = parts[int(k)]
            eps = gen.standard_normal((sub.n, hyper.latent))
            obs = _observed(sub.A, hyper.edge_dropout, gen)
            ll, gr = loss_and_grad(sub, params, eps, hyper.tau, obs, hyper.kl_weight)
            total += ll.value
            kl_sum += ll.kl
            if grads is None:
                grads = gr
            else:
                grads = ClpgParams([a + b for a, b in zip(grads.W, gr.W)],
                                   grads.W_mu + gr.W_mu, grads.W_s + gr.W_s, n_cat)
        total /= B
        if not math.isfinite(total):
            raise TrainingError("link loss diverged", step)
        result.loss.append(total)
        result.kl.append(kl_sum / B)
        mean_grad = [g / B for g in grads.named().values()]
        if opt is None:
            steps_ = [hyper.lr * g for g in mean_grad]
        else:
            steps_ = opt.steps(mean_grad)
        new = [w - d for w, d in zip(params.named().values(), steps_)]
        params = ClpgParams(new[:N_LAYERS], new[N_LAYERS], new[N_LAYERS + 1], n_cat)
        if not all(np.all(np.isfinite(w)) for w in params.named().values()):
            raise TrainingError("parameters became non-finite", step)
    result.params = params
    return result


def link_scores(p: ClpgParams, g: Graph, adjacency=None) -> np.ndarray:
    """Â from posterior means (no sampling).  Links are unknown at inference,
    so by default the encoder passes messages over self-loops only."""
    if adjacency is None:
        adjacency = np.eye(g.n)
    return rejuvenate(encode(g, p, adjacency).mu, g.cat)


def predict_links(p: ClpgParams, g: Graph, threshold=0.5, adjacency=None) -> set[tuple[int, int]]:
    S = link_scores(p, g, adjacency)
    pairs = np.triu(_pair_mask(g.cat), 1)
    ii, jj = np.nonzero(pairs & (S >= threshold))
    return {(int(i), int(j)) for i, j in zip(ii, jj)}


def save_params(path, params: ClpgParams, hyper: ClpgHyper | None = None) -> None:
    numerics.save_archive(path, params.named())
    side = {"n_categories": params.n_categories, "hyper": hyper.to_dict() if hyper else None}
    numerics.atomic_write(Path(str(path) + ".hyper.json"), json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_params(path) -> tuple[ClpgParams, ClpgHyper | None]:
    named = numerics.load_archive(path)
    side = json.loads(Path(str(path) + ".hyper.json").read_text())
    hyper = ClpgHyper(**side["hyper"]) if side.get("hyper") else None
    return ClpgParams.from_named(named, side["n_categories"]), hyper
