"""Registry of every hand-derived gradient, each checked against central
differences on random inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import clpg, numerics, pyramid
from .geometry import BBox, ciou_loss, ciou_loss_grad
from .heatmap import HeatmapStack, kd_loss, kd_loss_grad

TOLERANCE = 1e-4
EPS = 1e-5
DEFAULT_SEEDS = 20


@dataclass
class GradCase:
    f: Callable[[np.ndarray], float]
    x: np.ndarray
    analytic: np.ndarray


def _graph(gen, n=6, width=5):
    cat = np.array([0, 0, 0, 1, 1, 1][:n])
    A = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            if cat[i] == cat[j] and gen.random() < 0.5:
                A[i, j] = A[j, i] = 1.0
    return clpg.Graph(A, gen.standard_normal((n, width)), cat)


def _encoder_case(name):
    def build(seed):
        gen = numerics.rng((seed, 11))
        g = _graph(gen)
        p = clpg.ClpgParams.init(g.X.shape[1], hidden=6, latent=3, n_categories=2, seed=(seed, 12))
        eps = gen.standard_normal((g.n, 3))
        _, grads = clpg.loss_and_grad(g, p, eps, adjacency=g.A)

        def f(w):
            q = p.named()
            q[name] = w
            return clpg.loss_and_grad(g, clpg.ClpgParams.from_named(q, 2), eps, adjacency=g.A)[0].value

        return GradCase(f, p.named()[name].copy(), grads.named()[name])
    return build


def _away_from_kink(d):
    # keep SmoothL1 arguments clear of |d| = 1 so differences stay smooth
    return np.where(np.abs(np.abs(d) - 1.0) < 1e-2, d * 1.05, d)


def _kd_case(seed):
    gen = numerics.rng((seed, 21))
    rows, cols = 5, 6
    gt = HeatmapStack(gen.uniform(0, 1, (rows, cols)) * (gen.random((rows, cols)) < 0.6),
                      gen.normal(0, 1, (rows, cols)), gen.normal(0, 1, (rows, cols)),
                      mask=gen.random((rows, cols)) < 0.7)
    H = gen.uniform(0.05, 0.95, (rows, cols))
    Ox = gt.O_x + _away_from_kink(gen.normal(0, 1.2, (rows, cols)))
    Oy = gt.O_y + _away_from_kink(gen.normal(0, 1.2, (rows, cols)))
    theta, upsilon = gen.uniform(0.5, 2.0, 2)

    def unpack(x):
        h, ox, oy = x.reshape(3, rows, cols)
        return HeatmapStack(h, ox, oy, mask=gt.mask)

    x = np.stack([H, Ox, Oy]).ravel()
    _, g = kd_loss_grad(unpack(x), gt, theta, upsilon)
    return GradCase(lambda v: kd_loss(unpack(v), gt, theta, upsilon), x, np.stack([g.H, g.O_x, g.O_y]).ravel())


def _link_case(seed):
    gen = numerics.rng((seed, 31))
    g = _graph(gen)
    n, f = g.n, 3
    F = clpg.node_weights(g.X)
    kw = gen.uniform(0.1, 1.0)

    def unpack(x):
        z, mu, lv = x.reshape(3, n, f)
        return z, clpg.Posterior(mu, lv)

    x = gen.normal(0, 0.7, 3 * n * f)
    z, post = unpack(x)
    ll = clpg.link_loss(g, post, z, 0, 0, F, kw)

    def value(v):
        z, post = unpack(v)
        return clpg.link_loss(g, post, z, 0, 0, F, kw).value

    return GradCase(value, x, np.stack([ll.d_z, ll.d_mu, ll.d_logvar]).ravel())


def _kl_case(seed):
    gen = numerics.rng((seed, 41))
    shape = (5, 4)
    x = gen.normal(0, 1, (2,) + shape).ravel()

    def post(v):
        mu, lv = v.reshape((2,) + shape)
        return clpg.Posterior(mu, lv)

    d_mu, d_lv = clpg.kl_grad(post(x))
    return GradCase(lambda v: clpg.kl_term(post(v)), x, np.stack([d_mu, d_lv]).ravel())


def _random_box(gen, scale=4.0):
    x, y = gen.uniform(-scale, scale, 2)
    w, h = gen.uniform(0.3, 3.0, 2)
    return BBox(x, y, x + w, y + h)


def _ciou_case(seed):
    gen = numerics.rng((seed, 51))
    gt = _random_box(gen)
    pred = _random_box(gen, 2.0) if seed % 2 else _random_box(gen)
    _, g = ciou_loss_grad(pred, gt)
    return GradCase(lambda v: ciou_loss(BBox(*v), gt), np.array(pred.as_tuple()), g)


def _csfa_case(kind):
    def build(seed):
        gen = numerics.rng((seed, 61 if kind == "fine" else 62))
        c1, c2, co = 3, 2, 4
        if kind == "fine":
            a = pyramid.FeatureMap(3, gen.standard_normal((4, 4, c1)))
            b = pyramid.FeatureMap(3, gen.standard_normal((4, 4, c2)))
            op, op_grad, ext = pyramid.csfa_fine, pyramid.csfa_fine_grad, (4, 4)
        else:
            a = pyramid.FeatureMap(2, gen.standard_normal((8, 8, c1)))
            b = pyramid.FeatureMap(4, gen.standard_normal((2, 2, c2)))
            op, op_grad, ext = pyramid.csfa_out, pyramid.csfa_out_grad, (4, 4)
        T = gen.standard_normal((c1 + c2, co))
        R = gen.standard_normal(ext + (co,))
        return GradCase(lambda t: float(np.sum(op(a, b, t).tensor * R)), T, op_grad(a, b, T, R))
    return build


REGISTRY: dict[str, Callable[[int], GradCase]] = {
    **{name: _encoder_case(name) for name in ("W_1", "W_2", "W_3", "W_4", "W_mu", "W_s")},
    "kd_loss": _kd_case,
    "link_loss": _link_case,
    "kl_term": _kl_case,
    "ciou_loss": _ciou_case,
    "csfa_fine": _csfa_case("fine"),
    "csfa_out": _csfa_case("out"),
}


@dataclass
class GradRow:
    name: str
    seeds: int
    max_error: float
    min_error: float
    passed: bool


def check(name: str, seed: int, eps: float = EPS, fault: float | None = None) -> float:
    """Relative error of one registered gradient; ``fault`` scales the
    analytic gradient to simulate a broken derivation."""
    case = REGISTRY[name](seed)
    an = case.analytic if fault is None else case.analytic * fault
    return numerics.grad_check(case.f, case.x, an, eps)


def run(seed: int = 0, n_seeds: int = DEFAULT_SEEDS, eps: float = EPS, tol: float = TOLERANCE,
        fault: float | None = None, names=None) -> list[GradRow]:
    rows = []
    for name in names or REGISTRY:
        errs = [check(name, seed * 1000 + s, eps, fault) for s in range(n_seeds)]
        rows.append(GradRow(name, n_seeds, max(errs), min(errs), max(errs) <= tol))
    return rows


def table(rows: list[GradRow], tol: float = TOLERANCE) -> str:
    lines = [f"{'gradient':<10} {'seeds':>5} {'max rel err':>12}  result (tol {tol:g})"]
    for r in rows:
        lines.append(f"{r.name:<10} {r.seeds:>5} {r.max_error:>12.3e}  {'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
