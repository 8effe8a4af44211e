"""``klpnet`` command line: synth, train, eval, render, flops, gradcheck, lis.

Each subcommand resolves its parameters from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags.  The seed falls back to
the ``KLP_SEED`` environment variable.  Exit status: 0 success, 1 invalid
input, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import clpg, gradcheck, heatmap, lis, numerics, pipeline, pyramid, synthgen
from .geometry import BBox

log = logging.getLogger("klpnet")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "synth": {"n": 100, "spec": {}},
    "train": {"dataset": None, "hyper": {}, "alpha": 0.3, "beta": 0.7},
    "eval": {"dataset": None, "model": None, "kernel": 3, "threshold": 0.5, "link_threshold": 0.5},
    "render": {"dataset": None, "index": 0, "kernel": 7, "stride": 4},
    "flops": {"preset": "default", "pyramid": {}},
    "gradcheck": {"n_seeds": gradcheck.DEFAULT_SEEDS, "eps": gradcheck.EPS, "tol": gradcheck.TOLERANCE,
                  "fault": None},
    "lis": {"scene": None, "lam_f": 1.0, "lam_d": 1.0},
}


def resolve_config(command: str, config_path, overrides: dict, seed) -> dict:
    cfg = {"seed": None, "out": None, **json.loads(json.dumps(DEFAULTS[command]))}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is None:
        env = os.environ.get("KLP_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError as exc:
            raise ConfigError(f"KLP_SEED must be an integer, got {env!r}") from exc
    cfg["seed"] = int(cfg["seed"])
    return cfg


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise ConfigError(f"missing required parameter '{k}'")


def _emit(text: str, quiet: bool):
    if not quiet:
        sys.stdout.write(text)


def cmd_synth(cfg, quiet=False) -> int:
    _require(cfg, "out")
    try:
        spec = synthgen.SceneSpec.from_dict(cfg["spec"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scene spec: {exc}") from exc
    n = int(cfg["n"])
    if n < 0:
        raise ConfigError("n must be non-negative")
    path = synthgen.emit_dataset(n, spec, cfg["seed"], cfg["out"])
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    _emit(f"scenes {n}\nsha256 {digest}\n", quiet)
    return 0


def _load_graphs(path):
    _, scenes = synthgen.load_dataset(path)
    return scenes, [synthgen.to_graph(s) for s in scenes]


def cmd_train(cfg, quiet=False) -> int:
    _require(cfg, "dataset", "out")
    try:
        hyper = clpg.ClpgHyper(**{"seed": cfg["seed"], **cfg["hyper"]})
    except TypeError as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from exc
    scenes, graphs = _load_graphs(cfg["dataset"])
    if not graphs:
        raise ConfigError(f"{cfg['dataset']} holds no scenes")
    if hyper.n_categories is None:
        hyper.n_categories = len(synthgen.builtin_templates())
    res = clpg.train_clpg(graphs, hyper)
    clpg.save_params(cfg["out"], res.params, hyper)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "link_loss", "kl", "total"])
    # only the link branch is trained here, so the detection term is zero
    for step, (loss, kl) in enumerate(zip(res.loss, res.kl)):
        w.writerow([step, repr(loss), repr(kl), repr(clpg.total_loss(0.0, loss, cfg["alpha"], cfg["beta"]))])
    numerics.atomic_write(str(cfg["out"]) + ".loss.csv", buf.getvalue())
    final = res.loss[-1] if res.loss else float("nan")
    _emit(f"steps {hyper.steps}\nfinal_link_loss {final:.6g}\n", quiet)
    return 0


def cmd_eval(cfg, quiet=False) -> int:
    _require(cfg, "dataset", "model")
    _, scenes = synthgen.load_dataset(cfg["dataset"])
    if not scenes:
        raise ConfigError(f"{cfg['dataset']} holds no scenes")
    params, _ = clpg.load_params(cfg["model"])
    try:
        report = pipeline.evaluate(scenes, params, kernel=cfg["kernel"], threshold=cfg["threshold"],
                                   link_threshold=cfg["link_threshold"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["out"]:
        numerics.atomic_write(cfg["out"], report.to_json())
    _emit(report.to_text(), quiet)
    return 0


def _draw_disc(img, x, y, color, r=1):
    rows, cols = img.shape[:2]
    cx, cy = int(round(x)), int(round(y))
    for j in range(max(cy - r, 0), min(cy + r + 1, rows)):
        for i in range(max(cx - r, 0), min(cx + r + 1, cols)):
            img[j, i] = color


def _draw_line(img, a, b, color):
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
    for t in np.linspace(0.0, 1.0, n + 1):
        _draw_disc(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), color, 0)


def _draw_box(img, box: BBox, color):
    c = [(box.x_min, box.y_min), (box.x_max, box.y_min), (box.x_max, box.y_max), (box.x_min, box.y_max)]
    for k in range(4):
        _draw_line(img, c[k], c[(k + 1) % 4], color)


PALETTE = [(230, 80, 60), (60, 160, 230), (90, 200, 90), (220, 180, 40), (180, 90, 220)]


def scene_overlay(scene: synthgen.Scene) -> np.ndarray:
    W, H = scene.image
    img = np.full((H, W, 3), 24, dtype=np.uint8)
    for inst, o in enumerate(scene.objects):
        color = PALETTE[inst % len(PALETTE)]
        _draw_box(img, o.bbox, color)
        for i, j in o.links:
            _draw_line(img, o.keypoints[i][:2], o.keypoints[j][:2], color)
        for x, y, _ in o.keypoints:
            _draw_disc(img, x, y, (255, 255, 255))
    return img


def cmd_render(cfg, quiet=False) -> int:
    _require(cfg, "dataset", "out")
    _, scenes = synthgen.load_dataset(cfg["dataset"])
    idx = int(cfg["index"])
    if not 0 <= idx < len(scenes):
        raise ConfigError(f"index {idx} out of range for {len(scenes)} scenes")
    scene = scenes[idx]
    out = Path(cfg["out"])
    grid = heatmap.grid_extent(scene.image, cfg["stride"])
    stack = heatmap.render_gt(scene.keypoints(), grid, cfg["stride"], cfg["kernel"])
    numerics.atomic_write(out / "heatmap.pgm", heatmap.to_pgm(stack.H))
    numerics.atomic_write(out / "scene.ppm", heatmap.to_ppm(scene_overlay(scene)))
    _emit(f"wrote {out / 'heatmap.pgm'}\nwrote {out / 'scene.ppm'}\n", quiet)
    return 0


def cmd_flops(cfg, quiet=False) -> int:
    name = cfg["preset"]
    if name == "default":
        base = {}
    elif name in pyramid.TOY_CONFIGS:
        c = pyramid.TOY_CONFIGS[name]
        base = {"levels": c.levels, "base_extent": c.base_extent, "in_channels": c.in_channels,
                "g_width": c.g_width, "extra_levels": c.extra_levels}
    else:
        raise ConfigError(f"unknown preset {name!r}; choose default or {', '.join(pyramid.TOY_CONFIGS)}")
    try:
        config = pyramid.PyramidConfig(**{**base, **cfg["pyramid"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid pyramid config: {exc}") from exc
    text = pyramid.flops_estimate(config).to_text()
    if cfg["out"]:
        numerics.atomic_write(cfg["out"], text)
    _emit(text, quiet)
    return 0


def cmd_gradcheck(cfg, quiet=False) -> int:
    fault = cfg["fault"]
    rows = gradcheck.run(cfg["seed"], int(cfg["n_seeds"]), cfg["eps"], cfg["tol"], fault)
    text = gradcheck.table(rows, cfg["tol"])
    if cfg["out"]:
        numerics.atomic_write(cfg["out"], text)
    _emit(text, quiet)
    if fault is not None:
        # with an injected fault success means every gradient was caught on every seed
        return 0 if all(r.min_error > cfg["tol"] for r in rows) else 2
    return 0 if all(r.passed for r in rows) else 2


def load_lis_scene(path) -> tuple[lis.SceneNodes, list[lis.Detection]]:
    """Scene file: ``{"instances": [{"bbox": [x0, y0, x1, y1], "category": c}],
    "detections": [{"x", "y", "category", "feature", "slot"?}]}``."""
    try:
        d = json.loads(Path(path).read_text())
        instances = [lis.Instance(BBox.from_seq(i["bbox"]), int(i["category"])) for i in d["instances"]]
        dets = [lis.Detection(float(e["x"]), float(e["y"]), int(e["category"]),
                              np.asarray(e["feature"], dtype=np.float64),
                              None if e.get("slot") is None else int(e["slot"]))
                for e in d["detections"]]
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read LIS scene {path}: {exc}") from exc
    known = synthgen.template_map()
    bad = sorted({i.category for i in instances} - set(known))
    if bad:
        raise ConfigError(f"unknown instance categories {bad}")
    return lis.classify_nodes(dets, instances), dets


def cmd_lis(cfg, quiet=False) -> int:
    _require(cfg, "scene")
    nodes, dets = load_lis_scene(cfg["scene"])
    templates = synthgen.template_map()
    try:
        assignment = lis.resolve(nodes, templates, cfg["lam_f"], cfg["lam_d"])
    except lis.ConstraintError as exc:
        raise ConfigError(f"infeasible scene: {exc}") from exc
    ident = lis.identities(nodes, assignment)
    result = {
        "fixed": [f.index for f in nodes.fixed],
        "debatable": [d.index for d in nodes.debatable],
        "outliers": sorted(set(range(len(dets))) - set(ident)),
        "identities": {str(k): list(v) for k, v in sorted(ident.items())},
        "score": assignment.score,
        "unfilled": {str(k): v for k, v in sorted(assignment.unfilled.items())},
        "exhaustive": assignment.exhaustive,
    }
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if cfg["out"]:
        numerics.atomic_write(cfg["out"], text)
        numerics.atomic_write(str(cfg["out"]) + ".ppm", heatmap.to_ppm(lis_overlay(nodes, dets, ident)))
    _emit(text, quiet)
    return 0


def lis_overlay(nodes: lis.SceneNodes, dets, ident) -> np.ndarray:
    xs = [i.bbox.x_max for i in nodes.instances] + [d.x for d in dets] + [1.0]
    ys = [i.bbox.y_max for i in nodes.instances] + [d.y for d in dets] + [1.0]
    img = np.full((int(max(ys)) + 4, int(max(xs)) + 4, 3), 24, dtype=np.uint8)
    for k, inst in enumerate(nodes.instances):
        _draw_box(img, inst.bbox, PALETTE[k % len(PALETTE)])
    for n, d in enumerate(dets):
        color = PALETTE[ident[n][0] % len(PALETTE)] if n in ident else (128, 128, 128)
        _draw_disc(img, d.x, d.y, color)
    return img


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
            "flops": cmd_flops, "gradcheck": cmd_gradcheck, "lis": cmd_lis}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of parameters for this subcommand")
    common.add_argument("--seed", type=int, help="PRNG seed (default: config, then $KLP_SEED, then 0)")
    common.add_argument("--out", help="output path")
    common.add_argument("--quiet", action="store_true", help="suppress stdout and info logging")

    p = argparse.ArgumentParser(prog="klpnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset (JSON lines)")
    s.add_argument("--n", type=int)
    s.add_argument("--spec", help="JSON file with scene spec fields")

    s = sub.add_parser("train", parents=[common], help="train the link-prediction model")
    s.add_argument("--dataset")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--optimizer", choices=["gd", "adam"])
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)

    s = sub.add_parser("eval", parents=[common], help="run the full pipeline and report metrics")
    s.add_argument("--dataset")
    s.add_argument("--model")

    s = sub.add_parser("render", parents=[common], help="write heatmap and scene images for one scene")
    s.add_argument("--dataset")
    s.add_argument("--index", type=int)
    s.add_argument("--kernel", type=int)

    s = sub.add_parser("flops", parents=[common], help="MAC / parameter report for a pyramid config")
    s.add_argument("--preset")

    s = sub.add_parser("gradcheck", parents=[common], help="check every analytic gradient")
    s.add_argument("--n-seeds", dest="n_seeds", type=int)
    s.add_argument("--fault", type=float, help="scale analytic gradients to test detection")

    s = sub.add_parser("lis", parents=[common], help="resolve an occlusion scene file")
    s.add_argument("--scene")
    return p


def _overrides(args) -> dict:
    skip = {"command", "config", "seed", "quiet", "spec", "steps", "lr", "optimizer"}
    ov = {k: v for k, v in vars(args).items() if k not in skip}
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        ov = _overrides(args)
        cfg = resolve_config(args.command, args.config, ov, args.seed)
        if args.command == "synth" and args.spec:
            try:
                cfg["spec"] = json.loads(Path(args.spec).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read spec {args.spec}: {exc}") from exc
        if args.command == "train":
            for k in ("steps", "lr", "optimizer"):
                if getattr(args, k) is not None:
                    cfg["hyper"] = {**cfg["hyper"], k: getattr(args, k)}
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        return COMMANDS[args.command](cfg, args.quiet)
    except (ConfigError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    except (clpg.TrainingError, pyramid.TrainingError, numerics.NumericError, ArithmeticError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
