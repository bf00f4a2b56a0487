"""Command-line entry point: synthesis, training, evaluation, navigation, plots.

Every command accepts --seed, --config (key=value text) and --out; outputs
are plain delimited text plus PNG renders from the plot command.  Module
errors exit 1 with a one-line diagnostic; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import evaluation as ev
from . import geometry, navigation, synth
from .baseline import baseline_predict, build_scene_index
from .dataset import discover_videos, load_video, make_pairs, prepare_video
from .encoders import load_cache
from .errors import AffordanceError, ConfigError
from .model import (TrainConfig, assemble_training_set, finetune, load_checkpoint,
                    predict, save_checkpoint, train)


def _read_config(path: str | None, seed: int | None) -> TrainConfig:
    fields: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                k, v = line.split("=", 1)
                fields[k.strip()] = v.strip()
    cfg = TrainConfig(
        epochs=int(fields.get("epochs", 150)),
        batch_size=int(fields.get("batch_size", 256)),
        step_size=float(fields.get("step_size", 1e-4)),
        seed=int(fields.get("seed", 0)),
        train_adapter=fields.get("train_adapter", "1") not in ("0", "false"),
        sample_rephrasings=fields.get("sample_rephrasings", "1") not in ("0", "false"),
        pair_fraction=float(fields.get("pair_fraction", 1.0)),
    )
    if seed is not None:
        cfg.seed = seed
    return cfg


def _load_suite(root: str, seed: int):
    dirs = discover_videos(root)
    if not dirs:
        raise ConfigError(f"no video directories under {root!r}")
    videos = [load_video(d) for d in dirs]
    vision = load_cache(os.path.join(root, "vision.cache"))
    text = load_cache(os.path.join(root, "text.cache"))
    arts = [prepare_video(v, seed=seed) for v in videos]
    return videos, arts, vision, text


def _write_rows(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(c) if isinstance(c, (str, int)) else f"{c:.6f}" for c in row) + "\n")


def cmd_synth(args) -> int:
    bundle = synth.generate_suite(args.seed, n_scenes=args.scenes, out_dir=args.out,
                                  dim=args.dim, n_stations=args.stations, n_tasks=args.tasks)
    print(f"wrote {len(bundle.videos)} scenes to {args.out} "
          f"({sum(len(v.frames) for v in bundle.videos)} frames, "
          f"{sum(len(v.tasks) for v in bundle.videos)} tasks, dim {args.dim})")
    return 0


def cmd_ingest(args) -> int:
    dirs = discover_videos(args.data) or [args.data]
    for d in dirs:
        video = load_video(d)
        print(f"{video.scene_id}\t{video.activity}\t{len(video.frames)} frames\t"
              f"{len(video.tasks)} tasks")
    return 0


def cmd_preprocess(args) -> int:
    videos, arts, _, _ = _load_suite(args.data, args.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for art in arts:
        for task in art.video.tasks:
            r = art.regions[task.task_id]
            rows.append((art.video.scene_id, task.task_id, r.mean[0], r.mean[1], r.mean[2],
                         r.sigma, int(task.task_id in art.fallback_task_ids)))
    _write_rows(os.path.join(args.out, "regions.tsv"),
                ["scene", "task", "mu_x", "mu_y", "mu_z", "sigma", "fallback"], rows)
    splits = {
        art.video.scene_id: {
            "train_tasks": art.train_task_ids,
            "test_tasks": art.test_task_ids,
            "train_frames": art.train_frames,
            "test_frames": art.test_frames,
            "n_train_pairs": len(art.train_pairs),
        }
        for art in arts
    }
    with open(os.path.join(args.out, "splits.json"), "w", encoding="utf-8") as fh:
        json.dump(splits, fh, indent=1, sort_keys=True)
    for art in arts:
        print(f"{art.video.scene_id}: {int(art.mask.sum())}/{len(art.mask)} frames pass, "
              f"{len(art.train_pairs)} training pairs")
    return 0


def cmd_train(args) -> int:
    cfg = _read_config(args.config, args.seed)
    _, arts, vision, text = _load_suite(args.data, cfg.seed)
    data = assemble_training_set(arts, vision, text)
    ckpt = train(data, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(ckpt, os.path.join(args.out, "checkpoint.ckpt"))
    _write_rows(os.path.join(args.out, "loss_history.tsv"), ["epoch", "loss"],
                [(e, v) for e, v in enumerate(ckpt.loss_history)])
    print(f"trained {cfg.epochs} epochs on {len(data)} pairs; "
          f"final loss {ckpt.loss_history[-1]:.6f} m")
    return 0


def cmd_finetune(args) -> int:
    cfg = _read_config(args.config, args.seed)
    if args.config is None:
        cfg.epochs = 25
    videos, arts, vision, text = _load_suite(args.data, cfg.seed)
    art = next((a for a in arts if a.video.scene_id == args.scene), None)
    if art is None:
        raise ConfigError(f"scene {args.scene!r} not found under {args.data!r}")
    ckpt = load_checkpoint(args.model)
    passing = [i for i in range(len(art.video.frames)) if art.mask[i]]
    pairs = make_pairs(art.video, art.train_task_ids, passing, art.regions)
    data = assemble_training_set([art], vision, text, pairs_override=lambda a: pairs)
    tuned = finetune(ckpt, data, mode=args.mode, config=cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(tuned, os.path.join(args.out, "checkpoint.ckpt"))
    _write_rows(os.path.join(args.out, "loss_history.tsv"), ["epoch", "loss"],
                [(e, v) for e, v in enumerate(tuned.loss_history)])
    print(f"fine-tuned ({args.mode}) on {len(data)} pairs of {args.scene}; "
          f"final loss {tuned.loss_history[-1]:.6f} m")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.model)
    vision = load_cache(os.path.join(args.data, "vision.cache"))
    text = load_cache(os.path.join(args.data, "text.cache"))
    region = predict(args.image, args.task, ckpt, vision, text)
    print(f"mu=({region.mean[0]:.6f},{region.mean[1]:.6f},{region.mean[2]:.6f}) "
          f"sigma={region.sigma:.6f}")
    print(json.dumps({"image": args.image, "task": args.task,
                      "mu": [round(float(v), 6) for v in region.mean],
                      "sigma": round(region.sigma, 6)}))
    return 0


def _predictor_for(args, arts, vision, text):
    if args.predictor == "oracle":
        return ev.oracle_predictor()
    if args.predictor == "baseline":
        indices = {a.video.scene_id: build_scene_index(a.video, vision) for a in arts}
        return ev.baseline_predictor(indices, text)
    return ev.model_predictor(load_checkpoint(args.model), vision, text)


def cmd_eval_loc(args) -> int:
    _, arts, vision, text = _load_suite(args.data, args.seed)
    predictor = _predictor_for(args, arts, vision, text)
    rows, pooled = ev.eval_localization(predictor, arts)
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "localization.tsv"),
                ["scene", "regime", "mean", "std", "n"],
                [(r.scene_id, r.regime, r.mean, r.std, r.n) for r in rows])
    err_rows = [(regime, e) for regime in ev.REGIMES for e in pooled[regime]]
    _write_rows(os.path.join(args.out, "errors.tsv"), ["regime", "error"], err_rows)
    for r in rows:
        if r.scene_id == "ALL":
            print(f"{r.regime}: {r.mean:.3f} +- {r.std:.3f} m (n={r.n})")
    return 0


def cmd_eval_ground(args) -> int:
    _, arts, vision, text = _load_suite(args.data, args.seed)
    trials = ev.grounding_trials(arts, n_choices=args.choices, trials=args.trials, seed=args.seed)
    indices = {a.video.scene_id: build_scene_index(a.video, vision) for a in arts}
    choosers = [
        ("model", ev.model_chooser(load_checkpoint(args.model), vision, text)),
        ("baseline", ev.baseline_chooser(indices, text)),
        ("random", ev.random_chooser(args.seed)),
    ]
    rows = []
    for name, chooser in choosers:
        acc = ev.eval_grounding(chooser, trials)
        rows.append((name, acc, len(trials)))
        print(f"{name}: {acc:.4f} over {len(trials)} trials")
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "grounding.tsv"), ["chooser", "accuracy", "trials"], rows)
    return 0


def cmd_eval_stability(args) -> int:
    _, arts, vision, text = _load_suite(args.data, args.seed)
    test_ids = [tid for a in arts for tid in a.test_task_ids]
    phrasings = [(t.task_id, t.phrases()) for a in arts for t in a.video.tasks
                 if t.task_id in set(test_ids) and len(t.phrases()) >= 2]
    images = ev.stability_image_sets(arts, [t for t, _ in phrasings],
                                     n_images=args.images, seed=args.seed)
    ckpt = load_checkpoint(args.model)
    model_std = ev.eval_stability(
        lambda key, phrase: ckpt.predict_region(vision.get(key), text.get(phrase)),
        phrasings, images)
    indices = {a.video.scene_id: build_scene_index(a.video, vision) for a in arts}
    scene_of = {a.video.frames[0].image_key.split("/")[0]: a.video.scene_id for a in arts}
    def baseline_fn(key, phrase):
        return baseline_predict(indices[scene_of[key.split("/")[0]]], phrase, text)
    baseline_std = ev.eval_stability(baseline_fn, phrasings, images)
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "stability.tsv"), ["predictor", "positional_std_m"],
                [("model", model_std), ("baseline", baseline_std)])
    print(f"model: {model_std:.4f} m, baseline: {baseline_std:.4f} m")
    return 0


def cmd_obstacle(args) -> int:
    ckpt = load_checkpoint(args.model)
    vision = load_cache(os.path.join(args.data, "vision.cache"))
    text = load_cache(os.path.join(args.data, "text.cache"))
    e_v = vision.get(args.image)
    predict_fn = lambda phrase: ckpt.predict_region(e_v, text.get(phrase))  # noqa: E731
    obstacle = navigation.task_obstacle(predict_fn, args.task, sigma_bound=args.sigma_bound)
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "obstacle.tsv"), ["x", "y"],
                [(v[0], v[1]) for v in obstacle.hull.vertices])
    circle_rows = []
    for phrase in args.task:
        region = predict_fn(phrase)
        center, radius = geometry.sigma_bound_circle(region, args.sigma_bound)
        circle_rows.append((phrase, center[0], center[1], radius))
    _write_rows(os.path.join(args.out, "circles.tsv"), ["task", "cx", "cy", "r"], circle_rows)
    print(f"obstacle hull: {obstacle.hull.vertices.shape[0]} vertices over {len(args.task)} tasks")
    return 0


def _parse_xy(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError(f"expected 'x,y', got {text!r}")
    return np.array([float(parts[0]), float(parts[1])])


def cmd_plan(args) -> int:
    grid = navigation.NavGrid.empty(_parse_xy(args.grid_origin), _parse_xy(args.grid_size),
                                    resolution=args.resolution)
    for path in args.obstacle or []:
        verts = np.loadtxt(path, skiprows=1, usecols=(0, 1), ndmin=2)
        obstacle = navigation.TaskObstacle(geometry.Polygon2D(verts), [], args.sigma_bound)
        grid = navigation.rasterize_obstacle(obstacle, grid)
    os.makedirs(args.out, exist_ok=True)
    occ_rows = [("".join("1" if c else "0" for c in row),) for row in grid.occupancy]
    _write_rows(os.path.join(args.out, "grid.tsv"),
                [f"origin={grid.origin[0]:.6f},{grid.origin[1]:.6f} res={grid.resolution:.6f}"],
                occ_rows)
    waypoints = navigation.plan_path(grid, _parse_xy(args.start), _parse_xy(args.goal))
    if waypoints is None:
        with open(os.path.join(args.out, "waypoints.tsv"), "w", encoding="utf-8") as fh:
            fh.write("x\ty\n")
        print("unreachable")
        return 0
    _write_rows(os.path.join(args.out, "waypoints.tsv"), ["x", "y"],
                [(w[0], w[1]) for w in waypoints])
    print(f"path with {waypoints.shape[0]} waypoints, "
          f"length {navigation.path_cost(waypoints):.3f} m")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    if args.kind == "loc":
        data: dict[str, list[float]] = {}
        with open(args.infile, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                regime, err = line.split("\t")
                data.setdefault(regime, []).append(float(err))
        for regime, errors in data.items():
            ax.hist(errors, bins=40, alpha=0.55, label=regime)
        ax.set_xlabel("region distance (m)")
        ax.set_ylabel("pairs")
        ax.legend()
    elif args.kind == "ground":
        names, accs = [], []
        with open(args.infile, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                name, acc, _ = line.split("\t")
                names.append(name)
                accs.append(float(acc))
        ax.bar(names, accs)
        ax.axhline(1.0 / 3.0, linestyle="--", color="k", label="random chance")
        ax.set_ylabel("grounding accuracy")
        ax.legend()
    elif args.kind == "obstacle":
        verts = np.loadtxt(args.infile, skiprows=1, ndmin=2)
        closed = np.vstack([verts, verts[:1]])
        ax.plot(closed[:, 0], closed[:, 1], "-o", label="task obstacle")
        if args.extra:
            with open(args.extra, encoding="utf-8") as fh:
                next(fh)
                for line in fh:
                    _, cx, cy, r = line.rsplit("\t", 3)
                    t = np.linspace(0, 2 * np.pi, 64)
                    ax.plot(float(cx) + float(r) * np.cos(t), float(cy) + float(r) * np.sin(t), ":")
        ax.set_aspect("equal")
        ax.legend()
    elif args.kind == "path":
        with open(args.infile, encoding="utf-8") as fh:
            header = next(fh).strip()
            occ = np.array([[c == "1" for c in line.strip()] for line in fh])
        meta = dict(kv.split("=") for kv in header.split())
        ox, oy = (float(v) for v in meta["origin"].split(","))
        res = float(meta["res"])
        ax.imshow(occ, origin="lower", cmap="Greys",
                  extent=(ox, ox + occ.shape[1] * res, oy, oy + occ.shape[0] * res))
        if args.extra:
            wp = np.loadtxt(args.extra, skiprows=1, ndmin=2)
            if wp.size:
                ax.plot(wp[:, 0], wp[:, 1], "-r", linewidth=2, label="path")
                ax.legend()
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(args.outfile, dpi=120)
    print(f"wrote {args.outfile}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egoaff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value text file")
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene suite")
    common(p)
    p.add_argument("--scenes", type=int, default=6)
    p.add_argument("--stations", type=int, default=5)
    p.add_argument("--tasks", type=int, default=30)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="validate video directories")
    common(p, out=False)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("preprocess", help="regions, splits and pair counts")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_preprocess)

    p = sub.add_parser("train", help="train the affordance head")
    common(p)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on one scene")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--mode", choices=["head_only", "all"], default="head_only")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("predict", help="predict a region for one image and task")
    common(p, out=False)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--task", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval-loc", help="task region localization error")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--predictor", choices=["model", "baseline", "oracle"], default="model")
    p.set_defaults(fn=cmd_eval_loc)

    p = sub.add_parser("eval-ground", help="multiple-choice grounding accuracy")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--choices", type=int, default=3)
    p.add_argument("--trials", type=int, default=2000)
    p.set_defaults(fn=cmd_eval_ground)

    p = sub.add_parser("eval-stability", help="rephrasing stability")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--images", type=int, default=5)
    p.set_defaults(fn=cmd_eval_stability)

    p = sub.add_parser("obstacle", help="task obstacle for a task set")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--task", action="append", required=True,
                   help="repeat once per task phrase")
    p.add_argument("--sigma-bound", type=float, default=navigation.SIGMA_BOUND_DEFAULT)
    p.set_defaults(fn=cmd_obstacle)

    p = sub.add_parser("plan", help="A* path on an occupancy grid")
    common(p)
    p.add_argument("--grid-origin", default="0,0")
    p.add_argument("--grid-size", default="4,5")
    p.add_argument("--resolution", type=float, default=0.05)
    p.add_argument("--obstacle", action="append", help="obstacle.tsv files to rasterize")
    p.add_argument("--sigma-bound", type=float, default=navigation.SIGMA_BOUND_DEFAULT)
    p.add_argument("--start", required=True)
    p.add_argument("--goal", required=True)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("plot", help="render evaluation/navigation exports")
    p.add_argument("--kind", choices=["loc", "ground", "obstacle", "path"], required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--extra", default=None, help="companion file (circles/waypoints)")
    p.add_argument("--out", dest="outfile", required=True)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except AffordanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
