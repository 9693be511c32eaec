"""Command-line interface.

Subcommands cover the full workflow: simulate scenes, render
ground-truth labels, run the three mapping methods (log-odds filtering,
direct ray-trace labeling, trained network), tune classifier
thresholds, score predictions, and visualize grids.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 missing
input file, 4 malformed input file. The RADARGRID_VERBOSITY environment
variable (0 quiet, 1 progress, 2 debug; default 1) controls logging on
stderr; results go to stdout. All randomness flows from --seed, which
defaults to 0 when a subcommand takes one.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import io as rio
from .aggregate import AggregationConfig
from .autolabel import DegenerateHullError, LabelConfig, SceneLabeler
from .classic_ism import (
    IsmConfig,
    classify_grid,
    default_threshold_candidates,
    tune_thresholds,
)
from .grid import CATEGORY_NAMES, GridSpec
from .lovasz import UndefinedLossError
from .metrics import ConfusionCounts, MetricsReport, confusion, iou_per_class, miou
from .occnet import TrainConfig, TrainingDivergedError, infer as net_infer, train as net_train
from .pipeline import (
    classic_predict,
    classic_probs,
    dataset_pairs,
    grid_name,
    raytrace_predict,
    scene_windows,
    split_scenes,
    window_input_grid,
    window_label,
)
from .simworld import SceneParams, SimulationError, gen_scene

log = logging.getLogger("radargrid")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4


class UsageError(ValueError):
    """Bad argument combination detected after parsing."""


def _configure_logging() -> None:
    try:
        level_idx = int(os.environ.get("RADARGRID_VERBOSITY", "1"))
    except ValueError:
        level_idx = 1
    level = {0: logging.WARNING, 1: logging.INFO}.get(level_idx, logging.DEBUG)
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _parse_grid(text: str) -> GridSpec:
    parts = text.split(",")
    if len(parts) != 6:
        raise UsageError("--grid wants h,w,res_x,res_y,x0,y0")
    try:
        h, w = int(parts[0]), int(parts[1])
        rx, ry, x0, y0 = (float(p) for p in parts[2:])
    except ValueError as e:
        raise UsageError(f"bad --grid value: {e}") from e
    return GridSpec(h, w, rx, ry, x0, y0)


def _parse_widths(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise UsageError(f"bad --widths value: {e}") from e
    if len(widths) < 2:
        raise UsageError("--widths wants at least two comma-separated channel counts")
    return widths


def _parse_split(text: str) -> tuple[float, ...]:
    try:
        parts = tuple(float(p) for p in text.split("/"))
    except ValueError as e:
        raise UsageError(f"bad --split value: {e}") from e
    if len(parts) < 2 or any(p < 0 for p in parts) or sum(parts) <= 0:
        raise UsageError("--split wants nonnegative ratios like 80/5/15")
    return parts


def _load_scene(path: str):
    log.debug("reading scene %s", path)
    return rio.read_scene(path)


def _scene_files(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"scene directory {directory} does not exist")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".rgsb"))
    if not names:
        raise UsageError(f"no .rgsb scene files in {directory}")
    return [os.path.join(directory, n) for n in names]


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _label_cfg(args) -> LabelConfig:
    cfg = LabelConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as f:
            try:
                raw = json.load(f)
            except ValueError as e:
                raise rio.FormatError(f"label config is not valid JSON: {e}") from e
        allowed = set(LabelConfig.__dataclass_fields__)
        bad = set(raw) - allowed
        if bad:
            raise UsageError(f"unknown label config fields {sorted(bad)}")
        cfg = replace(cfg, **raw)
    overrides = {}
    if getattr(args, "min_count", None) is not None:
        overrides["min_count"] = args.min_count
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "no_hull", False):
        overrides["use_hull"] = False
    return replace(cfg, **overrides) if overrides else cfg


def _scene_refs(scene, args):
    sensors = [args.sensor] if getattr(args, "sensor", None) else scene.radar_ids
    for sid in sensors:
        if sid not in scene.radar_ids:
            raise UsageError(f"scene has no radar {sid!r} (has {scene.radar_ids})")
    return [r for r in scene_windows(scene, 0, args.frames) if r.sensor_id in sensors]


def _write_grids(scene, refs, out_dir: str, stem: str, make_grid) -> int:
    os.makedirs(out_dir, exist_ok=True)
    for ref in refs:
        path = os.path.join(out_dir, grid_name(stem, ref.sensor_id, ref.t_end))
        rio.write_grid(path, make_grid(ref))
        log.debug("wrote %s", path)
    return len(refs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    params = SceneParams()
    params = replace(
        params,
        n_steps=args.steps,
        speed=args.speed,
        world=replace(params.world, n_obstacles=args.n_obstacles),
    )
    if args.grid is not None:
        params = replace(params, grid=_parse_grid(args.grid))
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.scenes):
        seed = args.seed + i
        scene = gen_scene(seed, params)
        path = os.path.join(args.out, f"scene_{seed:04d}.rgsb")
        rio.write_scene(path, scene)
        log.info("wrote %s (%d steps, %d radars)", path, scene.n_steps, len(scene.radar_ids))
        print(path)
    return EXIT_OK


def cmd_label(args) -> int:
    scene = _load_scene(args.scene)
    labeler = SceneLabeler(scene, _label_cfg(args))
    refs = _scene_refs(scene, args)
    n = _write_grids(scene, refs, args.out, _stem(args.scene), lambda r: window_label(labeler, r))
    log.info("wrote %d label grids to %s", n, args.out)
    return EXIT_OK


def cmd_classic(args) -> int:
    scene = _load_scene(args.scene)
    ism = IsmConfig(
        kind=args.ism,
        p_hit=args.p_hit,
        p_miss=args.p_miss,
        t_occ=args.t_occ,
        t_free=args.t_free,
    )
    agg = AggregationConfig(k=args.frames)
    refs = _scene_refs(scene, args)
    stem = _stem(args.scene)
    os.makedirs(args.out, exist_ok=True)
    for ref in refs:
        path = os.path.join(args.out, grid_name(stem, ref.sensor_id, ref.t_end))
        rio.write_grid(path, classic_predict(scene, ref, ism, agg))
        if args.save_probs:
            probs = classic_probs(scene, ref, ism, agg)
            rio.write_prob_grid(path[: -len(".pgm")] + ".rgpb", scene.spec, probs)
        log.debug("wrote %s", path)
    log.info("wrote %d %s-model predictions to %s", len(refs), args.ism, args.out)
    return EXIT_OK


def cmd_raytrace(args) -> int:
    scene = _load_scene(args.scene)
    agg = AggregationConfig(k=args.frames)
    refs = _scene_refs(scene, args)
    fov = math.radians(args.fov_deg)
    n = _write_grids(
        scene,
        refs,
        args.out,
        _stem(args.scene),
        lambda r: raytrace_predict(scene, r, agg, fov, args.max_range),
    )
    log.info("wrote %d ray-trace predictions to %s", n, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    paths = _scene_files(args.data)
    scenes = [_load_scene(p) for p in paths]
    ratios = _parse_split(args.split)
    splits = split_scenes(len(scenes), ratios)
    train_idx, val_idx = splits[0], splits[1]
    if not train_idx:
        raise UsageError(f"--split {args.split} leaves no training scenes for {len(scenes)} files")
    if not val_idx:
        val_idx = [train_idx[-1]]
        log.warning("--split %s leaves no validation scenes; reusing the last training scene",
                    args.split)
    log.info(
        "scenes: %d train, %d val, %d held out",
        len(train_idx), len(val_idx), len(scenes) - len(train_idx) - len(val_idx),
    )
    agg = AggregationConfig(k=args.frames)
    lcfg = _label_cfg(args)
    spec = scenes[0].spec
    train_pairs = dataset_pairs(
        scenes, train_idx, args.frames, agg, lcfg, max_examples=args.max_examples, seed=args.seed
    )
    val_pairs = dataset_pairs(scenes, val_idx, args.frames, agg, lcfg)
    log.info("training on %d examples, validating on %d", len(train_pairs), len(val_pairs))
    cfg = TrainConfig(
        lr0=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        k=args.frames,
        seed=args.seed,
    )
    model, history = net_train(
        train_pairs, val_pairs, spec, cfg, loss_kind=args.loss, widths=_parse_widths(args.widths)
    )
    rio.write_model(args.out, model)
    with open(args.out + ".log.json", "w", encoding="utf-8") as f:
        json.dump(history, f, indent=2, sort_keys=True)
    best = max(h["val_miou"] for h in history)
    log.info("wrote %s (best validation mIoU %.4f)", args.out, best)
    print(f"{args.out}\tval_miou={best:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = rio.read_model(args.model)
    scene = _load_scene(args.scene)
    agg = AggregationConfig(k=args.frames)
    refs = _scene_refs(scene, args)
    n = _write_grids(
        scene,
        refs,
        args.out,
        _stem(args.scene),
        lambda r: net_infer(model, window_input_grid(scene, r, agg), scene.spec),
    )
    log.info("wrote %d network predictions to %s", n, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not os.path.isdir(args.pred):
        raise FileNotFoundError(f"prediction directory {args.pred} does not exist")
    names = sorted(n for n in os.listdir(args.pred) if n.endswith(".pgm"))
    if not names:
        raise UsageError(f"no .pgm predictions in {args.pred}")
    counts = ConfusionCounts.zeros()
    n = 0
    for name in names:
        gt_path = os.path.join(args.gt, name)
        if not os.path.exists(gt_path):
            raise FileNotFoundError(f"no ground-truth grid for {name} in {args.gt}")
        pred = rio.read_grid(os.path.join(args.pred, name))
        gt = rio.read_grid(gt_path)
        counts = counts + confusion(pred, gt)
        n += 1
    report = MetricsReport.from_counts(counts, n)
    if args.out:
        rio.write_report(args.out, report)
        log.info("wrote %s", args.out)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_tune(args) -> int:
    paths = _scene_files(args.val)
    scenes = [_load_scene(p) for p in paths]
    ism = IsmConfig(kind=args.ism, p_hit=args.p_hit, p_miss=args.p_miss)
    agg = AggregationConfig(k=args.frames)
    lcfg = _label_cfg(args)
    prob_grids = []
    gt_grids = []
    for scene in scenes:
        labeler = SceneLabeler(scene, lcfg)
        for ref in scene_windows(scene, 0, args.frames):
            prob_grids.append(classic_probs(scene, ref, ism, agg))
            gt_grids.append(window_label(labeler, ref))
    t_occ, t_free = tune_thresholds(prob_grids, gt_grids, default_threshold_candidates())
    pooled = ConfusionCounts.zeros()
    for probs, gt in zip(prob_grids, gt_grids):
        pooled = pooled + confusion(classify_grid(gt.spec, probs, t_occ, t_free), gt)
    best_miou = miou(iou_per_class(pooled))
    result = {"t_occ": t_occ, "t_free": t_free, "miou": best_miou, "ism": args.ism,
              "frames": args.frames}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(result, f, indent=2, sort_keys=True)
        log.info("wrote %s", args.out)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


_RENDER_COLORS = {
    0: (255, 255, 255),  # free
    1: (35, 35, 35),  # occupied
    2: (170, 170, 170),  # unobserved
    3: (130, 180, 220),  # ignore
}


def _dump_scene_text(path: str, out: str | None) -> None:
    scene = _load_scene(path)
    doc = {
        "grid": {
            "h": scene.spec.h, "w": scene.spec.w,
            "res_x": scene.spec.res_x, "res_y": scene.spec.res_y,
            "x0": scene.spec.x0, "y0": scene.spec.y0,
        },
        "seed": scene.seed,
        "n_steps": scene.n_steps,
        "mounts": [
            {"sensor_id": m.sensor_id, "kind": m.kind,
             "pose": [m.pose.x, m.pose.y, m.pose.yaw]}
            for m in scene.mounts
        ],
        "steps": [
            {
                "t": t,
                "ego": [scene.ego_poses[t].x, scene.ego_poses[t].y, scene.ego_poses[t].yaw],
                "lidar_points": len(scene.lidar_sweeps[t].points),
                "radar_points": {
                    sid: len(scene.radar_frames[sid][t].points) for sid in scene.radar_ids
                },
            }
            for t in range(scene.n_steps)
        ],
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
        log.info("wrote %s", out)
    else:
        print(text, end="")


def cmd_render(args) -> int:
    if (args.grid_path is None) == (args.scene is None):
        raise UsageError("render wants exactly one of --grid or --scene")
    if args.scene is not None:
        _dump_scene_text(args.scene, args.out)
        return EXIT_OK
    if not args.out:
        raise UsageError("render --grid needs --out")
    grid = rio.read_grid(args.grid_path)
    if args.out.endswith(".pgm"):
        rio.write_grid(args.out, grid)
    else:
        from PIL import Image

        rgb = np.zeros((grid.spec.h, grid.spec.w, 3), dtype=np.uint8)
        for cat, color in _RENDER_COLORS.items():
            rgb[grid.cells == cat] = color
        img = Image.fromarray(rgb[::-1], "RGB")  # +x (forward) points up
        if args.scale > 1:
            img = img.resize((img.width * args.scale, img.height * args.scale), Image.NEAREST)
        img.save(args.out)
    stats = {CATEGORY_NAMES[c]: int((grid.cells == c).sum()) for c in range(4)}
    log.info("wrote %s (%s)", args.out, stats)
    print(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_label_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with labeling settings")
    p.add_argument("--min-count", type=int, help="lidar hits per occupied cell")
    p.add_argument("--alpha", type=float, help="concave-hull alpha radius [m]")
    p.add_argument("--no-hull", action="store_true", help="skip the measured-region ignore mask")


def _add_window_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--frames", type=int, default=20, help="radar frames aggregated per window")
    p.add_argument("--sensor", help="restrict to one radar id")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="radargrid",
        description="Occupancy grids from sparse automotive radar: simulate, "
        "auto-label, filter, ray-trace, train, score.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate seeded synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=1, help="number of scenes (seeds seed..seed+N-1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--speed", type=float, default=1.2)
    p.add_argument("--n-obstacles", type=int, default=10)
    p.add_argument("--grid", help="h,w,res_x,res_y,x0,y0")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", help="render ground-truth grids from the lidar map")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_window_opts(p)
    _add_label_opts(p)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("classic", help="log-odds filtering predictions")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ism", choices=("delta", "gaussian"), default="delta")
    p.add_argument("--p-hit", type=float, default=0.7)
    p.add_argument("--p-miss", type=float, default=0.4)
    p.add_argument("--t-occ", type=float, default=0.65)
    p.add_argument("--t-free", type=float, default=0.35)
    p.add_argument("--save-probs", action="store_true",
                   help="also write raw probability grids (.rgpb)")
    _add_window_opts(p)
    p.set_defaults(func=cmd_classic)

    p = sub.add_parser("raytrace", help="visibility labeling of the aggregated input")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fov-deg", type=float, default=60.0, help="half opening angle")
    p.add_argument("--max-range", type=float, default=86.0)
    _add_window_opts(p)
    p.set_defaults(func=cmd_raytrace)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--data", required=True, help="directory of .rgsb scenes")
    p.add_argument("--split", default="80/5/15", help="train/val[/test] scene ratios")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--loss", choices=("lovasz", "wce"), default="lovasz")
    p.add_argument("--widths", default="16,32,64")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-examples", type=int)
    _add_label_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="network predictions for a scene")
    p.add_argument("--model", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_window_opts(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted grids")
    p.add_argument("--gt", required=True, help="directory of ground-truth grids")
    p.add_argument("--out", help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", help="grid-search classifier thresholds")
    p.add_argument("--val", required=True, help="directory of validation .rgsb scenes")
    p.add_argument("--ism", choices=("delta", "gaussian"), default="delta")
    p.add_argument("--p-hit", type=float, default=0.7)
    p.add_argument("--p-miss", type=float, default=0.4)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--out", help="write the best thresholds here as JSON")
    _add_label_opts(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("render", help="colorize a label grid, or dump a scene as text")
    p.add_argument("--grid", dest="grid_path", help="label grid to colorize")
    p.add_argument("--scene", help="scene bundle to dump as structured text")
    p.add_argument("--out", help="output file (.png/.pgm for grids; text for scenes)")
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=cmd_render)

    return ap


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        code = e.code if isinstance(e.code, int) else EXIT_USAGE
        return EXIT_OK if code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        log.error("%s", e)
        return EXIT_USAGE
    except FileNotFoundError as e:
        log.error("missing input: %s", e)
        return EXIT_MISSING
    except rio.FormatError as e:
        log.error("bad input file: %s", e)
        return EXIT_FORMAT
    except (
        SimulationError,
        TrainingDivergedError,
        DegenerateHullError,
        UndefinedLossError,
        ValueError,
        KeyError,
    ) as e:
        log.error("%s", e)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
