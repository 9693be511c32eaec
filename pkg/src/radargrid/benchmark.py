"""Reproducible end-to-end comparison of the three mapping methods.

One call simulates a pool of scenes, auto-labels them from lidar, then
scores tuned classic filtering, direct ray-trace labeling, and a trained
network on a held-out test split -- at several aggregation window sizes,
so the effect of temporal aggregation is measured as well. Everything is
seeded; two runs with the same config produce identical numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .aggregate import AggregationConfig
from .autolabel import LabelConfig, SceneLabeler
from .classic_ism import (
    IsmConfig,
    classify_grid,
    default_threshold_candidates,
    tune_thresholds,
)
from .grid import DEFAULT_FOV_HALF_ANGLE, DEFAULT_MAX_RANGE, LabelGrid
from .metrics import report_from_grids
from .occnet import TrainConfig, infer, train
from .pipeline import (
    WindowRef,
    classic_probs,
    raytrace_predict,
    scene_windows,
    split_scenes,
    window_input_grid,
)
from .simworld import SceneParams, gen_scene


@dataclass(frozen=True)
class BenchmarkConfig:
    """Sizing of the standard benchmark; defaults fit a laptop-class CPU."""

    seed: int = 7
    n_scenes: int = 15
    split_ratios: tuple[float, float, float] = (10.0, 2.0, 3.0)
    window_sizes: tuple[int, ...] = (20, 10, 1)
    widths: tuple[int, ...] = (8, 16, 32, 48)
    epochs_by_k: dict = field(default_factory=lambda: {20: 34, 10: 22, 1: 12})
    train_cap_by_k: dict = field(default_factory=lambda: {20: None, 10: None, 1: 240})
    val_cap: int = 24
    batch_size: int = 8
    lr0: float = 0.05
    label: LabelConfig = LabelConfig(alpha=40.0)
    fov_half_angle: float = DEFAULT_FOV_HALF_ANGLE
    max_range: float = DEFAULT_MAX_RANGE
    scene: SceneParams = SceneParams()


def _subsample(refs: list[WindowRef], cap: int | None, seed: int) -> list[WindowRef]:
    if cap is None or len(refs) <= cap:
        return refs
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    keep = rng.choice(len(refs), size=cap, replace=False)
    return [refs[i] for i in sorted(keep)]


class _Bench:
    def __init__(self, cfg: BenchmarkConfig):
        self.cfg = cfg
        self.agg = AggregationConfig(k=1)
        self.timings: dict[str, float] = {}
        self.scenes = []
        self.labelers: dict[int, SceneLabeler] = {}
        self.label_cache: dict[tuple[int, str, int], LabelGrid] = {}

    def _timed(self, key: str, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timings[key] = self.timings.get(key, 0.0) + (time.perf_counter() - t0)
        return out

    def build_scenes(self):
        cfg = self.cfg
        self.scenes = [gen_scene(cfg.seed + i, cfg.scene) for i in range(cfg.n_scenes)]
        self.splits = split_scenes(cfg.n_scenes, cfg.split_ratios)
        self.labelers = {
            i: SceneLabeler(self.scenes[i], cfg.label) for i in range(cfg.n_scenes)
        }

    def refs(self, split: list[int], k: int, cap: int | None = None) -> list[WindowRef]:
        refs: list[WindowRef] = []
        for i in split:
            refs.extend(scene_windows(self.scenes[i], i, k))
        return _subsample(refs, cap, self.cfg.seed)

    def gt(self, ref: WindowRef) -> LabelGrid:
        key = (ref.scene_index, ref.sensor_id, ref.t_end)
        if key not in self.label_cache:
            self.label_cache[key] = self.labelers[ref.scene_index].label(
                ref.sensor_id, ref.t_end
            )
        return self.label_cache[key]

    def pairs(self, refs: list[WindowRef]) -> list[tuple[np.ndarray, LabelGrid]]:
        return [
            (
                window_input_grid(self.scenes[r.scene_index], r, self.agg),
                self.gt(r),
            )
            for r in refs
        ]

    # -- methods ----------------------------------------------------------

    def run_classic(self, val_refs, test_refs, kind: str) -> dict:
        base = IsmConfig(kind=kind)
        val_probs = [
            classic_probs(self.scenes[r.scene_index], r, base, self.agg) for r in val_refs
        ]
        val_gts = [self.gt(r) for r in val_refs]
        t_occ, t_free = tune_thresholds(val_probs, val_gts, default_threshold_candidates())
        tuned = IsmConfig(kind=kind, t_occ=t_occ, t_free=t_free)
        preds = [
            classify_grid(
                self.scenes[r.scene_index].spec,
                classic_probs(self.scenes[r.scene_index], r, tuned, self.agg),
                t_occ,
                t_free,
            )
            for r in test_refs
        ]
        rep = report_from_grids(preds, [self.gt(r) for r in test_refs])
        return {
            "t_occ": t_occ,
            "t_free": t_free,
            "miou": rep.miou,
            "iou": [rep.iou_free, rep.iou_occupied, rep.iou_unobserved],
        }

    def run_raytrace(self, test_refs) -> dict:
        cfg = self.cfg
        preds = [
            raytrace_predict(
                self.scenes[r.scene_index], r, self.agg, cfg.fov_half_angle, cfg.max_range
            )
            for r in test_refs
        ]
        rep = report_from_grids(preds, [self.gt(r) for r in test_refs])
        return {"miou": rep.miou, "iou": [rep.iou_free, rep.iou_occupied, rep.iou_unobserved]}

    def run_occnet(self, k: int, train_pairs, val_pairs, test_pairs) -> dict:
        cfg = self.cfg
        spec = self.cfg.scene.grid
        tc = TrainConfig(
            lr0=cfg.lr0,
            epochs=cfg.epochs_by_k[k],
            batch_size=cfg.batch_size,
            k=k,
            seed=0,
        )
        model, log = train(
            train_pairs, val_pairs, spec, tc, loss_kind="lovasz", widths=cfg.widths
        )
        preds = [infer(model, g, spec) for g, _ in test_pairs]
        rep = report_from_grids(preds, [lab for _, lab in test_pairs])
        return {
            "miou": rep.miou,
            "iou": [rep.iou_free, rep.iou_occupied, rep.iou_unobserved],
            "epochs": len(log),
            "final_train_loss": log[-1]["train_loss"],
            "final_val_miou": log[-1]["val_miou"],
        }


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> dict:
    """Full comparison; returns a JSON-serializable result dictionary.

    The timing keys separate the single-window-size core comparison
    ("core_seconds": scene build, labels, tuned classic, ray trace and
    net at the largest window size) from the extra window sizes used for
    the aggregation trend ("trend_seconds").
    """
    b = _Bench(cfg)
    b._timed("scenes", b.build_scenes)
    train_split, val_split, test_split = b.splits
    if not train_split or not test_split:
        raise ValueError("benchmark needs non-empty train and test splits")
    if not val_split:
        val_split = [train_split[-1]]
    ks = sorted(cfg.window_sizes, reverse=True)
    k_core = ks[0]

    result: dict = {
        "seed": cfg.seed,
        "n_scenes": cfg.n_scenes,
        "splits": {
            "train": train_split,
            "val": val_split,
            "test": test_split,
        },
        "window_sizes": list(ks),
        "classic": {},
        "raytrace": {},
        "occnet": {},
    }

    for k in ks:
        tag = str(k)
        phase = "core" if k == k_core else "trend"
        train_refs = b.refs(train_split, k, cfg.train_cap_by_k.get(k))
        val_refs = b.refs(val_split, k, cfg.val_cap)
        test_refs = b.refs(test_split, k)

        train_pairs = b._timed(f"{phase}_data", lambda: b.pairs(train_refs))
        val_pairs = b._timed(f"{phase}_data", lambda: b.pairs(val_refs))
        test_pairs = b._timed(f"{phase}_data", lambda: b.pairs(test_refs))

        if k == k_core:
            for kind in ("delta", "gaussian"):
                result["classic"][kind] = b._timed(
                    "core_classic", lambda: b.run_classic(val_refs, test_refs, kind)
                )
            result["classic"]["best_miou"] = max(
                result["classic"]["delta"]["miou"],
                result["classic"]["gaussian"]["miou"],
            )

        result["raytrace"][tag] = b._timed(
            f"{phase}_raytrace", lambda: b.run_raytrace(test_refs)
        )
        result["occnet"][tag] = b._timed(
            f"{phase}_occnet", lambda: b.run_occnet(k, train_pairs, val_pairs, test_pairs)
        )

    t = b.timings
    core = t.get("scenes", 0.0) + sum(v for k2, v in t.items() if k2.startswith("core_"))
    trend = sum(v for k2, v in t.items() if k2.startswith("trend_"))
    result["timings"] = {k2: round(v, 3) for k2, v in t.items()}
    result["core_seconds"] = round(core, 3)
    result["trend_seconds"] = round(trend, 3)
    return result


def format_benchmark(result: dict) -> str:
    """Plain-text table of the benchmark result."""
    lines = []
    lines.append(f"seed {result['seed']}  scenes {result['n_scenes']} "
                 f"(train/val/test = {len(result['splits']['train'])}/"
                 f"{len(result['splits']['val'])}/{len(result['splits']['test'])})")
    lines.append("")
    lines.append(f"{'method':<26}{'IoU occ':>9}{'IoU free':>9}{'IoU unobs':>10}{'mIoU':>7}")

    def row(name, d):
        occ, free, unobs = d["iou"][1], d["iou"][0], d["iou"][2]
        lines.append(f"{name:<26}{occ:>9.3f}{free:>9.3f}{unobs:>10.3f}{d['miou']:>7.3f}")

    k_core = str(result["window_sizes"][0])
    row("classic delta ISM", result["classic"]["delta"])
    row("classic gaussian ISM", result["classic"]["gaussian"])
    for k in result["window_sizes"]:
        row(f"ray trace (k={k})", result["raytrace"][str(k)])
    for k in result["window_sizes"]:
        row(f"network (k={k})", result["occnet"][str(k)])
    lines.append("")
    lines.append(f"core phase {result['core_seconds']:.1f} s "
                 f"(classic + ray trace + network at k={k_core}); "
                 f"aggregation trend {result['trend_seconds']:.1f} s")
    return "\n".join(lines)
