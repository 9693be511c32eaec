"""End-to-end plumbing: scene splits, dataset assembly, and the three
mapping methods run over a scene (Bayesian filtering, direct ray-trace
labeling of the aggregated input, and network inference).

A "window" is k consecutive frames of one radar ending at frame t; all
moving-sensor compensation maps detections into the sensor pose at the
window end, which is also the frame the ground-truth label is rendered
in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import AggregationConfig, frame_to_window_end, rasterize_bev, window_slices
from .autolabel import LabelConfig, SceneLabeler
from .classic_ism import (
    IsmConfig,
    LogOddsGrid,
    bayes_update,
    classify_grid,
    ism_update,
    logodds_to_prob,
)
from .grid import GridSpec, LabelGrid, Pose2, compose, visibility_label
from .scene import SceneBundle


def split_scenes(n_scenes: int, ratios: tuple[float, ...]) -> list[list[int]]:
    """Partition scene indices into contiguous splits sized by ratio using
    largest-remainder rounding, so the sizes always sum to n_scenes."""
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    if not ratios or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be non-negative and sum to > 0")
    total = float(sum(ratios))
    quotas = [n_scenes * r / total for r in ratios]
    sizes = [int(q) for q in quotas]
    short = n_scenes - sum(sizes)
    remainders = sorted(
        range(len(ratios)), key=lambda i: (quotas[i] - sizes[i], -i), reverse=True
    )
    for i in remainders[:short]:
        sizes[i] += 1
    out = []
    start = 0
    for s in sizes:
        out.append(list(range(start, start + s)))
        start += s
    return out


@dataclass(frozen=True)
class WindowRef:
    """One training/evaluation example: scene x radar x window-end frame."""

    scene_index: int
    sensor_id: str
    t_end: int
    t_start: int


def scene_windows(scene: SceneBundle, scene_index: int, k: int) -> list[WindowRef]:
    refs = []
    for sid in scene.radar_ids:
        for r in window_slices(scene.n_steps, k):
            refs.append(WindowRef(scene_index, sid, t_end=r.stop - 1, t_start=r.start))
    return refs


def window_points(
    scene: SceneBundle, ref: WindowRef, cfg: AggregationConfig
) -> tuple[np.ndarray, np.ndarray]:
    """All static detections of the window in the window-end sensor frame,
    plus the per-frame sensor origins expressed in that same frame."""
    mount = scene.mount_for(ref.sensor_id)
    ego_end = scene.ego_poses[ref.t_end]
    pts_parts = []
    origins = []
    for t in range(ref.t_start, ref.t_end + 1):
        pts, origin = frame_to_window_end(
            scene.radar_frames[ref.sensor_id][t],
            scene.ego_poses[t],
            ego_end,
            mount,
            cfg.velocity_threshold,
        )
        pts_parts.append(pts)
        origins.append(origin)
    return np.concatenate(pts_parts, axis=0), np.asarray(origins, dtype=float)


def window_input_grid(
    scene: SceneBundle, ref: WindowRef, cfg: AggregationConfig
) -> np.ndarray:
    points, _ = window_points(scene, ref, cfg)
    return rasterize_bev(points, scene.spec)


def window_label(labeler: SceneLabeler, ref: WindowRef) -> LabelGrid:
    return labeler.label(ref.sensor_id, ref.t_end)


def grid_name(stem: str, sensor_id: str, t_end: int) -> str:
    return f"{stem}__{sensor_id}__t{t_end:04d}.pgm"


def dataset_pairs(
    scenes: list[SceneBundle],
    scene_indices: list[int],
    k: int,
    cfg: AggregationConfig,
    label_cfg: LabelConfig,
    max_examples: int | None = None,
    seed: int = 0,
) -> list[tuple[np.ndarray, LabelGrid]]:
    """(input grid, label grid) pairs over the given scenes. With
    max_examples set, a seeded subsample keeps the pair list reproducible."""
    refs: list[WindowRef] = []
    for idx in scene_indices:
        refs.extend(scene_windows(scenes[idx], idx, k))
    if max_examples is not None and len(refs) > max_examples:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
        keep = rng.choice(len(refs), size=max_examples, replace=False)
        refs = [refs[i] for i in sorted(keep)]
    labelers: dict[int, SceneLabeler] = {}
    pairs = []
    for ref in refs:
        if ref.scene_index not in labelers:
            labelers[ref.scene_index] = SceneLabeler(scenes[ref.scene_index], label_cfg)
        grid = window_input_grid(scenes[ref.scene_index], ref, cfg)
        label = window_label(labelers[ref.scene_index], ref)
        pairs.append((grid, label))
    return pairs


# ---------------------------------------------------------------------------
# classic filtering


def classic_probs(
    scene: SceneBundle, ref: WindowRef, ism: IsmConfig, cfg: AggregationConfig
) -> np.ndarray:
    """Occupancy probabilities from log-odds filtering over the window.

    Each frame's detections update the grid from that frame's own sensor
    origin (mapped into the window-end frame), so free space is carved
    along the rays that were actually measured.
    """
    mount = scene.mount_for(ref.sensor_id)
    ego_end = scene.ego_poses[ref.t_end]
    acc = LogOddsGrid.zeros(scene.spec, l0=ism.l0)
    for t in range(ref.t_start, ref.t_end + 1):
        frame = scene.radar_frames[ref.sensor_id][t]
        pts, origin = frame_to_window_end(
            frame, scene.ego_poses[t], ego_end, mount, cfg.velocity_threshold
        )
        inc = ism_update(scene.spec, (float(origin[0]), float(origin[1])), pts, ism)
        bayes_update(acc, inc)
    return logodds_to_prob(acc.values, ism.l_max)


def classic_predict(
    scene: SceneBundle, ref: WindowRef, ism: IsmConfig, cfg: AggregationConfig
) -> LabelGrid:
    probs = classic_probs(scene, ref, ism, cfg)
    return classify_grid(scene.spec, probs, ism.t_occ, ism.t_free)


# ---------------------------------------------------------------------------
# direct ray-trace labeling of the aggregated input


def raytrace_predict(
    scene: SceneBundle,
    ref: WindowRef,
    cfg: AggregationConfig,
    fov_half_angle: float,
    max_range: float,
) -> LabelGrid:
    """Label the aggregated detections exactly like the ground-truth
    renderer labels the cleaned lidar map: detections become the occupied
    set, then per-cell visibility from the window-end sensor origin
    assigns Free / Occupied / Unobserved. No prior and no tuning."""
    points, _ = window_points(scene, ref, cfg)
    occupied = rasterize_bev(points, scene.spec).astype(bool)
    return visibility_label(scene.spec, (0.0, 0.0), occupied, fov_half_angle, max_range)


# ---------------------------------------------------------------------------
# network inference over a scene


def scene_predictions(
    scenes: list[SceneBundle],
    scene_indices: list[int],
    k: int,
    cfg: AggregationConfig,
    predict_fn,
) -> list[tuple[WindowRef, LabelGrid]]:
    """predict_fn(scene, ref) -> LabelGrid, applied over every window."""
    out = []
    for idx in scene_indices:
        for ref in scene_windows(scenes[idx], idx, k):
            out.append((ref, predict_fn(scenes[idx], ref)))
    return out


def sensor_pose_at(scene: SceneBundle, sensor_id: str, t: int) -> Pose2:
    return compose(scene.ego_poses[t], scene.mount_for(sensor_id).pose)
