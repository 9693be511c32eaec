"""Temporal aggregation of radar frames into the latest sensor frame.

Moving objects leave smeared artifacts when frames are stacked, so each
frame is first filtered down to its quasi-static points by speed, then
ego-motion compensated into the grid frame of the window's last frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridSpec, Pose2, compose, invert, transform_points, world_to_cell
from .scene import RadarFrame, SensorMount


@dataclass(frozen=True)
class AggregationConfig:
    k: int = 1
    velocity_threshold: float = 0.5  # m/s

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("window size k must be >= 1")
        if self.velocity_threshold < 0:
            raise ValueError("velocity threshold must be >= 0")


def filter_dynamic(frame: RadarFrame, velocity_threshold: float = 0.5) -> RadarFrame:
    """Keep points with ground-relative speed <= threshold."""
    pts = frame.points
    speed = np.hypot(pts[:, 2], pts[:, 3])
    return RadarFrame(frame.timestamp, frame.sensor_id, pts[speed <= velocity_threshold])


def relative_sensor_pose(ego_i: Pose2, ego_t: Pose2, mount: SensorMount) -> Pose2:
    """Pose of the sensor at time i expressed in the sensor frame at time t."""
    return compose(invert(compose(ego_t, mount.pose)), compose(ego_i, mount.pose))


def frame_to_window_end(
    frame: RadarFrame,
    ego_i: Pose2,
    ego_t: Pose2,
    mount: SensorMount,
    velocity_threshold: float = 0.5,
) -> tuple[np.ndarray, tuple[float, float]]:
    """Static points of one frame mapped into the window-end sensor frame.

    Returns (points (n, 2), sensor origin at time i in time-t coordinates).
    """
    kept = filter_dynamic(frame, velocity_threshold)
    rel = relative_sensor_pose(ego_i, ego_t, mount)
    return transform_points(rel, kept.points[:, :2]), (rel.x, rel.y)


def aggregate_frames(
    frames: list[RadarFrame],
    ego_poses: list[Pose2],
    mount: SensorMount,
    cfg: AggregationConfig,
) -> np.ndarray:
    """Stack k frames into the last frame's sensor coordinates.

    frames and ego_poses run oldest to newest and must have equal length;
    the output concatenates the speed-filtered, motion-compensated points
    of every frame as an (n, 2) array.
    """
    if len(frames) != len(ego_poses):
        raise ValueError(f"{len(frames)} frames but {len(ego_poses)} ego poses")
    if not frames:
        raise ValueError("empty window")
    ego_t = ego_poses[-1]
    parts = []
    for frame, ego_i in zip(frames, ego_poses):
        pts, _ = frame_to_window_end(frame, ego_i, ego_t, mount, cfg.velocity_threshold)
        parts.append(pts)
    return np.concatenate(parts, axis=0)


def rasterize_bev(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Binary occupancy image: cell is 1 iff it holds >= 1 point.

    Out-of-bounds points are dropped silently.
    """
    out = np.zeros(spec.shape, dtype=np.uint8)
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) == 0:
        return out
    u = np.floor((p[:, 0] - spec.x0) / spec.res_x).astype(np.int64)
    v = np.floor((p[:, 1] - spec.y0) / spec.res_y).astype(np.int64)
    ok = (u >= 0) & (u < spec.h) & (v >= 0) & (v < spec.w)
    out[u[ok], v[ok]] = 1
    return out


def window_slices(n_frames: int, k: int) -> list[range]:
    """Non-overlapping windows [0:k), [k:2k), ...; a partial tail is dropped."""
    if k < 1:
        raise ValueError("window size k must be >= 1")
    return [range(s, s + k) for s in range(0, n_frames - k + 1, k)]
