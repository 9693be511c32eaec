"""Sensor data containers shared by the aggregation, labeling and sim code."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, Pose2

MAX_CLUSTERS = 128


@dataclass
class RadarFrame:
    """One radar measurement cycle: clustered points in the sensor frame.

    points is (n, 4) float64 with columns x, y, vx, vy; velocities are
    ground-relative, expressed in the sensor frame.
    """

    timestamp: float
    sensor_id: str
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if len(self.points) > MAX_CLUSTERS:
            raise ValueError(f"radar frame has {len(self.points)} points, max {MAX_CLUSTERS}")


@dataclass
class LidarSweep:
    """One lidar sweep: (n, 3) xyz points in the sensor frame."""

    timestamp: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


@dataclass(frozen=True)
class SensorMount:
    """Static mounting of one sensor: pose of the sensor in the ego frame."""

    sensor_id: str
    pose: Pose2
    kind: str  # "radar" | "lidar"

    def __post_init__(self):
        if self.kind not in ("radar", "lidar"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")


@dataclass
class SceneBundle:
    """A recorded scene: ego trajectory plus all sensor data, time-aligned.

    radar_frames maps sensor_id -> list of frames, one per timestep;
    lidar_sweeps has one sweep per timestep.
    """

    spec: GridSpec
    seed: int
    mounts: list[SensorMount]
    ego_poses: list[Pose2]
    lidar_sweeps: list[LidarSweep] = field(default_factory=list)
    radar_frames: dict[str, list[RadarFrame]] = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.ego_poses)

    @property
    def radar_ids(self) -> list[str]:
        return sorted(self.radar_frames.keys())

    def mount_for(self, sensor_id: str) -> SensorMount:
        for m in self.mounts:
            if m.sensor_id == sensor_id:
                return m
        raise KeyError(f"no mount for sensor {sensor_id!r}")
