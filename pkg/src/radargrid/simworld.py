"""Deterministic synthetic driving worlds with dense lidar and sparse,
noisy clustered radar.

Worlds are axis-aligned boxes and disks, by default fenced in by
perimeter walls so the 2-D lidar (which has no ground returns) still
bounds free space in every direction it can reach. All randomness flows
from one integer seed through named SeedSequence keys, so generation is
reproducible regardless of call order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from .grid import GridSpec, Pose2, compose, normalize_angle
from .scene import MAX_CLUSTERS, LidarSweep, RadarFrame, SceneBundle, SensorMount

SeedLike = Union[int, np.random.SeedSequence]


class SimulationError(RuntimeError):
    """World generation could not satisfy its constraints."""


@dataclass(frozen=True)
class Box:
    x_min: float
    x_max: float
    y_min: float
    y_max: float


@dataclass(frozen=True)
class Disk:
    x: float
    y: float
    r: float


Obstacle = Union[Box, Disk]


@dataclass
class WorldMap:
    bounds: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    obstacles: list[Obstacle] = field(default_factory=list)


@dataclass(frozen=True)
class WorldParams:
    bounds: tuple[float, float, float, float] = (-25.0, 75.0, -18.0, 18.0)
    n_obstacles: int = 10
    corridor_half_width: float = 3.5
    boundary_walls: bool = True
    wall_thickness: float = 0.6
    box_size: tuple[float, float] = (1.5, 6.0)
    disk_radius: tuple[float, float] = (0.8, 2.0)
    max_tries: int = 200


@dataclass(frozen=True)
class RadarSensorParams:
    fov_half_angle: float = math.radians(60.0)
    max_range: float = 90.0
    detection_prob: float = 0.12  # per visible surface cell, per frame
    sigma_range: float = 0.5
    sigma_azimuth: float = math.radians(1.0)
    clutter_rate: float = 2.0
    dynamic_clutter_rate: float = 1.0
    max_clusters: int = MAX_CLUSTERS
    surface_cell_size: float = 0.4


@dataclass(frozen=True)
class LidarSensorParams:
    angular_resolution: float = math.radians(0.5)
    max_range: float = 70.0
    sigma_range: float = 0.03
    z_height: float = 1.0


def default_mounts() -> list[SensorMount]:
    return [
        SensorMount("radar_front", Pose2(3.5, 0.0, 0.0), "radar"),
        SensorMount("radar_rear_left", Pose2(-0.5, 0.9, math.radians(140.0)), "radar"),
        SensorMount("radar_rear_right", Pose2(-0.5, -0.9, math.radians(-140.0)), "radar"),
        SensorMount("lidar_top", Pose2(0.0, 0.0, 0.0), "lidar"),
    ]


@dataclass(frozen=True)
class SceneParams:
    grid: GridSpec = GridSpec(128, 48, 0.4, 0.4, 0.0, -9.6)
    n_steps: int = 40
    dt: float = 0.5
    speed: float = 1.2
    max_turn: float = 0.03  # rad per step, curvature bound
    world: WorldParams = WorldParams()
    radar: RadarSensorParams = RadarSensorParams()
    lidar: LidarSensorParams = LidarSensorParams()
    mounts: tuple[SensorMount, ...] = tuple(default_mounts())


def _rng(seed: SeedLike, *key: int) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        base = seed.entropy
    else:
        base = seed
    return np.random.default_rng(np.random.SeedSequence(base, spawn_key=key))


# ---------------------------------------------------------------------------
# geometry


def _ray_box(ox, oy, dx, dy, box: Box) -> np.ndarray:
    """First-hit distances for unit rays (dx, dy) against one box (inf = miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (box.x_min - ox) / dx
        t2 = (box.x_max - ox) / dx
        t3 = (box.y_min - oy) / dy
        t4 = (box.y_max - oy) / dy
    tx_lo = np.minimum(t1, t2)
    tx_hi = np.maximum(t1, t2)
    ty_lo = np.minimum(t3, t4)
    ty_hi = np.maximum(t3, t4)
    # degenerate directions: inside the slab forever, outside never
    span_x = np.where(dx == 0, np.where((ox >= box.x_min) & (ox <= box.x_max), -np.inf, np.inf), tx_lo)
    span_x_hi = np.where(dx == 0, np.where((ox >= box.x_min) & (ox <= box.x_max), np.inf, -np.inf), tx_hi)
    span_y = np.where(dy == 0, np.where((oy >= box.y_min) & (oy <= box.y_max), -np.inf, np.inf), ty_lo)
    span_y_hi = np.where(dy == 0, np.where((oy >= box.y_min) & (oy <= box.y_max), np.inf, -np.inf), ty_hi)
    enter = np.maximum(span_x, span_y)
    exit_ = np.minimum(span_x_hi, span_y_hi)
    hit = (enter <= exit_) & (exit_ >= 0)
    t = np.where(enter >= 0, enter, 0.0)  # origin inside: distance 0
    return np.where(hit, t, np.inf)


def _ray_disk(ox, oy, dx, dy, disk: Disk) -> np.ndarray:
    fx = ox - disk.x
    fy = oy - disk.y
    b = fx * dx + fy * dy
    c = fx * fx + fy * fy - disk.r * disk.r
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where(t1 >= 0, t1, np.where(t2 >= 0, 0.0, np.inf))  # inside: 0
    return np.where(ok, t, np.inf)


def raycast(world: WorldMap, origin, dirs: np.ndarray) -> np.ndarray:
    """Distance to the first obstacle along unit direction rows (inf = none)."""
    d = np.asarray(dirs, dtype=float).reshape(-1, 2)
    ox, oy = float(origin[0]), float(origin[1])
    best = np.full(len(d), np.inf)
    for ob in world.obstacles:
        if isinstance(ob, Box):
            t = _ray_box(ox, oy, d[:, 0], d[:, 1], ob)
        else:
            t = _ray_disk(ox, oy, d[:, 0], d[:, 1], ob)
        best = np.minimum(best, t)
    return best


def surface_points(world: WorldMap, spacing: float) -> np.ndarray:
    """Obstacle boundaries sampled at roughly the given arc spacing."""
    pts = []
    for ob in world.obstacles:
        if isinstance(ob, Box):
            w = ob.x_max - ob.x_min
            h = ob.y_max - ob.y_min
            nx = max(2, int(math.ceil(w / spacing)) + 1)
            ny = max(2, int(math.ceil(h / spacing)) + 1)
            xs = np.linspace(ob.x_min, ob.x_max, nx)
            ys = np.linspace(ob.y_min, ob.y_max, ny)
            pts.append(np.column_stack([xs, np.full(nx, ob.y_min)]))
            pts.append(np.column_stack([xs, np.full(nx, ob.y_max)]))
            pts.append(np.column_stack([np.full(ny, ob.x_min), ys]))
            pts.append(np.column_stack([np.full(ny, ob.x_max), ys]))
        else:
            n = max(8, int(math.ceil(2 * math.pi * ob.r / spacing)))
            th = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
            pts.append(np.column_stack([ob.x + ob.r * np.cos(th), ob.y + ob.r * np.sin(th)]))
    if not pts:
        return np.zeros((0, 2))
    return np.concatenate(pts, axis=0)


# ---------------------------------------------------------------------------
# generation


def _overlaps_corridor(ob: Obstacle, half_width: float) -> bool:
    if isinstance(ob, Box):
        return ob.y_min <= half_width and ob.y_max >= -half_width
    return abs(ob.y) <= half_width + ob.r


def gen_world(seed: SeedLike, params: WorldParams = WorldParams()) -> WorldMap:
    """Seeded world with the corridor along y ~ 0 kept obstacle-free."""
    rng = _rng(seed, 0)
    x_min, x_max, y_min, y_max = params.bounds
    obstacles: list[Obstacle] = []
    if params.boundary_walls:
        t = params.wall_thickness
        obstacles += [
            Box(x_min, x_min + t, y_min, y_max),
            Box(x_max - t, x_max, y_min, y_max),
            Box(x_min, x_max, y_min, y_min + t),
            Box(x_min, x_max, y_max - t, y_max),
        ]
    for _ in range(params.n_obstacles):
        placed = False
        for _ in range(params.max_tries):
            if rng.random() < 0.6:
                w = rng.uniform(*params.box_size)
                h = rng.uniform(*params.box_size)
                cx = rng.uniform(x_min + w / 2, x_max - w / 2)
                cy = rng.uniform(y_min + h / 2, y_max - h / 2)
                ob: Obstacle = Box(cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2)
            else:
                r = rng.uniform(*params.disk_radius)
                cx = rng.uniform(x_min + r, x_max - r)
                cy = rng.uniform(y_min + r, y_max - r)
                ob = Disk(cx, cy, r)
            if not _overlaps_corridor(ob, params.corridor_half_width):
                obstacles.append(ob)
                placed = True
                break
        if not placed:
            raise SimulationError(
                "could not place an obstacle clear of the corridor; "
                "widen the bounds or shrink corridor_half_width"
            )
    return WorldMap(bounds=params.bounds, obstacles=obstacles)


def gen_trajectory(
    world: WorldMap,
    seed: SeedLike,
    n_steps: int,
    speed: float,
    dt: float = 0.5,
    max_turn: float = 0.03,
) -> list[Pose2]:
    """Smooth seeded path down the corridor; heading change per step is
    bounded by max_turn and consecutive positions are exactly speed*dt apart."""
    rng = _rng(seed, 1)
    poses = [Pose2(0.0, 0.0, 0.0)]
    if speed == 0.0:
        return [poses[0]] * n_steps
    x, y, yaw = 0.0, 0.0, 0.0
    for _ in range(n_steps - 1):
        steer = -0.15 * y - 0.5 * yaw + 0.3 * rng.standard_normal() * max_turn
        yaw = normalize_angle(yaw + float(np.clip(steer, -max_turn, max_turn)))
        x += speed * dt * math.cos(yaw)
        y += speed * dt * math.sin(yaw)
        poses.append(Pose2(x, y, yaw))
    return poses


def sense_lidar(
    world: WorldMap,
    ego_pose: Pose2,
    mount: SensorMount,
    params: LidarSensorParams,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> LidarSweep:
    """One full 360-degree sweep; points in the sensor frame at z_height."""
    sensor = compose(ego_pose, mount.pose)
    local_angles = np.arange(0.0, 2 * math.pi, params.angular_resolution)
    world_angles = local_angles + sensor.yaw
    dirs = np.column_stack([np.cos(world_angles), np.sin(world_angles)])
    dist = raycast(world, (sensor.x, sensor.y), dirs)
    hit = np.isfinite(dist) & (dist <= params.max_range)
    r = dist[hit]
    if params.sigma_range > 0:
        r = r + rng.normal(0.0, params.sigma_range, size=r.shape)
    th = local_angles[hit]
    pts = np.column_stack([r * np.cos(th), r * np.sin(th), np.full(r.shape, params.z_height)])
    return LidarSweep(timestamp, pts)


def sense_radar(
    world: WorldMap,
    ego_pose: Pose2,
    mount: SensorMount,
    params: RadarSensorParams,
    rng: np.random.Generator,
    timestamp: float = 0.0,
) -> RadarFrame:
    """Sparse clustered detections in the sensor frame.

    Visible obstacle surface cells each fire independently with
    detection_prob and zero velocity; Poisson static clutter (zero
    velocity) and Poisson dynamic clutter (speed well above 1 m/s) are
    added over the view wedge, then everything is truncated to
    max_clusters nearest-first.
    """
    sensor = compose(ego_pose, mount.pose)
    surf = surface_points(world, params.surface_cell_size * 0.75)
    parts = []

    if len(surf):
        rel = surf - np.array([sensor.x, sensor.y])
        r = np.hypot(rel[:, 0], rel[:, 1])
        phi = np.arctan2(rel[:, 1], rel[:, 0]) - sensor.yaw
        phi = np.arctan2(np.sin(phi), np.cos(phi))
        cand = (r > 1e-6) & (r <= params.max_range) & (np.abs(phi) <= params.fov_half_angle)
        if cand.any():
            rc = r[cand]
            dirs = rel[cand] / rc[:, None]
            first = raycast(world, (sensor.x, sensor.y), dirs)
            visible = first >= rc - 1e-5 * np.maximum(rc, 1.0)
            rc = rc[visible]
            pc = phi[cand][visible]
            # one representative per surface cell (sensor-frame quantization)
            cs = params.surface_cell_size
            lx = rc * np.cos(pc)
            ly = rc * np.sin(pc)
            key = np.floor(lx / cs).astype(np.int64) * 1_000_003 + np.floor(ly / cs).astype(np.int64)
            _, uniq_idx = np.unique(key, return_index=True)
            uniq_idx.sort()
            rc = rc[uniq_idx]
            pc = pc[uniq_idx]
            fire = rng.random(len(rc)) < params.detection_prob
            rd = rc[fire] + rng.normal(0.0, params.sigma_range, size=int(fire.sum()))
            pd = pc[fire] + rng.normal(0.0, params.sigma_azimuth, size=int(fire.sum()))
            parts.append(
                np.column_stack(
                    [rd * np.cos(pd), rd * np.sin(pd), np.zeros_like(rd), np.zeros_like(rd)]
                )
            )

    n_static = rng.poisson(params.clutter_rate)
    if n_static:
        r = params.max_range * np.sqrt(rng.random(n_static))
        a = rng.uniform(-params.fov_half_angle, params.fov_half_angle, n_static)
        parts.append(
            np.column_stack([r * np.cos(a), r * np.sin(a), np.zeros(n_static), np.zeros(n_static)])
        )

    n_dyn = rng.poisson(params.dynamic_clutter_rate)
    if n_dyn:
        r = params.max_range * np.sqrt(rng.random(n_dyn))
        a = rng.uniform(-params.fov_half_angle, params.fov_half_angle, n_dyn)
        spd = rng.uniform(1.5, 12.0, n_dyn)
        vth = rng.uniform(-math.pi, math.pi, n_dyn)
        parts.append(
            np.column_stack(
                [r * np.cos(a), r * np.sin(a), spd * np.cos(vth), spd * np.sin(vth)]
            )
        )

    pts = np.concatenate(parts, axis=0) if parts else np.zeros((0, 4))
    if len(pts) > params.max_clusters:
        order = np.argsort(np.hypot(pts[:, 0], pts[:, 1]), kind="stable")
        pts = pts[order[: params.max_clusters]]
    return RadarFrame(timestamp, mount.sensor_id, pts)


def gen_scene(seed: int, params: SceneParams = SceneParams()) -> SceneBundle:
    """One fully simulated scene; identical seeds give identical bundles."""
    world = gen_world(seed, params.world)
    ego_poses = gen_trajectory(world, seed, params.n_steps, params.speed, params.dt, params.max_turn)
    mounts = list(params.mounts)
    radar_mounts = [m for m in mounts if m.kind == "radar"]
    lidar_mounts = [m for m in mounts if m.kind == "lidar"]
    if not lidar_mounts:
        raise SimulationError("scene needs a lidar mount for labeling")

    sweeps = []
    frames: dict[str, list[RadarFrame]] = {m.sensor_id: [] for m in radar_mounts}
    for t, ego in enumerate(ego_poses):
        ts = t * params.dt
        rng_l = _rng(seed, 2, t, 0)
        sweeps.append(sense_lidar(world, ego, lidar_mounts[0], params.lidar, rng_l, ts))
        for si, m in enumerate(radar_mounts):
            rng_r = _rng(seed, 2, t, 1 + si)
            frames[m.sensor_id].append(sense_radar(world, ego, m, params.radar, rng_r, ts))
    return SceneBundle(
        spec=params.grid,
        seed=int(seed),
        mounts=mounts,
        ego_poses=ego_poses,
        lidar_sweeps=sweeps,
        radar_frames=frames,
    )
