"""Ground-truth label generation from aggregated lidar.

Scene-level pipeline: stack all sweeps in the global frame, project into
the radar grid, threshold the hit counts, clean the mask morphologically
(dilate, fill holes, erode), ray-trace visibility from the radar origin,
then ignore everything outside a concave hull of the lidar coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import shapely
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.ops import unary_union

from .grid import (
    DEFAULT_FOV_HALF_ANGLE,
    DEFAULT_MAX_RANGE,
    IGNORE,
    GridSpec,
    LabelGrid,
    Pose2,
    cell_centers,
    compose,
    invert,
    transform_points,
    visibility_label,
)
from .scene import SceneBundle


class DegenerateHullError(ValueError):
    """Fewer than 3 points, or all collinear: no area to hull."""


@dataclass(frozen=True)
class LabelConfig:
    """Knobs of the auto-labeling pipeline."""

    min_count: int = 2
    z_min: float = 0.3
    z_max: float = 2.5
    morph_kernel: int = 3
    alpha: float = 4.0
    fov_half_angle: float = DEFAULT_FOV_HALF_ANGLE
    max_range: float = DEFAULT_MAX_RANGE
    use_hull: bool = True

    def __post_init__(self):
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.z_min >= self.z_max:
            raise ValueError("empty z window")
        if self.morph_kernel < 1 or self.morph_kernel % 2 == 0:
            raise ValueError("morph_kernel must be odd and >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def aggregate_lidar(scene: SceneBundle) -> np.ndarray:
    """All sweeps mapped to the global frame; (n, 3), z passed through."""
    lidar_mounts = [m for m in scene.mounts if m.kind == "lidar"]
    if not lidar_mounts:
        raise ValueError("scene has no lidar sensor")
    mount = lidar_mounts[0]
    parts = []
    for ego, sweep in zip(scene.ego_poses, scene.lidar_sweeps):
        pose = compose(ego, mount.pose)
        if len(sweep.points) == 0:
            continue
        xy = transform_points(pose, sweep.points[:, :2])
        parts.append(np.column_stack([xy, sweep.points[:, 2]]))
    if not parts:
        return np.zeros((0, 3))
    return np.concatenate(parts, axis=0)


def project_count_grid(
    points: np.ndarray, radar_pose: Pose2, spec: GridSpec, z_window: tuple[float, float]
) -> np.ndarray:
    """Bin z-filtered global points into the radar grid; int64 counts."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    z_lo, z_hi = z_window
    pts = pts[(pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)]
    counts = np.zeros(spec.shape, dtype=np.int64)
    if len(pts) == 0:
        return counts
    local = transform_points(invert(radar_pose), pts[:, :2])
    u = np.floor((local[:, 0] - spec.x0) / spec.res_x).astype(np.int64)
    v = np.floor((local[:, 1] - spec.y0) / spec.res_y).astype(np.int64)
    ok = (u >= 0) & (u < spec.h) & (v >= 0) & (v < spec.w)
    lin = u[ok] * spec.w + v[ok]
    counts += np.bincount(lin, minlength=spec.h * spec.w).reshape(spec.shape)
    return counts


def threshold_counts(counts: np.ndarray, min_count: int = 2) -> np.ndarray:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    return np.asarray(counts) >= min_count


def morph_clean(mask: np.ndarray, kernel: int = 3) -> np.ndarray:
    """One dilation, flood-fill hole filling, one erosion (square element).

    The erosion treats the outside of the grid as foreground so obstacles
    touching the border are not nibbled away.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    m = np.asarray(mask, dtype=bool)
    st = np.ones((kernel, kernel), dtype=bool)
    d = ndimage.binary_dilation(m, structure=st)
    f = ndimage.binary_fill_holes(d)
    return ndimage.binary_erosion(f, structure=st, border_value=1)


def make_label_grid(
    occupied_mask: np.ndarray,
    spec: GridSpec,
    fov_half_angle: float = DEFAULT_FOV_HALF_ANGLE,
    max_range: float = DEFAULT_MAX_RANGE,
) -> LabelGrid:
    """Visibility labeling of a cleaned mask, sensor at the grid origin."""
    return visibility_label(spec, (0.0, 0.0), occupied_mask, fov_half_angle, max_range)


@dataclass(eq=False)
class HullPolygon:
    """Concave coverage boundary; possibly several rings (incl. holes)."""

    geom: shapely.Geometry

    @property
    def rings(self) -> list[np.ndarray]:
        polys = (
            list(self.geom.geoms) if self.geom.geom_type == "MultiPolygon" else [self.geom]
        )
        out = []
        for poly in polys:
            out.append(np.asarray(poly.exterior.coords))
            out.extend(np.asarray(r.coords) for r in poly.interiors)
        return out

    @property
    def area(self) -> float:
        return float(self.geom.area)

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=float).reshape(-1, 2)
        if len(p) == 0:
            return np.zeros(0, dtype=bool)
        return shapely.covers(self.geom, shapely.points(p))


def _circumradii(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    a = pts[simplices[:, 0]]
    b = pts[simplices[:, 1]]
    c = pts[simplices[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(a - c, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    area2 = np.abs(cross)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = la * lb * lc / (2.0 * area2)
    r[area2 == 0.0] = np.inf
    return r


def concave_hull(points: np.ndarray, alpha: float = 4.0) -> HullPolygon:
    """Alpha shape: union of Delaunay triangles with circumradius <= alpha.

    Any input point not covered by a kept triangle pulls in its
    smallest-circumradius incident triangle, so the hull always contains
    every input point while staying inside the convex hull. Large alpha
    therefore recovers the convex hull.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise DegenerateHullError(f"need >= 3 distinct points, got {len(pts)}")
    try:
        tri = Delaunay(pts)
    except QhullError as e:
        raise DegenerateHullError("input points are collinear") from e
    radii = _circumradii(pts, tri.simplices)
    keep = radii <= alpha

    covered = np.zeros(len(pts), dtype=bool)
    covered[tri.simplices[keep].ravel()] = True
    if not covered.all():
        order = np.argsort(radii, kind="stable")
        for pi in np.flatnonzero(~covered):
            if covered[pi]:
                continue
            for ti in order:
                if pi in tri.simplices[ti]:
                    keep[ti] = True
                    covered[tri.simplices[ti]] = True
                    break
    if not keep.any():
        raise DegenerateHullError("no triangle admitted; alpha too small for the input")

    polys = [ShapelyPolygon(pts[s]) for s in tri.simplices[keep]]
    geom = unary_union(polys)
    if geom.geom_type == "GeometryCollection":
        geom = unary_union([g for g in geom.geoms if g.geom_type in ("Polygon", "MultiPolygon")])
    return HullPolygon(geom.buffer(0))


def apply_ignore_mask(grid: LabelGrid, hull: HullPolygon, radar_pose: Pose2) -> LabelGrid:
    """Mark cells whose global center falls outside the hull as ignore.

    Cells that are already ignore (outside the view cone) stay ignore.
    """
    centers = cell_centers(grid.spec).reshape(-1, 2)
    global_centers = transform_points(radar_pose, centers)
    inside = hull.contains_points(global_centers).reshape(grid.spec.shape)
    out = grid.cells.copy()
    out[~inside] = IGNORE
    return LabelGrid(grid.spec, out)


class SceneLabeler:
    """Labels any radar frame of one scene; lidar stacking and the hull
    are computed once and reused."""

    def __init__(self, scene: SceneBundle, cfg: LabelConfig = LabelConfig()):
        self.scene = scene
        self.cfg = cfg
        self.cloud = aggregate_lidar(scene)
        self.hull: Optional[HullPolygon] = None
        if cfg.use_hull:
            self.hull = concave_hull(self.cloud[:, :2], cfg.alpha)

    def label(self, sensor_id: str, t: int) -> LabelGrid:
        scene, cfg = self.scene, self.cfg
        mount = scene.mount_for(sensor_id)
        radar_pose = compose(scene.ego_poses[t], mount.pose)
        counts = project_count_grid(self.cloud, radar_pose, scene.spec, (cfg.z_min, cfg.z_max))
        mask = morph_clean(threshold_counts(counts, cfg.min_count), cfg.morph_kernel)
        lg = make_label_grid(mask, scene.spec, cfg.fov_half_angle, cfg.max_range)
        if self.hull is not None:
            lg = apply_ignore_mask(lg, self.hull, radar_pose)
        return lg
