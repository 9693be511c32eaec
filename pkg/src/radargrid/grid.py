"""Grid geometry, planar rigid transforms, and cell-level ray casting.

Conventions used across the package: grids live in the sensor frame with
x pointing forward and y to the left, stored row-major so rows index x
and columns index y.  Cell (u, v) covers the half-open rectangle

    [x0 + u*res_x, x0 + (u+1)*res_x) x [y0 + v*res_y, y0 + (v+1)*res_y)

in meters.  Everything in this module is a pure function over immutable
values; label grids are small wrappers around uint8 arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

# Cell categories. The order matters: argmax tie-breaking and the on-disk
# byte mapping both rely on it.
FREE = 0
OCCUPIED = 1
UNOBSERVED = 2
IGNORE = 3

CATEGORY_NAMES = {FREE: "free", OCCUPIED: "occupied", UNOBSERVED: "unobserved", IGNORE: "ignore"}

# Breakpoint dedup tolerance along the unit ray parameter. Real cell
# crossings are separated by >= res/segment_length >> this; only corner
# double-hits fall below it.
_EPS_T = 1e-12


class Cell(NamedTuple):
    """Row/column index pair; in bounds by construction wherever returned."""

    u: int
    v: int


@dataclass(frozen=True)
class GridSpec:
    """Geometry of an h x w occupancy grid.

    (x0, y0) is the world coordinate of the corner of cell (0, 0).
    """

    h: int
    w: int
    res_x: float = 0.4
    res_y: float = 0.4
    x0: float = 0.0
    y0: float = -10.0

    def __post_init__(self):
        if self.h <= 0 or self.w <= 0:
            raise ValueError(f"grid shape must be positive, got {self.h}x{self.w}")
        if self.res_x <= 0 or self.res_y <= 0:
            raise ValueError("cell sizes must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)

    @property
    def extent_x(self) -> float:
        return self.h * self.res_x

    @property
    def extent_y(self) -> float:
        return self.w * self.res_y


#: Full-scale setup: 86 m forward, +-10 m lateral, 0.4 m cells.
DEFAULT_GRID = GridSpec(h=215, w=50, res_x=0.4, res_y=0.4, x0=0.0, y0=-10.0)

DEFAULT_FOV_HALF_ANGLE = math.radians(60.0)
DEFAULT_MAX_RANGE = 86.0


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(theta, math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform: rotation by yaw followed by translation."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """a then b as maps: (a o b)(p) = a(b(p))."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.yaw + b.yaw,
    )


def invert(a: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(-(c * a.x + s * a.y), -(-s * a.x + c * a.y), -a.yaw)


def transform_points(pose: Pose2, pts) -> np.ndarray:
    """Apply a pose to an (n, 2) array of points. Empty input passes through."""
    p = np.asarray(pts, dtype=float)
    if p.size == 0:
        return p.reshape(0, 2)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    x = c * p[..., 0] - s * p[..., 1] + pose.x
    y = s * p[..., 0] + c * p[..., 1] + pose.y
    return np.stack([x, y], axis=-1)


def world_to_cell(p, spec: GridSpec) -> Optional[Cell]:
    """Cell containing a point, or None when out of bounds.

    Out-of-bounds is a value here, not an error; callers decide what to
    do with points that miss the grid.
    """
    u = math.floor((float(p[0]) - spec.x0) / spec.res_x)
    v = math.floor((float(p[1]) - spec.y0) / spec.res_y)
    if 0 <= u < spec.h and 0 <= v < spec.w:
        return Cell(u, v)
    return None


def cell_center(cell: Cell, spec: GridSpec) -> tuple[float, float]:
    return (
        spec.x0 + (cell.u + 0.5) * spec.res_x,
        spec.y0 + (cell.v + 0.5) * spec.res_y,
    )


def cell_centers(spec: GridSpec) -> np.ndarray:
    """(h, w, 2) array of cell center coordinates."""
    xs = spec.x0 + (np.arange(spec.h) + 0.5) * spec.res_x
    ys = spec.y0 + (np.arange(spec.w) + 0.5) * spec.res_y
    return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)


@dataclass(eq=False)
class LabelGrid:
    """Per-cell categories (free / occupied / unobserved / ignore)."""

    spec: GridSpec
    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.shape != self.spec.shape:
            raise ValueError(f"cells shape {self.cells.shape} != grid {self.spec.shape}")
        if self.cells.max(initial=0) > IGNORE:
            raise ValueError("unknown category value in label grid")

    @classmethod
    def full(cls, spec: GridSpec, category: int) -> "LabelGrid":
        return cls(spec, np.full(spec.shape, category, dtype=np.uint8))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.cells, other.cells)


def _clip_exit(origin, d, spec: GridSpec) -> float:
    """Largest ray parameter still inside the grid box (<= 1)."""
    tmax = 1.0
    for o, dd, lo, hi in (
        (origin[0], d[0], spec.x0, spec.x0 + spec.extent_x),
        (origin[1], d[1], spec.y0, spec.y0 + spec.extent_y),
    ):
        if dd > 0:
            tmax = min(tmax, (hi - o) / dd)
        elif dd < 0:
            tmax = min(tmax, (lo - o) / dd)
    return tmax


def traverse_ray(spec: GridSpec, origin, target) -> list[Cell]:
    """Cells crossed by the segment origin -> target, in ray order.

    Includes every cell the segment crosses with positive length,
    clipped to the grid. The first entry is the cell containing the
    origin; an out-of-bounds origin yields an empty list. Where the
    segment passes exactly through a cell corner, one connector cell is
    inserted (row step first) so consecutive cells always share an edge.
    """
    ox, oy = float(origin[0]), float(origin[1])
    start = world_to_cell((ox, oy), spec)
    if start is None:
        return []
    dx, dy = float(target[0]) - ox, float(target[1]) - oy
    if dx == 0.0 and dy == 0.0:
        return [start]
    tmax = _clip_exit((ox, oy), (dx, dy), spec)
    if tmax <= _EPS_T:
        return [start]

    ts = [0.0, tmax]
    if dx != 0.0:
        for j in range(spec.h + 1):
            t = (spec.x0 + j * spec.res_x - ox) / dx
            if 0.0 < t < tmax:
                ts.append(t)
    if dy != 0.0:
        for j in range(spec.w + 1):
            t = (spec.y0 + j * spec.res_y - oy) / dy
            if 0.0 < t < tmax:
                ts.append(t)
    ts.sort()

    cells: list[Cell] = [start]
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 <= _EPS_T:
            continue
        m = 0.5 * (t0 + t1)
        c = world_to_cell((ox + m * dx, oy + m * dy), spec)
        if c is None or c == cells[-1]:
            continue
        last = cells[-1]
        if c.u != last.u and c.v != last.v:
            # corner crossing: keep the chain 4-connected
            cells.append(Cell(c.u, last.v))
        cells.append(c)
    return cells


def _batch_crossings(spec: GridSpec, origin, targets: np.ndarray):
    """Crossed cells for many segments sharing one origin.

    Returns (u, v, valid): (n, s) index arrays plus a validity mask, each
    row ordered by ray parameter. Segments are clipped to the grid;
    zero-length corner grazes are dropped. The origin must be inside the
    grid (its boundary counts via the floor convention).
    """
    t = np.asarray(targets, dtype=float)
    n = t.shape[0]
    ox, oy = float(origin[0]), float(origin[1])
    d = t - np.array([ox, oy])

    with np.errstate(divide="ignore", invalid="ignore"):
        tmax = np.ones(n)
        for o, dd, lo, hi in (
            (ox, d[:, 0], spec.x0, spec.x0 + spec.extent_x),
            (oy, d[:, 1], spec.y0, spec.y0 + spec.extent_y),
        ):
            exit_t = np.where(dd > 0, (hi - o) / dd, np.where(dd < 0, (lo - o) / dd, np.inf))
            tmax = np.minimum(tmax, exit_t)

        xs = spec.x0 + np.arange(spec.h + 1) * spec.res_x
        ys = spec.y0 + np.arange(spec.w + 1) * spec.res_y
        tx = (xs[None, :] - ox) / d[:, 0:1]
        ty = (ys[None, :] - oy) / d[:, 1:2]

    def _mask(arr):
        ok = np.isfinite(arr) & (arr > 0.0) & (arr < tmax[:, None])
        return np.where(ok, arr, np.inf)

    ts = np.concatenate(
        [np.zeros((n, 1)), tmax[:, None], _mask(tx), _mask(ty)], axis=1
    )
    ts.sort(axis=1)
    with np.errstate(invalid="ignore"):
        dt = ts[:, 1:] - ts[:, :-1]
        valid = np.isfinite(ts[:, 1:]) & (dt > _EPS_T)
        mid = 0.5 * (ts[:, 1:] + ts[:, :-1])
    mid = np.where(valid, mid, 0.0)  # park invalid samples on the origin
    px = ox + mid * d[:, 0:1]
    py = oy + mid * d[:, 1:2]
    u = np.floor((px - spec.x0) / spec.res_x).astype(np.int64)
    v = np.floor((py - spec.y0) / spec.res_y).astype(np.int64)
    np.clip(u, 0, spec.h - 1, out=u)
    np.clip(v, 0, spec.w - 1, out=v)
    u[~valid] = 0
    v[~valid] = 0
    return u, v, valid


def visibility_label(
    spec: GridSpec,
    sensor_origin,
    occupied_mask,
    fov_half_angle: float = DEFAULT_FOV_HALF_ANGLE,
    max_range: float = DEFAULT_MAX_RANGE,
    chunk: int = 4096,
) -> LabelGrid:
    """Label every cell by line of sight from the sensor.

    Each cell whose center lies inside the view cone (half angle about
    +x from the sensor) and within max_range is classified along the
    segment from the sensor to its own center: free when no occupied
    cell is crossed, occupied when the crossed occupied cells form a
    single run ending at the cell itself, unobserved otherwise (i.e.
    beyond the first obstacle). Cells outside the cone or beyond
    max_range are ignore. A cell is never labeled occupied unless its
    own mask bit is set.
    """
    mask = np.asarray(occupied_mask, dtype=bool)
    if mask.shape != spec.shape:
        raise ValueError(f"mask shape {mask.shape} != grid {spec.shape}")
    ox, oy = float(sensor_origin[0]), float(sensor_origin[1])
    centers = cell_centers(spec).reshape(-1, 2)
    rel = centers - np.array([ox, oy])
    rng = np.hypot(rel[:, 0], rel[:, 1])
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    in_view = (np.abs(ang) <= fov_half_angle) & (rng <= max_range)

    out = np.full(spec.h * spec.w, IGNORE, dtype=np.uint8)
    idx = np.flatnonzero(in_view)
    for lo in range(0, idx.size, chunk):
        sel = idx[lo : lo + chunk]
        u, v, valid = _batch_crossings(spec, (ox, oy), centers[sel])
        occ = mask[u, v] & valid
        seen_occ = np.logical_or.accumulate(occ, axis=1)
        # a free cell after any occupied cell breaks the single leading run
        broken = np.any(valid & ~mask[u, v] & seen_occ, axis=1)
        any_occ = occ.any(axis=1)
        lab = np.where(~any_occ, FREE, np.where(broken, UNOBSERVED, OCCUPIED))
        out[sel] = lab.astype(np.uint8)
    return LabelGrid(spec, out.reshape(spec.shape))
