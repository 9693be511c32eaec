"""Classic Bayesian occupancy filtering with Delta and Gaussian sensor models.

Per-frame detections produce a sparse log-odds increment grid which is
added into an accumulator; probabilities are read out with a symmetric
clamp and thresholded into free / occupied / unobserved.

The accumulator stores fixed-point int64 internally (scale 2^-40) so
that summing increment grids is exactly order-independent; float
addition would pick up permutation-dependent rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np

from .grid import (
    FREE,
    IGNORE,
    OCCUPIED,
    UNOBSERVED,
    GridSpec,
    LabelGrid,
    _batch_crossings,
    normalize_angle,
    world_to_cell,
)

_FP_SCALE = float(2**40)


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


@dataclass(frozen=True)
class IsmConfig:
    """Inverse sensor model parameters and readout thresholds."""

    kind: str = "delta"  # "delta" | "gaussian"
    p_hit: float = 0.7
    p_miss: float = 0.4
    sigma_range: float = 0.6
    sigma_azimuth: float = math.radians(1.5)
    l0: float = 0.0
    l_max: float = 8.0
    t_occ: float = 0.65
    t_free: float = 0.35

    def __post_init__(self):
        if self.kind not in ("delta", "gaussian"):
            raise ValueError(f"unknown ISM kind {self.kind!r}")
        if not 0.5 < self.p_hit < 1.0:
            raise ValueError("p_hit must lie in (0.5, 1)")
        if not 0.0 < self.p_miss < 0.5:
            raise ValueError("p_miss must lie in (0, 0.5)")
        if self.sigma_range <= 0 or self.sigma_azimuth <= 0:
            raise ValueError("sigmas must be positive")
        if self.l_max <= 0:
            raise ValueError("l_max must be positive")
        if not 0.0 <= self.t_free <= self.t_occ <= 1.0:
            raise ValueError("need 0 <= t_free <= t_occ <= 1")


@dataclass(eq=False)
class LogOddsGrid:
    """Log-odds accumulator; values are finite, clamping happens at readout."""

    spec: GridSpec
    l0: float = 0.0
    raw: Optional[np.ndarray] = None  # int64 fixed point, internal

    def __post_init__(self):
        if self.raw is None:
            self.raw = np.zeros(self.spec.shape, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.int64)
        if self.raw.shape != self.spec.shape:
            raise ValueError("accumulator shape mismatch")

    @classmethod
    def zeros(cls, spec: GridSpec, l0: float = 0.0) -> "LogOddsGrid":
        return cls(spec, l0)

    @property
    def values(self) -> np.ndarray:
        return self.raw / _FP_SCALE


def bayes_update(acc: LogOddsGrid, increment: np.ndarray) -> LogOddsGrid:
    """values += increment - l0, applied only where the increment is nonzero.

    Mutates and returns the accumulator. No clamping here: the clamp is
    readout-only, which keeps accumulation exactly commutative.
    """
    inc = np.asarray(increment, dtype=float)
    if inc.shape != acc.spec.shape:
        raise ValueError("increment shape mismatch")
    mask = inc != 0.0
    q = np.rint((inc[mask] - acc.l0) * _FP_SCALE).astype(np.int64)
    acc.raw[mask] += q
    return acc


def logodds_to_prob(values: np.ndarray, l_max: float = 8.0) -> np.ndarray:
    """Clamp to [-l_max, l_max], then p = e^l / (1 + e^l)."""
    l = np.clip(np.asarray(values, dtype=float), -l_max, l_max)
    return 1.0 / (1.0 + np.exp(-l))


def _unoccluded_rays(spec: GridSpec, origin, detections: np.ndarray):
    """Sort out which detections see their own cell first along their ray.

    Returns (det_cells (m, 2) int, keep (m,) bool). A detection whose
    segment crosses another detection's cell before its own is occluded
    and contributes nothing this frame. Detections outside the grid are
    already removed by the caller.
    """
    u, v, valid = _batch_crossings(spec, origin, detections)
    n = len(detections)
    # cell containing each detection = last valid sample of its row
    last = u.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    rows = np.arange(n)
    det_u = u[rows, last]
    det_v = v[rows, last]

    hit_mask = np.zeros(spec.shape, dtype=bool)
    hit_mask[det_u, det_v] = True
    on_hit = hit_mask[u, v] & valid
    first_hit = np.argmax(on_hit, axis=1)  # each row has at least one (its own cell)
    keep = (u[rows, first_hit] == det_u) & (v[rows, first_hit] == det_v)
    return np.stack([det_u, det_v], axis=1), keep


def _free_space_mask(spec: GridSpec, origin, targets: np.ndarray) -> np.ndarray:
    """Cells crossed by any of the segments origin -> target."""
    mask = np.zeros(spec.shape, dtype=bool)
    if len(targets):
        u, v, valid = _batch_crossings(spec, origin, targets)
        mask[u[valid], v[valid]] = True
    return mask


def _in_grid(spec: GridSpec, pts: np.ndarray) -> np.ndarray:
    ok_x = (pts[:, 0] >= spec.x0) & (pts[:, 0] < spec.x0 + spec.extent_x)
    ok_y = (pts[:, 1] >= spec.y0) & (pts[:, 1] < spec.y0 + spec.extent_y)
    return ok_x & ok_y


def delta_ism_update(
    spec: GridSpec, sensor_origin, detections, cfg: IsmConfig
) -> np.ndarray:
    """Log-odds increment grid for one frame under the Delta model.

    The cell holding each unoccluded detection gets +logit(p_hit), cells
    crossed on the way there get +logit(p_miss), everything beyond stays
    0. Within the frame each cell receives a single increment and a hit
    beats free space.
    """
    inc = np.zeros(spec.shape, dtype=float)
    pts = np.asarray(detections, dtype=float).reshape(-1, 2)
    pts = pts[_in_grid(spec, pts)]
    if len(pts) == 0:
        return inc
    det_cells, keep = _unoccluded_rays(spec, sensor_origin, pts)
    pts = pts[keep]
    det_cells = det_cells[keep]
    if len(pts) == 0:
        return inc
    free = _free_space_mask(spec, sensor_origin, pts)
    inc[free] = logit(cfg.p_miss)
    inc[det_cells[:, 0], det_cells[:, 1]] = logit(cfg.p_hit)
    return inc


def gaussian_ism_update(
    spec: GridSpec, sensor_origin, detections, cfg: IsmConfig
) -> np.ndarray:
    """Gaussian-smoothed increment: hit mass spread in (range, azimuth).

    Each unoccluded detection spreads +logit(p_hit) over cells within 3
    sigma in range and azimuth, peak-normalized so the strongest cell
    gets exactly logit(p_hit); overlapping kernels combine by max. Free
    space runs along the ray as in the Delta model but stops
    3*sigma_range short of the detection. Weights are computed in log
    space, so sigma -> 0 degenerates exactly to the Delta model.
    """
    inc = np.zeros(spec.shape, dtype=float)
    pts = np.asarray(detections, dtype=float).reshape(-1, 2)
    pts = pts[_in_grid(spec, pts)]
    if len(pts) == 0:
        return inc
    _, keep = _unoccluded_rays(spec, sensor_origin, pts)
    pts = pts[keep]
    if len(pts) == 0:
        return inc

    ox, oy = float(sensor_origin[0]), float(sensor_origin[1])
    l_hit = logit(cfg.p_hit)
    occ_mass = np.zeros(spec.shape, dtype=float)
    back = 3.0 * cfg.sigma_range

    shortened = np.empty_like(pts)
    for i, (px, py) in enumerate(pts):
        r = math.hypot(px - ox, py - oy)
        phi = math.atan2(py - oy, px - ox)
        rs = max(0.0, r - back)
        shortened[i] = (ox + rs * math.cos(phi), oy + rs * math.sin(phi))

        # bounding window: 3 sigma in range plus the lateral arc
        reach = back + (r + back) * 3.0 * cfg.sigma_azimuth + math.hypot(spec.res_x, spec.res_y)
        u_lo = max(0, int((px - reach - spec.x0) // spec.res_x))
        u_hi = min(spec.h, int((px + reach - spec.x0) // spec.res_x) + 1)
        v_lo = max(0, int((py - reach - spec.y0) // spec.res_y))
        v_hi = min(spec.w, int((py + reach - spec.y0) // spec.res_y) + 1)
        cx = spec.x0 + (np.arange(u_lo, u_hi) + 0.5) * spec.res_x
        cy = spec.y0 + (np.arange(v_lo, v_hi) + 0.5) * spec.res_y
        gx, gy = np.meshgrid(cx, cy, indexing="ij")
        cr = np.hypot(gx - ox, gy - oy)
        ca = np.arctan2(gy - oy, gx - ox)
        dr = cr - r
        da = np.arctan2(np.sin(ca - phi), np.cos(ca - phi))
        inside = (np.abs(dr) <= back) & (np.abs(da) <= 3.0 * cfg.sigma_azimuth)
        oc = world_to_cell((px, py), spec)
        inside[oc.u - u_lo, oc.v - v_lo] = True  # detection's own cell always counts
        if not inside.any():
            continue
        logw = -0.5 * (dr / cfg.sigma_range) ** 2 - 0.5 * (da / cfg.sigma_azimuth) ** 2
        logw = np.where(inside, logw, -np.inf)
        w = np.exp(logw - logw.max())
        block = occ_mass[u_lo:u_hi, v_lo:v_hi]
        np.maximum(block, l_hit * w, out=block)

    free = _free_space_mask(spec, sensor_origin, shortened)
    inc[free] = logit(cfg.p_miss)
    occupied = occ_mass > 0.0
    inc[occupied] = occ_mass[occupied]
    return inc


def ism_update(spec: GridSpec, sensor_origin, detections, cfg: IsmConfig) -> np.ndarray:
    if cfg.kind == "delta":
        return delta_ism_update(spec, sensor_origin, detections, cfg)
    return gaussian_ism_update(spec, sensor_origin, detections, cfg)


def classify_grid(spec: GridSpec, probs: np.ndarray, t_occ: float, t_free: float) -> LabelGrid:
    """Threshold occupancy probabilities into the three observable classes."""
    if not 0.0 <= t_free <= t_occ <= 1.0:
        raise ValueError("need 0 <= t_free <= t_occ <= 1")
    p = np.asarray(probs, dtype=float)
    if p.shape != spec.shape:
        raise ValueError("probability grid shape mismatch")
    out = np.full(spec.shape, UNOBSERVED, dtype=np.uint8)
    out[p >= t_occ] = OCCUPIED
    out[p <= t_free] = FREE
    return LabelGrid(spec, out)


def tune_thresholds(
    prob_grids: list[np.ndarray],
    gt_grids: list[LabelGrid],
    candidates: Iterable[tuple[float, float]],
) -> tuple[float, float]:
    """Exhaustive sweep of (t_occ, t_free) pairs, maximizing pooled mIoU.

    Ties break toward the smaller t_occ, then the larger t_free.
    """
    from .metrics import ConfusionCounts, confusion, iou_per_class, miou

    if not prob_grids:
        raise ValueError("empty validation set")
    if len(prob_grids) != len(gt_grids):
        raise ValueError("probability/label count mismatch")
    cands = list(candidates)
    if not cands:
        raise ValueError("no threshold candidates")
    for t_occ, t_free in cands:
        if not 0.0 <= t_free <= t_occ <= 1.0:
            raise ValueError(f"invalid candidate pair ({t_occ}, {t_free})")

    best = None
    best_key = None
    for t_occ, t_free in cands:
        pooled = ConfusionCounts.zeros()
        for probs, gt in zip(prob_grids, gt_grids):
            pooled = pooled + confusion(classify_grid(gt.spec, probs, t_occ, t_free), gt)
        key = (miou(iou_per_class(pooled)), -t_occ, t_free)
        if best_key is None or key > best_key:
            best_key = key
            best = (t_occ, t_free)
    return best


def default_threshold_candidates() -> list[tuple[float, float]]:
    """Default sweep grid; keeps the 0.5 prior strictly between thresholds."""
    occs = np.round(np.arange(0.55, 0.951, 0.05), 3)
    frees = np.round(np.arange(0.05, 0.451, 0.05), 3)
    return [(float(o), float(f)) for o in occs for f in frees]


def tuned_config(cfg: IsmConfig, thresholds: tuple[float, float]) -> IsmConfig:
    return replace(cfg, t_occ=thresholds[0], t_free=thresholds[1])
