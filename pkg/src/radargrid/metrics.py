"""Per-class IoU and mean IoU over pooled confusion counts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import FREE, IGNORE, OCCUPIED, UNOBSERVED, LabelGrid

N_CLASSES = 3  # free, occupied, unobserved; ignore never enters the counts


@dataclass(eq=False)
class ConfusionCounts:
    """3x3 integer matrix indexed (ground truth, prediction)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES):
            raise ValueError("confusion matrix must be 3x3")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def zeros(cls) -> "ConfusionCounts":
        return cls()

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionCounts):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(pred: LabelGrid, gt: LabelGrid) -> ConfusionCounts:
    """Count (gt, pred) pairs, skipping cells the ground truth ignores.

    Predicting ignore on a scored cell is an error; on a cell the ground
    truth also ignores it is fine (out-of-view cells coincide by design).
    """
    if pred.spec != gt.spec:
        raise ValueError("prediction/ground-truth grid spec mismatch")
    keep = gt.cells != IGNORE
    if (pred.cells[keep] == IGNORE).any():
        raise ValueError("prediction contains ignore cells on scored cells")
    g = gt.cells[keep].astype(np.int64)
    p = pred.cells[keep].astype(np.int64)
    flat = np.bincount(N_CLASSES * g + p, minlength=N_CLASSES * N_CLASSES)
    return ConfusionCounts(flat.reshape(N_CLASSES, N_CLASSES))


def iou_per_class(counts: ConfusionCounts) -> np.ndarray:
    """IoU_c = TP / (TP + FP + FN); a class absent from both sides scores 1."""
    m = counts.counts.astype(float)
    tp = np.diag(m)
    denom = m.sum(axis=0) + m.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, 1.0)
    return iou


def miou(ious) -> float:
    arr = np.asarray(ious, dtype=float)
    if arr.shape != (N_CLASSES,):
        raise ValueError("expected one IoU per class")
    return float(arr.mean())


@dataclass
class MetricsReport:
    """Evaluation summary pooled over a set of grids (micro-averaged)."""

    iou_free: float
    iou_occupied: float
    iou_unobserved: float
    miou: float
    counts: ConfusionCounts
    n_grids: int

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, n_grids: int) -> "MetricsReport":
        ious = iou_per_class(counts)
        return cls(
            iou_free=float(ious[FREE]),
            iou_occupied=float(ious[OCCUPIED]),
            iou_unobserved=float(ious[UNOBSERVED]),
            miou=miou(ious),
            counts=counts,
            n_grids=n_grids,
        )

    def to_dict(self) -> dict:
        return {
            "iou_free": self.iou_free,
            "iou_occupied": self.iou_occupied,
            "iou_unobserved": self.iou_unobserved,
            "miou": self.miou,
            "counts": self.counts.counts.tolist(),
            "n_grids": self.n_grids,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            iou_free=float(d["iou_free"]),
            iou_occupied=float(d["iou_occupied"]),
            iou_unobserved=float(d["iou_unobserved"]),
            miou=float(d["miou"]),
            counts=ConfusionCounts(np.asarray(d["counts"], dtype=np.int64)),
            n_grids=int(d["n_grids"]),
        )


def report_from_grids(preds: list[LabelGrid], gts: list[LabelGrid]) -> MetricsReport:
    """Pool confusion counts over grid pairs and summarize."""
    if len(preds) != len(gts):
        raise ValueError("prediction/ground-truth count mismatch")
    if not preds:
        raise ValueError("nothing to evaluate")
    pooled = ConfusionCounts.zeros()
    for p, g in zip(preds, gts):
        pooled = pooled + confusion(p, g)
    return MetricsReport.from_counts(pooled, len(preds))
