"""Surrogate-IoU training loss (Lovasz extension of the Jaccard index)
and a weighted cross entropy baseline, with analytic gradients.

Both losses operate on per-cell class probabilities and skip ignore
cells entirely. Gradients are returned with respect to the
probabilities; the network chains them through its softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import IGNORE, GridSpec, LabelGrid
from .metrics import N_CLASSES

PROB_FLOOR = 1e-12


class UndefinedLossError(ValueError):
    """Raised when a loss is requested over zero scoreable cells."""


@dataclass(eq=False)
class ProbMap:
    """Per-cell class probabilities, shape (h, w, 3), rows sum to 1."""

    spec: GridSpec
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (*self.spec.shape, N_CLASSES):
            raise ValueError("probability map shape mismatch")
        if self.probs.min() < -1e-9 or self.probs.max() > 1.0 + 1e-9:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(self.probs.sum(axis=-1) - 1.0).max() > 1e-6:
            raise ValueError("probabilities must sum to 1 per cell")


def jaccard_grad(gt_sorted) -> np.ndarray:
    """Gradient vector of the Jaccard extension for a sorted error vector.

    gt_sorted is the 0/1 foreground indicator permuted into descending
    error order. With no foreground at all the gradient is zero.
    """
    g = np.asarray(gt_sorted, dtype=float).ravel()
    p = g.sum()
    if p == 0:
        return np.zeros_like(g)
    intersection = p - np.cumsum(g)
    union = p + np.cumsum(1.0 - g)
    jac = 1.0 - intersection / union
    return np.diff(jac, prepend=0.0)


def _flatten(probs: ProbMap, gt: LabelGrid):
    if probs.spec != gt.spec:
        raise ValueError("probability/label grid spec mismatch")
    keep = (gt.cells != IGNORE).ravel()
    p = probs.probs.reshape(-1, N_CLASSES)[keep]
    y = gt.cells.ravel()[keep].astype(np.int64)
    if len(y) == 0:
        raise UndefinedLossError("all cells are ignore; loss undefined")
    return p, y, keep


def _lovasz_flat(p: np.ndarray, y: np.ndarray):
    """Loss, per-class losses, presence mask and gradient on flat pixels."""
    n = len(y)
    grad = np.zeros_like(p)
    losses = np.zeros(N_CLASSES)
    present = np.zeros(N_CLASSES, dtype=bool)
    for c in range(N_CLASSES):
        fg = y == c
        if not fg.any():
            continue
        present[c] = True
        errors = np.where(fg, 1.0 - p[:, c], p[:, c])
        order = np.argsort(-errors, kind="stable")  # descending, ties by pixel index
        g = jaccard_grad(fg[order])
        losses[c] = float(errors[order] @ g)
        g_unsorted = np.empty(n)
        g_unsorted[order] = g
        grad[:, c] = np.where(fg, -g_unsorted, g_unsorted)
    n_present = int(present.sum())
    loss = float(losses[present].mean())
    grad /= n_present
    return loss, losses, present, grad


def lovasz_softmax(probs: ProbMap, gt: LabelGrid) -> tuple[float, np.ndarray]:
    """Mean over present classes of the Lovasz-extended Jaccard loss.

    Per class, errors are sorted descending (stable, ties by pixel
    index) and dotted with the Jaccard gradient of the sorted foreground
    indicator. The returned gradient treats the sort permutation and the
    Jaccard gradient as constants, which is exact wherever the
    permutation is locally stable.
    """
    p, y, keep = _flatten(probs, gt)
    loss, _, _, flat_grad = _lovasz_flat(p, y)
    grad = np.zeros((probs.spec.h * probs.spec.w, N_CLASSES))
    grad[keep] = flat_grad
    return loss, grad.reshape(probs.probs.shape)


def lovasz_per_class(probs: ProbMap, gt: LabelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-class Lovasz losses and the class-presence mask."""
    p, y, _ = _flatten(probs, gt)
    _, losses, present, _ = _lovasz_flat(p, y)
    return losses, present


def weighted_cross_entropy(
    probs: ProbMap, gt: LabelGrid, class_weights=(1.0, 1.0, 1.0)
) -> tuple[float, np.ndarray]:
    """Mean over cells of -w[gt] * ln p[gt], with a 1e-12 probability floor."""
    w = np.asarray(class_weights, dtype=float)
    if w.shape != (N_CLASSES,):
        raise ValueError("expected one weight per class")
    p, y, keep = _flatten(probs, gt)
    n = len(y)
    pg = p[np.arange(n), y]
    floored = np.maximum(pg, PROB_FLOOR)
    loss = float(np.mean(w[y] * -np.log(floored)))
    flat_grad = np.zeros_like(p)
    live = pg > PROB_FLOOR  # below the floor the loss is locally constant
    flat_grad[np.arange(n)[live], y[live]] = -w[y[live]] / (floored[live] * n)
    grad = np.zeros((probs.spec.h * probs.spec.w, N_CLASSES))
    grad[keep] = flat_grad
    return loss, grad.reshape(probs.probs.shape)
