"""Occupancy grid mapping from sparse automotive radar.

Three ways to turn clustered radar detections into Free / Occupied /
Unobserved bird's-eye grids: classic Bayesian log-odds filtering with
inverse sensor models, direct visibility labeling of the temporally
aggregated input, and a small from-scratch convolutional segmentation
network trained against lidar-derived labels.
"""

from .grid import (
    FREE,
    IGNORE,
    OCCUPIED,
    UNOBSERVED,
    Cell,
    GridSpec,
    LabelGrid,
    Pose2,
    cell_center,
    compose,
    invert,
    traverse_ray,
    visibility_label,
    world_to_cell,
)

__version__ = "0.1.0"

__all__ = [
    "FREE",
    "OCCUPIED",
    "UNOBSERVED",
    "IGNORE",
    "Cell",
    "GridSpec",
    "LabelGrid",
    "Pose2",
    "cell_center",
    "compose",
    "invert",
    "traverse_ray",
    "visibility_label",
    "world_to_cell",
    "__version__",
]
