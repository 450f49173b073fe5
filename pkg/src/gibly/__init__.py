"""Learnable geometric kernels for point clouds.

A layer scores each point's multi-scale neighbourhood against parametric
shapes (cylinders, cones, disks, ellipsoids and their hollow variants), mixes
the scores into composite features and projects them next to the input
features. Everything has exact analytic gradients.
"""

from ._accel import backend, set_backend, set_workers, workers
from .composite import CompositeWeights, RegularizerConfig, composite_scores, regularizer
from .errors import GiblyError
from .geometry import CanonicalOffset, RotationAngles, canonical_offset, rotation_matrix
from .kernels import GibGrad, GibKind, GibParams, eval_gib, eval_gib_grad
from .layer import GiblyConfig, GiblyLayer
from .neighborhood import (
    NeighborhoodIndex, PointCloud, ScaleSchedule, build_index, farthest_point_sample,
    multi_scale_neighborhoods, radius_neighbors,
)
from .normalization import McSampleSet, make_mc_samples, normalized_eval

__version__ = "0.1.0"

__all__ = [
    "backend", "set_backend", "set_workers", "workers",
    "CompositeWeights", "RegularizerConfig", "composite_scores", "regularizer",
    "GiblyError",
    "CanonicalOffset", "RotationAngles", "canonical_offset", "rotation_matrix",
    "GibGrad", "GibKind", "GibParams", "eval_gib", "eval_gib_grad",
    "GiblyConfig", "GiblyLayer",
    "NeighborhoodIndex", "PointCloud", "ScaleSchedule", "build_index",
    "farthest_point_sample", "multi_scale_neighborhoods", "radius_neighbors",
    "McSampleSet", "make_mc_samples", "normalized_eval",
]
