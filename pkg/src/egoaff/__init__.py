"""Spatial task affordances from localized egocentric video.

Predicts the ground-plane region where a person stands to perform a
natural-language task, relative to a single egocentric viewpoint, and derives
task obstacles and navigation goals from those predictions.
"""

__version__ = "0.1.0"

from .geometry import (GravityAlignedPose, GroundGaussian, Polygon2D, Pose,  # noqa: F401
                       convex_hull, derectify, fit_task_region, frechet_distance,
                       gravity_align, rectify)
