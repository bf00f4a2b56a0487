"""Coordinate frames, ground-plane Gaussian regions and hull primitives.

World frame is z-up with the ground plane at z=0 (xy).  The egocentric frame
of a viewer is gravity aligned: x points along the camera heading projected
onto the ground plane, y left, z up, origin at the camera position.  A task
region is an isotropic Gaussian on the ground plane (covariance sigma^2 * I2
on xy) whose mean is a full 3D point, so the vertical offset of a region
relative to the camera is preserved through rectification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySamplesError, InvalidParameterError, InvalidPoseError

SIGMA_MIN = 0.05  # meters; floor for fitted region spread
HULL_POINTS = 16  # default circle discretization for obstacle hulls

_QUAT_TOL = 1e-6
_VERTICAL_TOL = 1e-6


@dataclass(eq=False)
class Pose:
    """World pose: position in meters, orientation as a unit quaternion (w,x,y,z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(4)


@dataclass(eq=False)
class GravityAlignedPose:
    """Pose with pitch and roll removed: position plus yaw in (-pi, pi]."""

    position: np.ndarray
    yaw: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.yaw = float(self.yaw)


@dataclass(eq=False)
class GroundGaussian:
    """Task region: 3D mean plus isotropic ground-plane standard deviation."""

    mean: np.ndarray
    sigma: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.sigma = float(self.sigma)
        if self.sigma < 0.0:
            raise InvalidParameterError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(eq=False)
class Polygon2D:
    """Ordered 2D vertices in meters, counter-clockwise when convex."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = float(np.arctan2(np.sin(a), np.cos(a)))
    if a <= -np.pi:
        a = np.pi
    return a


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w,x,y,z), body-to-world."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_euler_zyx(yaw: float, pitch: float = 0.0, roll: float = 0.0) -> np.ndarray:
    """Quaternion (w,x,y,z) for Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cy, sy = np.cos(yaw / 2), np.sin(yaw / 2)
    cp, sp = np.cos(pitch / 2), np.sin(pitch / 2)
    cr, sr = np.cos(roll / 2), np.sin(roll / 2)
    return np.array(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ]
    )


def gravity_align(pose: Pose) -> GravityAlignedPose:
    """Remove pitch and roll, keeping the ground-plane heading of the camera.

    Yaw is the heading of the body x (forward) axis projected onto the ground
    plane.  If forward is within 1e-6 of vertical the projected up axis is
    used instead.
    """
    q = pose.orientation
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > _QUAT_TOL:
        raise InvalidPoseError(f"quaternion norm {norm:.9f} is not within {_QUAT_TOL} of 1")
    rot = quat_to_matrix(q / norm)
    forward = rot[:, 0]
    if float(np.hypot(forward[0], forward[1])) < _VERTICAL_TOL:
        up = rot[:, 2]
        yaw = float(np.arctan2(up[1], up[0]))
    else:
        yaw = float(np.arctan2(forward[1], forward[0]))
    return GravityAlignedPose(pose.position.copy(), wrap_angle(yaw))


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rectify(region: GroundGaussian, viewer: GravityAlignedPose) -> GroundGaussian:
    """Express a global region in the viewer's gravity-aligned egocentric frame.

    mean_ego = Rz(-yaw) @ (mean - viewer.position).  Sigma is untouched: the
    isotropic ground-plane covariance is invariant under rotations about z.
    """
    mean_ego = _rot_z(-viewer.yaw) @ (region.mean - viewer.position)
    return GroundGaussian(mean_ego, region.sigma)


def derectify(region: GroundGaussian, viewer: GravityAlignedPose) -> GroundGaussian:
    """Inverse of :func:`rectify`: egocentric region back to the world frame."""
    mean_world = _rot_z(viewer.yaw) @ region.mean + viewer.position
    return GroundGaussian(mean_world, region.sigma)


def frechet_distance(a: GroundGaussian, b: GroundGaussian) -> float:
    """Distance between two regions in meters.

    Closed form of the Gaussian 2-Wasserstein distance

        W2^2 = ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)

    specialized to isotropic 2D covariances sigma^2 * I2 (the trace term
    collapses to 2 (sigma1 - sigma2)^2) with full 3D mean difference.
    """
    d2 = float(np.sum((a.mean - b.mean) ** 2)) + 2.0 * (a.sigma - b.sigma) ** 2
    return float(np.sqrt(d2))


def fit_task_region(positions) -> GroundGaussian:
    """Fit a region to observed positions: 3D mean, isotropic xy spread.

    sigma is the maximum-likelihood isotropic estimate pooled over both ground
    axes, sqrt(sum ||xy_i - mean_xy||^2 / (2n)), floored at SIGMA_MIN so a
    single repeated position still yields a usable region.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptySamplesError("cannot fit a task region to zero positions")
    mean = pts.mean(axis=0)
    spread = float(np.sqrt(np.sum((pts[:, :2] - mean[:2]) ** 2) / (2.0 * pts.shape[0])))
    return GroundGaussian(mean, max(spread, SIGMA_MIN))


def sigma_bound_circle(region: GroundGaussian, sigma_bound: float):
    """Ground-plane circle bounding the region at the given sigma multiple."""
    if sigma_bound <= 0.0:
        raise InvalidParameterError(f"sigma_bound must be > 0, got {sigma_bound}")
    return region.mean[:2].copy(), sigma_bound * region.sigma


def discretize_circle(center, radius: float, k: int = HULL_POINTS) -> np.ndarray:
    """k evenly spaced boundary points, counter-clockwise from angle 0."""
    if k < 3:
        raise InvalidParameterError(f"need at least 3 boundary points, got {k}")
    center = np.asarray(center, dtype=np.float64).reshape(2)
    angles = 2.0 * np.pi * np.arange(k) / k
    return center + radius * np.column_stack([np.cos(angles), np.sin(angles)])


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> Polygon2D:
    """Convex hull via the monotone chain, counter-clockwise.

    Collinear points interior to a hull edge are dropped.  Degenerate inputs
    stay degenerate: one distinct point gives a 1-vertex polygon, collinear
    input gives the 2-vertex extreme segment.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise EmptySamplesError("convex hull of an empty point set")
    pts = np.unique(pts, axis=0)  # lexicographic sort + exact dedup
    if pts.shape[0] == 1:
        return Polygon2D(pts)
    lower = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 2:  # every point collinear: keep the two extremes
        hull = [pts[0], pts[-1]]
    return Polygon2D(np.array(hull))


def contains_point(polygon: Polygon2D, point, tol: float = 1e-12) -> bool:
    """Whether a point lies inside or on a convex CCW polygon (tol slack)."""
    v = polygon.vertices
    p = np.asarray(point, dtype=np.float64).reshape(2)
    if v.shape[0] == 1:
        return bool(np.linalg.norm(p - v[0]) <= tol)
    if v.shape[0] == 2:
        d = v[1] - v[0]
        t = float(np.dot(p - v[0], d) / max(np.dot(d, d), tol))
        t = min(max(t, 0.0), 1.0)
        return bool(np.linalg.norm(p - (v[0] + t * d)) <= tol)
    for i in range(v.shape[0]):
        if _cross(v[i], v[(i + 1) % v.shape[0]], p) < -tol:
            return False
    return True
