"""Task obstacles and occupancy-grid path planning.

A task obstacle bounds a set of predicted task regions: each region becomes a
sigma_bound circle, circles are discretized, and the convex hull of all the
boundary points covers both the regions and the space between them.  Paths
are planned on a plain occupancy grid with 8-connected A*; diagonal moves are
forbidden when either adjacent cardinal cell is occupied, so paths never cut
corners.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import ConfigError, InvalidEndpointError
from .geometry import GroundGaussian, Polygon2D

SIGMA_BOUND_DEFAULT = 2.0  # covers ~86% of the planar Gaussian mass
SQRT2 = float(np.sqrt(2.0))


@dataclass(eq=False)
class TaskObstacle:
    hull: Polygon2D
    task_ids: list[str]
    sigma_bound: float


@dataclass(eq=False)
class NavGrid:
    """Ground-plane occupancy grid; occupancy[iy, ix], cell centers at
    origin + (ix + 0.5, iy + 0.5) * resolution."""

    origin: np.ndarray
    resolution: float
    occupancy: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(2)
        self.resolution = float(self.resolution)
        if self.resolution <= 0.0:
            raise ConfigError(f"grid resolution must be positive, got {self.resolution}")
        self.occupancy = np.asarray(self.occupancy, dtype=bool)

    @classmethod
    def empty(cls, origin, size_xy, resolution: float = 0.05) -> "NavGrid":
        nx = int(np.ceil(size_xy[0] / resolution))
        ny = int(np.ceil(size_xy[1] / resolution))
        return cls(origin, resolution, np.zeros((ny, nx), dtype=bool))

    def cell_of(self, point) -> tuple[int, int]:
        p = (np.asarray(point, dtype=np.float64) - self.origin) / self.resolution
        return int(np.floor(p[1])), int(np.floor(p[0]))

    def center_of(self, iy: int, ix: int) -> np.ndarray:
        return self.origin + (np.array([ix, iy]) + 0.5) * self.resolution

    def in_bounds(self, iy: int, ix: int) -> bool:
        return 0 <= iy < self.occupancy.shape[0] and 0 <= ix < self.occupancy.shape[1]


def predicted_regions(predict_fn, task_queries: list[str]) -> list[GroundGaussian]:
    return [predict_fn(q) for q in task_queries]


def task_obstacle(predict_fn, task_queries: list[str],
                  sigma_bound: float = SIGMA_BOUND_DEFAULT,
                  k: int = geometry.HULL_POINTS) -> TaskObstacle:
    """Convex hull over the sigma-bounded, discretized regions of a task set.

    predict_fn maps one query phrase to a GroundGaussian for the current
    image (the caller binds the image and the model).
    """
    if not task_queries:
        raise ConfigError("task obstacle needs a nonempty task set")
    points = []
    for region in predicted_regions(predict_fn, task_queries):
        center, radius = geometry.sigma_bound_circle(region, sigma_bound)
        points.append(geometry.discretize_circle(center, radius, k))
    hull = geometry.convex_hull(np.vstack(points))
    return TaskObstacle(hull, list(task_queries), sigma_bound)


def rasterize_obstacle(obstacle: TaskObstacle, grid: NavGrid) -> NavGrid:
    """Mark cells whose centers lie inside the hull; returns an updated copy."""
    occ = grid.occupancy.copy()
    verts = obstacle.hull.vertices
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    iy0, ix0 = grid.cell_of(lo)
    iy1, ix1 = grid.cell_of(hi)
    for iy in range(max(iy0, 0), min(iy1 + 1, occ.shape[0])):
        for ix in range(max(ix0, 0), min(ix1 + 1, occ.shape[1])):
            if geometry.contains_point(obstacle.hull, grid.center_of(iy, ix), tol=1e-12):
                occ[iy, ix] = True
    return NavGrid(grid.origin.copy(), grid.resolution, occ)


def _octile(dy: int, dx: int) -> float:
    dy, dx = abs(dy), abs(dx)
    return max(dy, dx) + (SQRT2 - 1.0) * min(dy, dx)


_MOVES = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
          (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2)]


def grid_neighbors(occ: np.ndarray, iy: int, ix: int):
    """Free 8-connected neighbors; diagonals blocked next to occupied cardinals."""
    ny, nx = occ.shape
    for dy, dx, cost in _MOVES:
        jy, jx = iy + dy, ix + dx
        if not (0 <= jy < ny and 0 <= jx < nx) or occ[jy, jx]:
            continue
        if dy != 0 and dx != 0 and (occ[iy + dy, ix] or occ[iy, ix + dx]):
            continue
        yield jy, jx, cost


def plan_path(grid: NavGrid, start, goal) -> np.ndarray | None:
    """8-connected A* from start to goal (world meters).

    Returns cell-center waypoints including both endpoints, or None when no
    route exists.  Expansion order is made deterministic by breaking ties on
    (f, h, row, col).
    """
    s = grid.cell_of(start)
    g = grid.cell_of(goal)
    for name, (iy, ix) in (("start", s), ("goal", g)):
        if not grid.in_bounds(iy, ix):
            raise InvalidEndpointError(f"{name} cell {(iy, ix)} is outside the grid")
        if grid.occupancy[iy, ix]:
            raise InvalidEndpointError(f"{name} cell {(iy, ix)} is occupied")
    occ = grid.occupancy
    best_g = {s: 0.0}
    came: dict[tuple[int, int], tuple[int, int]] = {}
    h0 = _octile(s[0] - g[0], s[1] - g[1])
    frontier = [(h0, h0, s[0], s[1])]
    closed: set[tuple[int, int]] = set()
    while frontier:
        f, h, iy, ix = heapq.heappop(frontier)
        node = (iy, ix)
        if node in closed:
            continue
        closed.add(node)
        if node == g:
            cells = [node]
            while cells[-1] != s:
                cells.append(came[cells[-1]])
            cells.reverse()
            return np.array([grid.center_of(cy, cx) for cy, cx in cells])
        for jy, jx, cost in grid_neighbors(occ, iy, ix):
            cand = best_g[node] + cost
            if cand < best_g.get((jy, jx), np.inf) - 1e-12:
                best_g[(jy, jx)] = cand
                came[(jy, jx)] = node
                hh = _octile(jy - g[0], jx - g[1])
                heapq.heappush(frontier, (cand + hh, hh, jy, jx))
    return None


def path_cost(path_cells_or_points: np.ndarray, resolution: float | None = None) -> float:
    """Total length of a waypoint path in meters (or cells if resolution None)."""
    p = np.asarray(path_cells_or_points, dtype=np.float64)
    if p.shape[0] < 2:
        return 0.0
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    total = float(steps.sum())
    return total if resolution is None else total / resolution
