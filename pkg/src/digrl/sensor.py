"""Top-down depth sensing of a scene: surface rays, crop, downsample, labels.

The sensor is an orthographic ray grid looking straight down at the tray.
Each ray keeps the highest surface it meets (an object's top envelope or the
tray floor), so occlusion falls out of a per-cell max and no returned point
can sit under another body's top surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyObservationError, ShapeError
from .geometry import HeightMap, PointCloud, estimate_normals_curvature, fps
from .scenegen import Scene, vertical_envelopes

DEFAULT_RAY_PITCH = 0.005  # m; ~16k rays over the default tray footprint
STEEP_NZ = 0.35      # below this the upward-flip convention stops pinning the sign
_SIDE_OFFSET = 0.02  # m; distance to each side of a steep face when comparing ground
_SIDE_RADIUS = 0.015  # m; disk radius for the side height samples


@dataclass
class SensorConfig:
    ray_pitch: float = DEFAULT_RAY_PITCH
    noise_sigma: float = 0.0  # stddev of additive z noise, metres
    fps_target: int = 7000
    crop_x: tuple[float, float] = (-0.37, 0.29)
    crop_y: tuple[float, float] = (-0.20, 0.20)


@dataclass
class ObservationCloud:
    """Sensor output: points in the tray frame plus ground-truth metadata."""

    cloud: PointCloud
    object_count: int | None = None

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    def __len__(self) -> int:
        return len(self.cloud)


def _surface_grid(scene: Scene, cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ray-grid axes and per-cell surface heights over the tray floor."""
    if cfg.ray_pitch <= 0:
        raise ShapeError("ray pitch must be positive")
    tray = scene.tray
    (x0, x1), (y0, y1) = tray.x_range, tray.y_range
    nx = max(1, int(round((x1 - x0) / cfg.ray_pitch)))
    ny = max(1, int(round((y1 - y0) / cfg.ray_pitch)))
    xs = x0 + (np.arange(nx) + 0.5) * cfg.ray_pitch
    ys = y0 + (np.arange(ny) + 0.5) * cfg.ray_pitch
    heights = np.full((nx, ny), tray.floor_z, dtype=np.float64)
    for placed in scene.placed:
        wverts = placed.world_vertices()
        normals, offsets = placed.world_planes()
        lo, hi = wverts.min(axis=0), wverts.max(axis=0)
        i0 = max(0, int(np.floor((lo[0] - x0) / cfg.ray_pitch - 0.5)))
        i1 = min(nx - 1, int(np.ceil((hi[0] - x0) / cfg.ray_pitch)))
        j0 = max(0, int(np.floor((lo[1] - y0) / cfg.ray_pitch - 0.5)))
        j1 = min(ny - 1, int(np.ceil((hi[1] - y0) / cfg.ray_pitch)))
        if i1 < i0 or j1 < j0:
            continue
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        ii, jj = ii.reshape(-1), jj.reshape(-1)
        cols = np.stack([xs[ii], ys[jj]], axis=1)
        _, z_high, feasible = vertical_envelopes(normals, offsets, cols)
        sel = feasible & (z_high > heights[ii, jj])
        heights[ii[sel], jj[sel]] = z_high[sel]
    return xs, ys, heights


def scene_heightmap(scene: Scene, cfg: SensorConfig) -> HeightMap:
    """Noise-free surface heights of the whole tray as a grid."""
    xs, ys, heights = _surface_grid(scene, cfg)
    return HeightMap(
        origin=np.array([xs[0] - 0.5 * cfg.ray_pitch, ys[0] - 0.5 * cfg.ray_pitch]),
        resolution=cfg.ray_pitch,
        heights=heights,
        occupied=np.ones(heights.shape, dtype=bool),
    )


def render_surface(scene: Scene, cfg: SensorConfig, rng: np.random.Generator | None = None) -> PointCloud:
    """Cast the full ray grid over the tray floor and return one point per ray."""
    xs, ys, heights = _surface_grid(scene, cfg)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1), heights.reshape(-1)], axis=1)
    if cfg.noise_sigma > 0.0:
        if rng is None:
            raise ShapeError("noisy sensing needs an rng")
        pts = pts.copy()
        pts[:, 2] += rng.normal(0.0, cfg.noise_sigma, size=len(pts))
    return PointCloud(pts)


def observe(
    scene: Scene, cfg: SensorConfig, rng: np.random.Generator | None = None
) -> ObservationCloud:
    """Render, crop to the excavation range, and downsample to the FPS target.

    Clouds already at or below the target size pass through unsampled. The
    scene's true object count rides along as supervision metadata; policies
    must only consume the points.
    """
    surface = render_surface(scene, cfg, rng)
    pts = surface.points
    keep = (
        (pts[:, 0] >= cfg.crop_x[0])
        & (pts[:, 0] <= cfg.crop_x[1])
        & (pts[:, 1] >= cfg.crop_y[0])
        & (pts[:, 1] <= cfg.crop_y[1])
    )
    cropped = pts[keep]
    if len(cropped) == 0:
        raise EmptyObservationError("sensor crop produced zero points")
    if len(cropped) > cfg.fps_target:
        cropped = cropped[fps(cropped, cfg.fps_target)]
    return ObservationCloud(PointCloud(cropped), object_count=scene.object_count)


def _orient_steep_downhill(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Flip near-vertical normals so they face the lower side of their wall.

    The upward flip that fixes normal signs elsewhere is numerical noise on a
    wall: two neighbouring points of one face can come out pointing opposite
    ways, which turns any regression against these labels into a coin toss.
    For those points the informative sign is horizontal, and the material of
    a face always looks out over lower ground, so compare the observed
    surface height a short step to either side and point at the lower one.
    """
    nz = normals[:, 2]
    horiz = np.hypot(normals[:, 0], normals[:, 1])
    steep = np.flatnonzero((np.abs(nz) < STEEP_NZ) & (horiz > 1e-12))
    if len(steep) == 0:
        return normals
    xy = points[:, :2]
    z = points[:, 2]
    tree = cKDTree(xy)
    d = normals[steep, :2] / horiz[steep, None]
    ahead = tree.query_ball_point(xy[steep] + _SIDE_OFFSET * d, _SIDE_RADIUS)
    behind = tree.query_ball_point(xy[steep] - _SIDE_OFFSET * d, _SIDE_RADIUS)
    out = normals.copy()
    for row, (ia, ib) in enumerate(zip(ahead, behind)):
        if ia and ib and z[ia].mean() > z[ib].mean() + 1e-9:
            out[steep[row]] = -out[steep[row]]
    return out


def label_observation(obs: ObservationCloud, k: int = 30) -> ObservationCloud:
    """Attach PCA normal and curvature labels computed on the observed cloud.

    Normals come out of the estimator facing up; near-vertical ones are then
    re-oriented to face downhill so labels stay consistent along walls.
    """
    normals, curvature, _ = estimate_normals_curvature(obs.cloud.points, k)
    normals = _orient_steep_downhill(obs.cloud.points, normals)
    return ObservationCloud(
        PointCloud(obs.cloud.points, normals, curvature), object_count=obs.object_count
    )
