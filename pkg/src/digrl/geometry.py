"""Point-cloud primitives: sampling, neighbor queries, PCA surface labels, heightmaps.

All queries are exact (vectorized brute force, chunked to bound memory); at the
cloud sizes this package works with that is both simpler and faster than an
acceleration structure, and ties stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyObservationError, ShapeError, SizeError

CURVATURE_MAX = 1.0 / 3.0

# Rows per pairwise-distance block; 512 x 20k float64 stays under ~100 MB.
_CHUNK = 512


@dataclass
class PointCloud:
    """Unordered 3D points with optional per-point surface labels.

    ``normals`` rows are unit length (within 1e-6) and oriented toward +z;
    ``curvature`` is the surface-variation ratio, bounded by 1/3 for any
    neighborhood. Either label may be absent.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    curvature: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"points must be (N, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ShapeError("points contain non-finite values")
        n = len(self.points)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ShapeError(f"normals must be ({n}, 3), got {self.normals.shape}")
            norms = np.linalg.norm(self.normals, axis=1)
            if n and not np.all(np.abs(norms - 1.0) <= 1e-6):
                raise ShapeError("normals must be unit length within 1e-6")
        if self.curvature is not None:
            self.curvature = np.asarray(self.curvature, dtype=np.float64)
            if self.curvature.shape != (n,):
                raise ShapeError(f"curvature must be ({n},), got {self.curvature.shape}")
            if n and (self.curvature.min() < -1e-12 or self.curvature.max() > CURVATURE_MAX + 1e-9):
                raise ShapeError("curvature out of [0, 1/3] range")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class HeightMap:
    """Regular x/y grid of surface heights.

    ``heights[i, j]`` covers the cell with x index ``i`` and y index ``j``;
    flat row-major order therefore scans x first, then y. ``occupied`` marks
    cells whose height came from actual points; unoccupied cells are filled
    from their nearest occupied cell.
    """

    origin: np.ndarray  # (2,) lower corner (x_min, y_min)
    resolution: float
    heights: np.ndarray  # (nx, ny)
    occupied: np.ndarray  # (nx, ny) bool

    def cell_center(self, i: int, j: int) -> np.ndarray:
        return self.origin + (np.array([i, j], dtype=np.float64) + 0.5) * self.resolution

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        i = int(np.floor((x - self.origin[0]) / self.resolution))
        j = int(np.floor((y - self.origin[1]) / self.resolution))
        nx, ny = self.heights.shape
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)

    def height_at(self, x: float, y: float) -> float:
        i, j = self.cell_of(x, y)
        return float(self.heights[i, j])


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) points, got {pts.shape}")
    return pts


def fps(cloud, n: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling: greedy max-min-distance subset of ``n`` indices.

    The first index is ``start``; each following index maximizes the minimum
    distance to everything already selected (ties go to the lowest index).
    """
    pts = _as_points(cloud)
    total = len(pts)
    if total == 0:
        raise SizeError("cannot sample from an empty cloud")
    if not 0 < n <= total:
        raise SizeError(f"requested {n} samples from a cloud of {total}")
    if not 0 <= start < total:
        raise SizeError(f"start index {start} out of range for {total} points")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        d2 = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest cloud points to ``query``, nearest first.

    Exact; distance ties break toward the lower index.
    """
    pts = _as_points(cloud)
    if len(pts) == 0:
        raise SizeError("knn on an empty cloud")
    if not 0 < k <= len(pts):
        raise SizeError(f"k={k} out of range for cloud of {len(pts)}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((pts - q) ** 2, axis=1)
    return np.argsort(d2, kind="stable")[:k]


def ball_query(cloud, center, radius: float, max_k: int) -> np.ndarray:
    """Up to ``max_k`` point indices within ``radius`` of ``center``, nearest first.

    If nothing falls inside the ball the single nearest point is returned, so
    downstream grouping never sees an empty group.
    """
    pts = _as_points(cloud)
    if len(pts) == 0:
        raise SizeError("ball_query on an empty cloud")
    if radius <= 0 or max_k <= 0:
        raise SizeError("radius and max_k must be positive")
    c = np.asarray(center, dtype=np.float64).reshape(3)
    d2 = np.sum((pts - c) ** 2, axis=1)
    order = np.argsort(d2, kind="stable")
    inside = order[d2[order] <= radius * radius]
    if len(inside) == 0:
        return order[:1]
    return inside[:max_k]


def _neighbor_indices(pts: np.ndarray, k: int) -> np.ndarray:
    """(N, k) indices of each point's k nearest neighbors (self included)."""
    n = len(pts)
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        block = pts[lo:hi]
        d2 = (
            np.sum(block**2, axis=1)[:, None]
            - 2.0 * block @ pts.T
            + np.sum(pts**2, axis=1)[None, :]
        )
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(hi - lo)[:, None]
        order = np.argsort(d2[rows, part], kind="stable", axis=1)
        out[lo:hi] = part[rows, order]
    return out


def estimate_normals_curvature(
    cloud, k: int = 30
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-point PCA surface labels from k-neighborhoods.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue, flipped so its z component is non-negative. The
    curvature is the surface variation lam0 / (lam0 + lam1 + lam2), which
    lives in [0, 1/3]. Neighborhoods that collapse to a point are flagged
    degenerate and get normal (0, 0, 1) and curvature 0.

    Returns (normals (N,3), curvature (N,), degenerate mask (N,)).
    """
    pts = _as_points(cloud)
    n = len(pts)
    if n == 0:
        raise SizeError("cannot label an empty cloud")
    if not 0 < k <= n:
        raise SizeError(f"k={k} out of range for cloud of {n}")
    idx = _neighbor_indices(pts, k)
    nbr = pts[idx]  # (N, k, 3)
    centered = nbr - nbr.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    total = evals.sum(axis=1)
    degenerate = total <= 1e-18
    normals = evecs[:, :, 0].copy()
    flip = normals[:, 2] < 0.0
    normals[flip] *= -1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        curvature = np.where(degenerate, 0.0, evals[:, 0] / np.where(degenerate, 1.0, total))
    normals[degenerate] = (0.0, 0.0, 1.0)
    curvature = np.clip(curvature, 0.0, CURVATURE_MAX)
    return normals, curvature, degenerate


def idw_weights(src_points, dst_points, k: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-squared-distance interpolation stencil from src onto dst points.

    Returns (idx (D,k), weights (D,k)); weights per row sum to 1. A dst point
    coinciding with a source point copies that source exactly (weight 1).
    """
    src = _as_points(src_points)
    dst = _as_points(dst_points)
    if len(src) == 0:
        raise SizeError("interpolation needs at least one source point")
    if not 0 < k <= len(src):
        raise SizeError(f"k={k} out of range for {len(src)} source points")
    idx = np.empty((len(dst), k), dtype=np.int64)
    weights = np.empty((len(dst), k), dtype=np.float64)
    for lo in range(0, len(dst), _CHUNK):
        hi = min(lo + _CHUNK, len(dst))
        block = dst[lo:hi]
        # Difference form, not the expanded quadratic: coordinate differences
        # cancel any common translation exactly, which keeps interpolation
        # stencils (and everything downstream) bitwise translation invariant.
        d2 = np.sum((block[:, None, :] - src[None, :, :]) ** 2, axis=2)
        if k < len(src):
            part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        else:
            part = np.tile(np.arange(len(src)), (hi - lo, 1))
        rows = np.arange(hi - lo)[:, None]
        order = np.argsort(d2[rows, part], kind="stable", axis=1)
        nearest = part[rows, order]
        nd2 = d2[rows, nearest]
        exact = nd2[:, 0] == 0.0
        with np.errstate(divide="ignore"):
            w = 1.0 / nd2
        w[exact] = 0.0
        w[exact, 0] = 1.0
        w /= w.sum(axis=1, keepdims=True)
        idx[lo:hi] = nearest
        weights[lo:hi] = w
    return idx, weights


def idw_interpolate(src_points, src_features, dst_points, k: int = 3) -> np.ndarray:
    """Interpolate per-point features from src onto dst by inverse squared distance."""
    feats = np.asarray(src_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(feats) != len(_as_points(src_points)):
        raise SizeError("one feature row per source point required")
    idx, w = idw_weights(src_points, dst_points, k)
    return np.einsum("dk,dkf->df", w, feats[idx])


def to_heightmap(cloud, bounds, resolution: float) -> HeightMap:
    """Rasterize a cloud into a max-z heightmap over ``bounds``.

    ``bounds`` is (x_min, x_max, y_min, y_max). Each occupied cell keeps the
    max z of its points; unoccupied cells copy their nearest occupied cell and
    stay flagged via ``occupied``. A cloud entirely outside the bounds yields
    an all-unoccupied map with zero heights.
    """
    pts = _as_points(cloud)
    x_min, x_max, y_min, y_max = (float(v) for v in bounds)
    if not (x_max > x_min and y_max > y_min):
        raise ShapeError("bounds must span a positive area")
    if resolution <= 0:
        raise ShapeError("resolution must be positive")
    nx = max(1, int(np.ceil((x_max - x_min) / resolution)))
    ny = max(1, int(np.ceil((y_max - y_min) / resolution)))
    heights = np.zeros((nx, ny), dtype=np.float64)
    occupied = np.zeros((nx, ny), dtype=bool)
    if len(pts):
        keep = (
            (pts[:, 0] >= x_min)
            & (pts[:, 0] <= x_max)
            & (pts[:, 1] >= y_min)
            & (pts[:, 1] <= y_max)
        )
        inside = pts[keep]
        if len(inside):
            i = np.clip(((inside[:, 0] - x_min) / resolution).astype(np.int64), 0, nx - 1)
            j = np.clip(((inside[:, 1] - y_min) / resolution).astype(np.int64), 0, ny - 1)
            filler = np.full((nx, ny), -np.inf)
            np.maximum.at(filler, (i, j), inside[:, 2])
            occupied = filler > -np.inf
            heights = np.where(occupied, filler, 0.0)
    if occupied.any() and not occupied.all():
        _, (ii, jj) = ndimage.distance_transform_edt(~occupied, return_indices=True)
        heights = heights[ii, jj]
    return HeightMap(
        origin=np.array([x_min, y_min]), resolution=float(resolution),
        heights=heights, occupied=occupied,
    )


def save_xyzl(path, cloud: PointCloud) -> None:
    """Write a cloud as text: ``x y z`` or ``x y z nx ny nz c`` per line."""
    labeled = cloud.normals is not None and cloud.curvature is not None
    with open(path, "w") as fh:
        fh.write("# digrl point cloud, %d points, %s\n" % (len(cloud), "labeled" if labeled else "bare"))
        if labeled:
            for p, nrm, c in zip(cloud.points, cloud.normals, cloud.curvature):
                fh.write(
                    "%.9g %.9g %.9g %.9g %.9g %.9g %.9g\n"
                    % (p[0], p[1], p[2], nrm[0], nrm[1], nrm[2], c)
                )
        else:
            for p in cloud.points:
                fh.write("%.9g %.9g %.9g\n" % (p[0], p[1], p[2]))


def load_xyzl(path) -> PointCloud:
    """Read a cloud written by :func:`save_xyzl`.

    Lines may carry 3 fields (bare point) or 7 (point + normal + curvature);
    ``#`` starts a comment. Labels survive only when every line carries them.
    """
    points, normals, curvature = [], [], []
    all_labeled = True
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) == 3:
                all_labeled = False
            elif len(parts) == 7:
                normals.append([float(v) for v in parts[3:6]])
                curvature.append(float(parts[6]))
            else:
                raise ShapeError(f"{path}:{lineno}: expected 3 or 7 fields, got {len(parts)}")
            points.append([float(v) for v in parts[:3]])
    if not points:
        raise EmptyObservationError(f"{path} holds no points")
    pts = np.asarray(points, dtype=np.float64)
    if all_labeled and normals:
        nrm = np.asarray(normals)
        # Renormalize against text round-off so the unit invariant holds exactly.
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm, np.clip(np.asarray(curvature), 0.0, CURVATURE_MAX))
    return PointCloud(pts)
