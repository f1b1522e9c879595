"""Synthetic cluttered scenes: convex rigid objects dropped into a tray.

Settling is quasi-static drop-and-rest without rotation on contact: each
object falls straight down, in placement order, onto the tray floor or onto
whatever already lies there, with a declared interpenetration tolerance of
2 mm. Rest heights are exact: the vertical clearance between convex hulls is
minimized over projected vertices of both bodies and crossings of projected
edges, which together contain the true contact column.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    DegenerateGeometryError,
    PlacementError,
    ShapeError,
    SizeError,
    TopologyError,
)

DEFAULT_DENSITY = 2700.0  # kg/m^3
VERTEX_RADIUS_RANGE = (0.01, 0.07)  # m, sampled distance of hull seeds from the centroid
VERTEX_COUNT_RANGE = (8, 24)  # inclusive
INTERPENETRATION_TOL = 0.002  # m, declared settling tolerance
PLACEMENT_RETRIES = 50


# ---------------------------------------------------------------------------
# Rotations


def quat_from_euler(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
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


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# Convex meshes


def convex_hull(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Watertight convex triangle mesh (vertices, faces) of a point set.

    Faces are index triples into the returned vertex array, wound so their
    normals point outward. Coplanar or degenerate input raises.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"hull input must be (N, 3), got {pts.shape}")
    if len(pts) < 4:
        raise DegenerateGeometryError(f"hull needs at least 4 points, got {len(pts)}")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateGeometryError(f"degenerate hull input: {exc}") from exc
    remap = np.full(len(pts), -1, dtype=np.int64)
    remap[hull.vertices] = np.arange(len(hull.vertices))
    verts = pts[hull.vertices]
    faces = remap[hull.simplices]
    # Qhull does not guarantee consistent winding; fix it against the outward
    # plane normals it reports.
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    cross = np.cross(v1 - v0, v2 - v0)
    flip = np.einsum("ij,ij->i", cross, hull.equations[:, :3]) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return verts, faces


def _check_watertight(faces: np.ndarray) -> None:
    edges = {}
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges[(a, b)] = edges.get((a, b), 0) + 1
    for (a, b), count in edges.items():
        if count != 1 or edges.get((b, a), 0) != 1:
            raise TopologyError(f"mesh is not watertight at edge ({a}, {b})")


def polytope_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    """Volume of a watertight, outward-wound triangle mesh via signed tetrahedra."""
    verts = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ShapeError(f"faces must be (F, 3), got {faces.shape}")
    _check_watertight(faces)
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    vol = float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)
    if vol <= 0:
        raise DegenerateGeometryError(f"non-positive mesh volume {vol}")
    return vol


def face_planes(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outward unit normals and offsets so that inside points satisfy n.p <= d."""
    v0 = vertices[faces[:, 0]]
    n = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    lengths = np.linalg.norm(n, axis=1, keepdims=True)
    if (lengths <= 1e-16).any():
        raise DegenerateGeometryError("zero-area face")
    n = n / lengths
    return n, np.einsum("ij,ij->i", n, v0)


def vertical_envelopes(
    normals: np.ndarray, offsets: np.ndarray, xy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersection of vertical lines with a convex polytope given as planes.

    For each (x, y) column returns (z_low, z_high, feasible); infeasible
    columns miss the body entirely.
    """
    xy = np.asarray(xy, dtype=np.float64)
    c = offsets[None, :] - xy[:, 0:1] * normals[None, :, 0] - xy[:, 1:2] * normals[None, :, 1]
    nz = normals[:, 2]
    up = nz > 1e-12
    down = nz < -1e-12
    vert = ~(up | down)
    z_high = np.full(len(xy), np.inf)
    z_low = np.full(len(xy), -np.inf)
    if up.any():
        z_high = (c[:, up] / nz[up]).min(axis=1)
    if down.any():
        z_low = (c[:, down] / nz[down]).max(axis=1)
    feasible = z_low <= z_high + 1e-9
    if vert.any():
        feasible &= (c[:, vert] >= -1e-9).all(axis=1)
    return z_low, z_high, feasible


# ---------------------------------------------------------------------------
# Objects, tray, scene


@dataclass
class RigidObject:
    """A convex rigid body in its own frame.

    The body frame is centered on the generation centroid (the point hull
    seeds were sampled around), so every vertex lies within the sampling
    radius of the origin. ``centroid`` records that origin.
    """

    vertices: np.ndarray
    faces: np.ndarray
    volume: float
    density: float = DEFAULT_DENSITY
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.volume <= 0:
            raise DegenerateGeometryError(f"object volume must be positive, got {self.volume}")

    @property
    def mass(self) -> float:
        return self.volume * self.density


def gen_object(rng: np.random.Generator, density: float = DEFAULT_DENSITY) -> RigidObject:
    """Sample one convex object: hull of 8..24 points at radii 1..7 cm."""
    lo, hi = VERTEX_COUNT_RANGE
    r_lo, r_hi = VERTEX_RADIUS_RANGE
    for _ in range(64):
        n = int(rng.integers(lo, hi + 1))
        dirs = rng.normal(size=(n, 3))
        lens = np.linalg.norm(dirs, axis=1, keepdims=True)
        if (lens < 1e-12).any():
            continue
        seeds = dirs / lens * rng.uniform(r_lo, r_hi, size=(n, 1))
        try:
            verts, faces = convex_hull(seeds)
            vol = polytope_volume(verts, faces)
        except DegenerateGeometryError:
            continue
        return RigidObject(verts, faces, vol, density)
    raise DegenerateGeometryError("could not sample a non-degenerate hull")


@dataclass
class Tray:
    """Open-top rectangular tray; the world frame sits at the floor center."""

    inner_length: float = 0.80  # x extent of the floor
    inner_width: float = 0.50  # y extent of the floor
    wall_height: float = 0.10
    wall_thickness: float = 0.02
    floor_z: float = 0.0

    @property
    def x_range(self) -> tuple[float, float]:
        return (-self.inner_length / 2.0, self.inner_length / 2.0)

    @property
    def y_range(self) -> tuple[float, float]:
        return (-self.inner_width / 2.0, self.inner_width / 2.0)

    def wall_boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Axis-aligned (center, half_extents) boxes for the 4 walls."""
        hx, hy = self.inner_length / 2.0, self.inner_width / 2.0
        t, h = self.wall_thickness, self.wall_height
        zc = self.floor_z + h / 2.0
        return [
            (np.array([-(hx + t / 2), 0.0, zc]), np.array([t / 2, hy + t, h / 2])),
            (np.array([hx + t / 2, 0.0, zc]), np.array([t / 2, hy + t, h / 2])),
            (np.array([0.0, -(hy + t / 2), zc]), np.array([hx + t, t / 2, h / 2])),
            (np.array([0.0, hy + t / 2, zc]), np.array([hx + t, t / 2, h / 2])),
        ]

    def wall_and_floor_boxes(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Wall boxes plus the floor modeled as a thick slab below floor_z."""
        hx, hy = self.inner_length / 2.0, self.inner_width / 2.0
        t = self.wall_thickness
        slab = 0.10
        return self.wall_boxes() + [
            (
                np.array([0.0, 0.0, self.floor_z - slab / 2]),
                np.array([hx + t, hy + t, slab / 2]),
            )
        ]


@dataclass
class PlacedObject:
    """A rigid object with a world pose (rotation quaternion + translation)."""

    obj: RigidObject
    quat: np.ndarray
    translation: np.ndarray

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def world_vertices(self) -> np.ndarray:
        return self.obj.vertices @ self.rotation().T + self.translation

    def world_planes(self) -> tuple[np.ndarray, np.ndarray]:
        return face_planes(self.world_vertices(), self.obj.faces)

    def world_centroid(self) -> np.ndarray:
        return self.rotation() @ self.obj.centroid + self.translation


@dataclass
class Scene:
    """A tray plus settled objects; ``seed`` allows regeneration."""

    tray: Tray
    placed: list[PlacedObject]
    seed: int | None = None

    @property
    def object_count(self) -> int:
        return len(self.placed)

    @property
    def total_volume(self) -> float:
        return float(sum(p.obj.volume for p in self.placed))


def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E, 2) of a triangle mesh."""
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=0)
    return np.unique(np.sort(pairs, axis=1), axis=0)


def _segment_crossings(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Interior intersection points of two batches of 2-D segments.

    ``a`` is (Na, 2, 2) and ``b`` is (Nb, 2, 2); returns (M, 2) crossing
    points. Parallel or endpoint-touching pairs are skipped: those contacts
    are already covered by vertex columns.
    """
    p = a[:, 0][:, None, :]
    r = (a[:, 1] - a[:, 0])[:, None, :]
    q = b[None, :, 0, :]
    s = (b[:, 1] - b[:, 0])[None, :, :]
    denom = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    ok = np.abs(denom) > 1e-14
    denom = np.where(ok, denom, 1.0)
    qp = q - p
    t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / denom
    u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / denom
    ok &= (t > 0.0) & (t < 1.0) & (u > 0.0) & (u < 1.0)
    if not ok.any():
        return np.empty((0, 2))
    ti, tj = np.nonzero(ok)
    return a[ti, 0] + t[ti, tj, None] * (a[ti, 1] - a[ti, 0])


class _RestPile:
    """Exact vertical-drop support model of everything already in the tray.

    A falling convex hull comes to rest where the vertical clearance between
    it and the pile (or the floor) first reaches zero. For convex polytopes
    that clearance is a piecewise-linear function of (x, y) whose minimum sits
    at a projected vertex of either body or at a crossing of projected edges,
    so evaluating exactly these candidate columns gives the exact rest height
    and zero interpenetration by construction.
    """

    def __init__(self, tray: Tray):
        self.tray = tray
        self.floor = tray.floor_z
        self._verts: list[np.ndarray] = []
        self._planes: list[tuple[np.ndarray, np.ndarray]] = []
        self._edges: list[np.ndarray] = []
        self._lo: list[np.ndarray] = []
        self._hi: list[np.ndarray] = []

    def drop_and_add(self, placed: PlacedObject) -> float:
        """Drop ``placed`` (posed at z offset 0) to rest; returns the rest z offset."""
        wverts = placed.world_vertices()
        normals, offsets = face_planes(wverts, placed.obj.faces)
        edges = mesh_edges(placed.obj.faces)
        seg_new = wverts[:, :2][edges]
        aabb_min, aabb_max = wverts.min(axis=0), wverts.max(axis=0)
        gap_groups = [np.array([aabb_min[2] - self.floor])]
        for k in range(len(self._verts)):
            lo, hi = self._lo[k], self._hi[k]
            if (
                lo[0] > aabb_max[0]
                or hi[0] < aabb_min[0]
                or lo[1] > aabb_max[1]
                or hi[1] < aabb_min[1]
            ):
                continue
            r_verts = self._verts[k]
            r_n, r_o = self._planes[k]
            # Incoming vertex above the rested body's upper envelope.
            _, r_high, r_ok = vertical_envelopes(r_n, r_o, wverts[:, :2])
            if r_ok.any():
                gap_groups.append(wverts[r_ok, 2] - r_high[r_ok])
            # Rested vertex below the incoming body's lower envelope.
            near = (
                (r_verts[:, 0] >= aabb_min[0])
                & (r_verts[:, 0] <= aabb_max[0])
                & (r_verts[:, 1] >= aabb_min[1])
                & (r_verts[:, 1] <= aabb_max[1])
            )
            if near.any():
                pts = r_verts[near]
                p_low, _, p_ok = vertical_envelopes(normals, offsets, pts[:, :2])
                if p_ok.any():
                    gap_groups.append(p_low[p_ok] - pts[p_ok, 2])
            # Projected-edge crossings: lower envelope over upper envelope.
            cross = _segment_crossings(seg_new, r_verts[:, :2][self._edges[k]])
            if len(cross):
                c_low, _, c_ok1 = vertical_envelopes(normals, offsets, cross)
                _, c_high, c_ok2 = vertical_envelopes(r_n, r_o, cross)
                both = c_ok1 & c_ok2
                if both.any():
                    gap_groups.append(c_low[both] - c_high[both])
        drop = float(np.concatenate(gap_groups).min())
        placed.translation = placed.translation + np.array([0.0, 0.0, -drop])
        rested = wverts.copy()
        rested[:, 2] -= drop
        self._verts.append(rested)
        # Translating a plane set by -drop along z shifts each offset by -nz*drop.
        self._planes.append((normals, offsets - normals[:, 2] * drop))
        self._edges.append(edges)
        self._lo.append(rested.min(axis=0))
        self._hi.append(rested.max(axis=0))
        return -drop


def settle_scene(
    objects: list[RigidObject],
    tray: Tray,
    rng: np.random.Generator,
    placement_x: tuple[float, float] = (-0.37, 0.29),
    placement_y: tuple[float, float] = (-0.20, 0.20),
    seed: int | None = None,
) -> Scene:
    """Drop objects one by one at random poses inside the placement range.

    Each object gets a uniform yaw-pitch-roll rotation and up to 50 draws of
    (x, y) until its footprint fits inside the tray walls; it then falls
    straight down onto the current pile. Raises PlacementError when an object
    exhausts its retries.
    """
    grid = _RestPile(tray)
    placed_list: list[PlacedObject] = []
    (wx0, wx1), (wy0, wy1) = tray.x_range, tray.y_range
    for index, obj in enumerate(objects):
        yaw, pitch, roll = rng.uniform(0.0, 2.0 * np.pi, size=3)
        quat = quat_from_euler(yaw, pitch, roll)
        rot_verts = obj.vertices @ quat_to_matrix(quat).T
        half_x = (rot_verts[:, 0].min(), rot_verts[:, 0].max())
        half_y = (rot_verts[:, 1].min(), rot_verts[:, 1].max())
        for attempt in range(PLACEMENT_RETRIES + 1):
            if attempt == PLACEMENT_RETRIES:
                raise PlacementError(
                    f"object {index} does not fit after {PLACEMENT_RETRIES} (x, y) retries"
                )
            x = rng.uniform(*placement_x)
            y = rng.uniform(*placement_y)
            if (
                x + half_x[0] >= wx0
                and x + half_x[1] <= wx1
                and y + half_y[0] >= wy0
                and y + half_y[1] <= wy1
            ):
                break
        placed = PlacedObject(obj, quat, np.array([x, y, 0.0]))
        grid.drop_and_add(placed)
        placed_list.append(placed)
    return Scene(tray, placed_list, seed)


def resettle(scene: Scene) -> Scene:
    """Re-drop every object vertically, in order, keeping (x, y) and rotation.

    Used after an excavation removes support from under the remaining pile.
    """
    grid = _RestPile(scene.tray)
    new_placed = []
    for p in scene.placed:
        np_obj = PlacedObject(p.obj, p.quat.copy(), np.array([p.translation[0], p.translation[1], 0.0]))
        grid.drop_and_add(np_obj)
        new_placed.append(np_obj)
    return Scene(scene.tray, new_placed, scene.seed)


def spawn_scene(
    seed: int,
    count_range: tuple[int, int],
    tray: Tray | None = None,
    placement_x: tuple[float, float] = (-0.37, 0.29),
    placement_y: tuple[float, float] = (-0.20, 0.20),
) -> Scene:
    """Generate and settle a full scene from one seed (count drawn inclusive)."""
    lo, hi = count_range
    if not 0 < lo <= hi:
        raise SizeError(f"bad object count range {count_range}")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))
    objects = [gen_object(rng) for _ in range(count)]
    tray = tray if tray is not None else Tray()
    return settle_scene(objects, tray, rng, placement_x, placement_y, seed=seed)


# ---------------------------------------------------------------------------
# SCENE v1 serialization

_SCENE_MAGIC = b"SCN1"
_SCENE_VERSION = 1


def save_scene(scene: Scene, path) -> None:
    """Binary little-endian scene snapshot; byte-exact across round trips."""
    t = scene.tray
    with open(path, "wb") as fh:
        fh.write(_SCENE_MAGIC)
        fh.write(struct.pack("<I", _SCENE_VERSION))
        fh.write(
            struct.pack(
                "<5d", t.inner_length, t.inner_width, t.wall_height, t.wall_thickness, t.floor_z
            )
        )
        fh.write(struct.pack("<q", -1 if scene.seed is None else int(scene.seed)))
        fh.write(struct.pack("<I", scene.object_count))
        for p in scene.placed:
            fh.write(struct.pack("<II", len(p.obj.vertices), len(p.obj.faces)))
            fh.write(struct.pack("<d", p.obj.density))
            fh.write(np.ascontiguousarray(p.obj.vertices, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.obj.faces, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(p.quat, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.translation, dtype="<f8").tobytes())


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _SCENE_MAGIC:
        raise ShapeError(f"{path} is not a scene file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _SCENE_VERSION:
        raise ShapeError(f"unsupported scene version {version}")
    dims = struct.unpack_from("<5d", blob, 8)
    off = 8 + 40
    (seed,) = struct.unpack_from("<q", blob, off)
    off += 8
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tray = Tray(*dims)
    placed = []
    for _ in range(count):
        nv, nf = struct.unpack_from("<II", blob, off)
        off += 8
        (density,) = struct.unpack_from("<d", blob, off)
        off += 8
        verts = np.frombuffer(blob, dtype="<f8", count=nv * 3, offset=off).reshape(nv, 3).copy()
        off += nv * 24
        faces = np.frombuffer(blob, dtype="<u4", count=nf * 3, offset=off).reshape(nf, 3)
        faces = faces.astype(np.int64)
        off += nf * 12
        quat = np.frombuffer(blob, dtype="<f8", count=4, offset=off).copy()
        off += 32
        trans = np.frombuffer(blob, dtype="<f8", count=3, offset=off).copy()
        off += 24
        vol = polytope_volume(verts, faces)
        placed.append(PlacedObject(RigidObject(verts, faces, vol, density), quat, trans))
    if off != len(blob):
        raise ShapeError(f"{path}: {len(blob) - off} trailing bytes")
    return Scene(tray, placed, None if seed < 0 else int(seed))
