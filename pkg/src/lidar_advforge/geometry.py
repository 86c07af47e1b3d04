"""Core 3D primitives: triangle meshes, rigid-ish poses, oriented boxes, IoU, Chamfer.

Conventions used throughout the package:
  * right-handed coordinates, z up, distances in meters
  * yaw is a rotation about +z, normalized to [-pi, pi)
  * boxes are yaw-oriented only (no pitch/roll)
All values are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

BODY_TAGS = ("feet", "legs", "torso", "arms", "head", "none")

# Thinner than this and an AABB dimension gets clamped so IoU stays defined.
MIN_BOX_DIM = 1e-3
DEGENERATE_TRI_AREA = 1e-12


class EmptyMeshError(ValueError):
    pass


class EmptyCloudError(ValueError):
    pass


def _as_float_array(values, shape_tail: tuple[int, ...]) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if arr.ndim == 1 and shape_tail and not arr.size:
        arr = arr.reshape((0,) + shape_tail)
    return arr


def yaw_matrix(yaw: float) -> np.ndarray:
    """3x3 rotation about +z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(yaw: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    return float((yaw + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle geometry with per-triangle reflectance and optional body tags."""

    vertices: np.ndarray          # (n, 3) float64
    triangles: np.ndarray         # (m, 3) int64 indices into vertices
    reflectance: np.ndarray       # (m,) float64 in [0, 1]
    tags: np.ndarray | None = None  # (m,) unicode, entries from BODY_TAGS

    def __post_init__(self):
        v = _as_float_array(self.vertices, (3,)).reshape(-1, 3)
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64)).reshape(-1, 3)
        r = np.asarray(self.reflectance, dtype=np.float64).reshape(-1)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if len(r) != len(t):
            raise ValueError(f"reflectance length {len(r)} != triangle count {len(t)}")
        if r.size and (r.min() < 0.0 or r.max() > 1.0):
            raise ValueError("reflectance must lie in [0, 1]")
        if t.size:
            areas = triangle_areas(v, t)
            if areas.min() <= DEGENERATE_TRI_AREA:
                raise ValueError("degenerate triangle (area <= 1e-12 m^2)")
        tags = self.tags
        if tags is not None:
            tags = np.asarray(tags, dtype="U8").reshape(-1)
            if len(tags) != len(t):
                raise ValueError("tags length != triangle count")
            bad = set(tags.tolist()) - set(BODY_TAGS)
            if bad:
                raise ValueError(f"unknown body tags: {sorted(bad)}")
            tags.setflags(write=False)
        for arr in (v, t, r):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "reflectance", r)
        object.__setattr__(self, "tags", tags)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """(m, 3, 3) corner positions."""
        return self.vertices[self.triangles]


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    corners = vertices[triangles]
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def merge_meshes(meshes: list[TriangleMesh]) -> TriangleMesh:
    """Concatenate meshes into one, re-indexing triangles."""
    if not meshes:
        raise EmptyMeshError("no meshes to merge")
    verts, tris, refl, tags = [], [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        refl.append(m.reflectance)
        tags.append(m.tags if m.tags is not None else np.full(m.n_triangles, "none", dtype="U8"))
        offset += len(m.vertices)
    return TriangleMesh(
        np.concatenate(verts), np.concatenate(tris),
        np.concatenate(refl), np.concatenate(tags),
    )


@dataclass(frozen=True)
class Pose3D:
    """Placement of an object: uniform scale, then yaw about +z, then translation."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        t = _as_float_array(self.translation, (3,)).reshape(3)
        t.setflags(write=False)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (self.scale * pts) @ yaw_matrix(self.yaw).T + self.translation


def compose_poses(outer: Pose3D, inner: Pose3D) -> Pose3D:
    """Pose equivalent to applying `inner` first, then `outer`."""
    t = outer.apply(inner.translation.reshape(1, 3))[0]
    return Pose3D(translation=t, yaw=outer.yaw + inner.yaw, scale=outer.scale * inner.scale)


def transform_mesh(mesh: TriangleMesh, pose: Pose3D) -> TriangleMesh:
    """Map every vertex through the pose; reflectance and tags are preserved."""
    return TriangleMesh(pose.apply(mesh.vertices), mesh.triangles, mesh.reflectance, mesh.tags)


@dataclass(frozen=True)
class Box3D:
    """Yaw-oriented 3D bounding box."""

    center: np.ndarray           # (3,)
    size: np.ndarray             # (length, width, height), all > 0
    yaw: float = 0.0

    def __post_init__(self):
        c = _as_float_array(self.center, (3,)).reshape(3)
        s = _as_float_array(self.size, (3,)).reshape(3)
        if not np.all(s > 0):
            raise ValueError("box size components must be positive")
        c.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def volume(self) -> float:
        return float(self.size.prod())

    def bev_corners(self) -> np.ndarray:
        """(4, 2) footprint corners, counter-clockwise."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the box (inclusive)."""
        pts = np.asarray(points, dtype=np.float64) - self.center
        c, s = math.cos(-self.yaw), math.sin(-self.yaw)
        x = c * pts[:, 0] - s * pts[:, 1]
        y = s * pts[:, 0] + c * pts[:, 1]
        half = self.size / 2.0
        return (
            (np.abs(x) <= half[0])
            & (np.abs(y) <= half[1])
            & (np.abs(pts[:, 2]) <= half[2])
        )

    def to_json(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(), "yaw": self.yaw}

    @staticmethod
    def from_json(obj: dict) -> "Box3D":
        return Box3D(np.asarray(obj["center"]), np.asarray(obj["size"]), float(obj["yaw"]))


def mesh_aabb(mesh: TriangleMesh) -> Box3D:
    """Tightest axis-aligned box (yaw = 0) containing all vertices.

    Dimensions thinner than 1 mm are clamped so downstream IoU is always defined.
    """
    if len(mesh.vertices) == 0:
        raise EmptyMeshError("cannot bound an empty mesh")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    size = np.maximum(hi - lo, MIN_BOX_DIM)
    return Box3D(center=(hi + lo) / 2.0, size=size, yaw=0.0)


def placed_box(mesh: TriangleMesh, pose: Pose3D) -> Box3D:
    """Oriented box of a mesh under a pose: the local AABB carried through the pose."""
    local = mesh_aabb(mesh)
    return Box3D(
        center=pose.apply(local.center.reshape(1, 3))[0],
        size=np.maximum(local.size * pose.scale, MIN_BOX_DIM),
        yaw=pose.yaw,
    )


def _clip_polygon(subject: np.ndarray, clip_rect: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW rectangle."""
    output = subject
    n = len(clip_rect)
    for i in range(n):
        a = clip_rect[i]
        b = clip_rect[(i + 1) % n]
        edge = b - a
        if len(output) == 0:
            return output
        rel = output - a
        # inside = left of the directed edge a->b
        side = edge[0] * rel[:, 1] - edge[1] * rel[:, 0]
        new_pts = []
        m = len(output)
        for j in range(m):
            k = (j + 1) % m
            cur_in = side[j] >= 0.0
            nxt_in = side[k] >= 0.0
            if cur_in:
                new_pts.append(output[j])
            if cur_in != nxt_in:
                denom = side[j] - side[k]
                if denom != 0.0:
                    t = side[j] / denom
                    new_pts.append(output[j] + t * (output[k] - output[j]))
        output = np.asarray(new_pts).reshape(-1, 2)
    return output


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def bev_overlap_area(a: Box3D, b: Box3D) -> float:
    """Intersection area of the two footprints."""
    return _polygon_area(_clip_polygon(a.bev_corners(), b.bev_corners()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_overlap_area(a, b)
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU of two yaw-oriented boxes.

    Intersection = (footprint polygon overlap area) x (vertical overlap length).
    Degenerate (zero-area) intersections return 0.
    """
    z_lo = max(a.center[2] - a.size[2] / 2.0, b.center[2] - b.size[2] / 2.0)
    z_hi = min(a.center[2] + a.size[2] / 2.0, b.center[2] + b.size[2] / 2.0)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter = bev_overlap_area(a, b) * dz
    union = a.volume + b.volume - inter
    if union <= 0.0 or inter <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def _xyz_of(cloud) -> np.ndarray:
    xyz = getattr(cloud, "xyz", cloud)
    return np.asarray(xyz, dtype=np.float64).reshape(-1, 3)


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets (meters).

    Accepts (n, 3) arrays or anything with an ``xyz`` attribute.
    """
    pa, pb = _xyz_of(a), _xyz_of(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloudError("chamfer needs two non-empty clouds")
    d_ab = cKDTree(pb).query(pa, k=1)[0]
    d_ba = cKDTree(pa).query(pb, k=1)[0]
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


# --- Wavefront OBJ with optional JSON sidecar -------------------------------

def load_obj(path: str | Path, sidecar: str | Path | None = None) -> TriangleMesh:
    """Read an ASCII OBJ (v/f records only, triangular faces, positive indices).

    A sidecar JSON may set per-triangle reflectance and body tags keyed by
    triangle index, plus ``reflectance_default`` / ``tag_default`` fallbacks.
    """
    path = Path(path)
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise ValueError(f"{path}:{ln}: vertex needs 3 coordinates")
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: only triangular faces are supported")
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                if i < 0:
                    raise ValueError(f"{path}:{ln}: negative indices are rejected")
                idx.append(i - 1)
            faces.append(idx)
        # any other record type is ignored
    n_tri = len(faces)
    refl = np.full(n_tri, 0.5)
    tags = None
    if sidecar is not None:
        side = json.loads(Path(sidecar).read_text())
        refl[:] = float(side.get("reflectance_default", 0.5))
        for key, val in side.get("reflectance", {}).items():
            refl[int(key)] = float(val)
        if "tags" in side or "tag_default" in side:
            tags = np.full(n_tri, side.get("tag_default", "none"), dtype="U8")
            for key, val in side.get("tags", {}).items():
                tags[int(key)] = val
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), refl, tags)


def save_obj(mesh: TriangleMesh, path: str | Path, sidecar: str | Path | None = None) -> None:
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    path.write_text("\n".join(lines) + "\n")
    if sidecar is not None:
        payload: dict = {"reflectance": {str(i): float(r) for i, r in enumerate(mesh.reflectance)}}
        if mesh.tags is not None:
            payload["tags"] = {str(i): str(t) for i, t in enumerate(mesh.tags)}
        Path(sidecar).write_text(json.dumps(payload, sort_keys=True, indent=1))
