"""Scene composition: canned environments, a tagged pedestrian template,
attribute manipulations, and target placement.

Also hosts the procedural primitive builders (boxes, cylinders, cones,
spheres) used for the humanoid and for the carryable-object pool. All
primitives are wound outward so front faces point at an outside sensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    Box3D,
    Pose3D,
    TriangleMesh,
    mesh_aabb,
    merge_meshes,
    placed_box,
    transform_mesh,
    wrap_angle,
)
from .lidar import Bvh, EmptySceneError, LidarConfig, PointCloud, scan_sequence

OCCLUDER_REFLECTANCE = 0.8
OCCLUDER_INFLATE = 0.02  # meters on each side


class UntaggedMeshError(ValueError):
    pass


class EmptyResultError(ValueError):
    pass


# --- primitive meshes ---------------------------------------------------------

def box_mesh(size, center=(0.0, 0.0, 0.0), reflectance=0.5, tag="none") -> TriangleMesh:
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    cx, cy, cz = center
    v = np.array([
        [-sx, -sy, -sz], [sx, -sy, -sz], [sx, sy, -sz], [-sx, sy, -sz],
        [-sx, -sy, sz], [sx, -sy, sz], [sx, sy, sz], [-sx, sy, sz],
    ]) + np.array([cx, cy, cz])
    f = np.array([
        [0, 2, 1], [0, 3, 2],      # bottom (-z)
        [4, 5, 6], [4, 6, 7],      # top (+z)
        [0, 1, 5], [0, 5, 4],      # -y
        [2, 3, 7], [2, 7, 6],      # +y
        [1, 2, 6], [1, 6, 5],      # +x
        [3, 0, 4], [3, 4, 7],      # -x
    ])
    return TriangleMesh(v, f, np.full(12, reflectance), np.full(12, tag, dtype="U8"))


def cylinder_mesh(radius, z0, z1, center_xy=(0.0, 0.0), n=12, reflectance=0.5,
                  tag="none", caps=True) -> TriangleMesh:
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    ring = np.stack([radius * np.cos(ang) + center_xy[0],
                     radius * np.sin(ang) + center_xy[1]], axis=1)
    lo = np.concatenate([ring, np.full((n, 1), z0)], axis=1)
    hi = np.concatenate([ring, np.full((n, 1), z1)], axis=1)
    verts = [lo, hi]
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i]]
    if caps:
        verts.append(np.array([[center_xy[0], center_xy[1], z0],
                               [center_xy[0], center_xy[1], z1]]))
        b, t = 2 * n, 2 * n + 1
        for i in range(n):
            j = (i + 1) % n
            faces += [[b, j, i], [t, n + i, n + j]]
    v = np.concatenate(verts)
    f = np.asarray(faces, dtype=np.int64)
    return TriangleMesh(v, f, np.full(len(f), reflectance), np.full(len(f), tag, dtype="U8"))


def cone_mesh(radius, z0, z1, center_xy=(0.0, 0.0), n=12, reflectance=0.5,
              tag="none") -> TriangleMesh:
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    base = np.stack([radius * np.cos(ang) + center_xy[0],
                     radius * np.sin(ang) + center_xy[1],
                     np.full(n, z0)], axis=1)
    apex = np.array([[center_xy[0], center_xy[1], z1]])
    centre = np.array([[center_xy[0], center_xy[1], z0]])
    v = np.concatenate([base, apex, centre])
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n], [n + 1, j, i]]
    f = np.asarray(faces, dtype=np.int64)
    return TriangleMesh(v, f, np.full(len(f), reflectance), np.full(len(f), tag, dtype="U8"))


def sphere_mesh(radius, center=(0.0, 0.0, 0.0), n_lat=6, n_lon=10, reflectance=0.5,
                tag="none") -> TriangleMesh:
    lat = np.linspace(-math.pi / 2, math.pi / 2, n_lat + 1)
    lon = np.linspace(0.0, 2.0 * math.pi, n_lon, endpoint=False)
    rows = []
    for la in lat[1:-1]:
        rows.append(np.stack([
            radius * np.cos(la) * np.cos(lon) + center[0],
            radius * np.cos(la) * np.sin(lon) + center[1],
            np.full(n_lon, radius * np.sin(la) + center[2]),
        ], axis=1))
    south = np.array([[center[0], center[1], center[2] - radius]])
    north = np.array([[center[0], center[1], center[2] + radius]])
    v = np.concatenate([south] + rows + [north])
    faces = []
    for i in range(n_lon):  # south cap
        j = (i + 1) % n_lon
        faces.append([0, 1 + j, 1 + i])
    for r in range(len(rows) - 1):
        b0, b1 = 1 + r * n_lon, 1 + (r + 1) * n_lon
        for i in range(n_lon):
            j = (i + 1) % n_lon
            faces += [[b0 + i, b0 + j, b1 + j], [b0 + i, b1 + j, b1 + i]]
    top = 1 + len(rows) * n_lon
    b0 = 1 + (len(rows) - 1) * n_lon
    for i in range(n_lon):  # north cap
        j = (i + 1) % n_lon
        faces.append([top, b0 + i, b0 + j])
    f = np.asarray(faces, dtype=np.int64)
    return TriangleMesh(v, f, np.full(len(f), reflectance), np.full(len(f), tag, dtype="U8"))


# --- pedestrian template ------------------------------------------------------

PED_REFLECTANCE = 0.6


def build_pedestrian_template() -> TriangleMesh:
    """Procedural standing humanoid, ~1.75 m tall, facing +x, feet on z = 0.

    Every triangle carries one of the body-region tags; reflectance is 0.6.
    """
    r = PED_REFLECTANCE
    parts = [
        box_mesh((0.26, 0.11, 0.08), center=(0.05, 0.10, 0.04), reflectance=r, tag="feet"),
        box_mesh((0.26, 0.11, 0.08), center=(0.05, -0.10, 0.04), reflectance=r, tag="feet"),
        cylinder_mesh(0.07, 0.08, 0.85, center_xy=(0.0, 0.10), reflectance=r, tag="legs"),
        cylinder_mesh(0.07, 0.08, 0.85, center_xy=(0.0, -0.10), reflectance=r, tag="legs"),
        box_mesh((0.30, 0.38, 0.60), center=(0.0, 0.0, 1.15), reflectance=r, tag="torso"),
        cylinder_mesh(0.05, 0.80, 1.42, center_xy=(0.0, 0.24), reflectance=r, tag="arms"),
        cylinder_mesh(0.05, 0.80, 1.42, center_xy=(0.0, -0.24), reflectance=r, tag="arms"),
        cylinder_mesh(0.05, 1.45, 1.50, center_xy=(0.0, 0.0), reflectance=r, tag="head"),
        sphere_mesh(0.125, center=(0.0, 0.0, 1.625), reflectance=r, tag="head"),
    ]
    return merge_meshes(parts)


# --- environments -------------------------------------------------------------

GROUND_REFLECTANCE = 0.30
ENVIRONMENT_NAMES = ("open_lot", "street", "corridor")


@dataclass(frozen=True)
class Environment:
    """Static scene geometry. The first mesh is always the ground plane."""

    static_meshes: tuple[TriangleMesh, ...]
    name: str

    def __post_init__(self):
        if not self.static_meshes:
            raise EmptySceneError("environment has no meshes")
        ground = mesh_aabb(self.static_meshes[0])
        if ground.size[0] < 100.0 or ground.size[1] < 100.0:
            raise ValueError("environment ground must cover the sensor range")
        object.__setattr__(self, "static_meshes", tuple(self.static_meshes))


def _ground_plane(half: float = 130.0) -> TriangleMesh:
    v = np.array([[-half, -half, 0.0], [half, -half, 0.0],
                  [half, half, 0.0], [-half, half, 0.0]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return TriangleMesh(v, f, np.full(2, GROUND_REFLECTANCE),
                        np.full(2, "none", dtype="U8"))


def build_environment(name: str, seed: int = 0) -> Environment:
    """One of the three canned environments; geometry is procedural and seeded."""
    rng = np.random.default_rng(seed)
    meshes: list[TriangleMesh] = [_ground_plane()]
    if name == "open_lot":
        pass
    elif name == "street":
        for side in (-1.0, 1.0):
            for x0 in (9.0, 17.0, 26.0, 35.0):
                jitter = rng.uniform(-0.6, 0.6)
                meshes.append(box_mesh(
                    (4.4, 1.8, 1.5),
                    center=(x0 + jitter, side * 6.0, 0.75),
                    reflectance=0.45,
                ))
        for x0 in (12.0, 30.0):
            meshes.append(cylinder_mesh(0.08, 0.0, 5.0, center_xy=(x0, 8.0),
                                        n=8, reflectance=0.5))
    elif name == "corridor":
        for side in (-1.0, 1.0):
            meshes.append(box_mesh((62.0, 0.3, 3.0), center=(25.0, side * 7.0, 1.5),
                                   reflectance=0.4))
    else:
        raise ValueError(f"unknown environment {name!r} (one of {ENVIRONMENT_NAMES})")
    return Environment(tuple(meshes), name)


# --- attribute manipulation ---------------------------------------------------

_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}
OCCLUDER_REGIONS = ("feet", "torso", "head")


@dataclass(frozen=True)
class AttributeSpec:
    """Structure/appearance edits applied to the tagged pedestrian."""

    topology_mask: frozenset[str] | None = None
    connectivity_gap: tuple[str, float, float] | None = None  # (axis, width, center)
    intensity_factor: float | None = None
    occluder: str | None = None

    def __post_init__(self):
        if self.topology_mask is not None:
            object.__setattr__(self, "topology_mask", frozenset(self.topology_mask))
        if self.connectivity_gap is not None:
            axis, width, center = self.connectivity_gap
            if axis not in _AXIS_INDEX:
                raise ValueError("connectivity axis must be one of x/y/z")
            if not width > 0:
                raise ValueError("connectivity gap width must be positive")
            object.__setattr__(self, "connectivity_gap", (axis, float(width), float(center)))
        if self.intensity_factor is not None and not self.intensity_factor > 0:
            raise ValueError("intensity_factor must be positive")
        if self.occluder is not None and self.occluder not in OCCLUDER_REGIONS:
            raise ValueError(f"occluder must be one of {OCCLUDER_REGIONS}")

    def to_json(self) -> dict:
        out: dict = {}
        if self.topology_mask is not None:
            out["topology_mask"] = sorted(self.topology_mask)
        if self.connectivity_gap is not None:
            axis, width, center = self.connectivity_gap
            out["connectivity_gap"] = {"axis": axis, "gap_width": width, "gap_center": center}
        if self.intensity_factor is not None:
            out["intensity_factor"] = self.intensity_factor
        if self.occluder is not None:
            out["occluder"] = self.occluder
        return out

    @staticmethod
    def from_json(obj: dict) -> "AttributeSpec":
        gap = obj.get("connectivity_gap")
        return AttributeSpec(
            topology_mask=frozenset(obj["topology_mask"]) if "topology_mask" in obj else None,
            connectivity_gap=(gap["axis"], gap["gap_width"], gap["gap_center"]) if gap else None,
            intensity_factor=obj.get("intensity_factor"),
            occluder=obj.get("occluder"),
        )


def apply_attributes(ped: TriangleMesh, spec: AttributeSpec
                     ) -> tuple[TriangleMesh, list[TriangleMesh]]:
    """Apply structure/appearance edits; returns (edited mesh, occluder meshes).

    Topology deletes whole tagged regions; connectivity deletes every triangle
    whose extent intersects the slab |coord - center| < width / 2; intensity
    scales reflectance with a clamp to [0, 1]. The occluder is an opaque cube
    covering the named region's AABB inflated by 2 cm on each side.
    """
    if ped.tags is None:
        raise UntaggedMeshError("attribute edits need a body-tagged mesh")
    keep = np.ones(ped.n_triangles, dtype=bool)
    if spec.topology_mask:
        keep &= ~np.isin(ped.tags, sorted(spec.topology_mask))
    if spec.connectivity_gap is not None:
        axis, width, center = spec.connectivity_gap
        coord = ped.triangle_corners()[:, :, _AXIS_INDEX[axis]]
        lo, hi = coord.min(axis=1), coord.max(axis=1)
        keep &= ~((lo < center + width / 2.0) & (hi > center - width / 2.0))
    if not keep.any():
        raise EmptyResultError("attribute edits removed every triangle")
    refl = ped.reflectance[keep]
    if spec.intensity_factor is not None:
        refl = np.clip(refl * spec.intensity_factor, 0.0, 1.0)
    used = np.unique(ped.triangles[keep])
    remap = np.zeros(len(ped.vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    edited = TriangleMesh(ped.vertices[used], remap[ped.triangles[keep]],
                          refl, ped.tags[keep])

    occluders: list[TriangleMesh] = []
    if spec.occluder is not None:
        region = np.flatnonzero(ped.tags == spec.occluder)
        if not len(region):
            raise EmptyResultError(f"mesh has no {spec.occluder!r}-tagged region")
        corners = ped.triangle_corners()[region].reshape(-1, 3)
        lo = corners.min(axis=0) - OCCLUDER_INFLATE
        hi = corners.max(axis=0) + OCCLUDER_INFLATE
        occluders.append(box_mesh(hi - lo, center=(hi + lo) / 2.0,
                                  reflectance=OCCLUDER_REFLECTANCE))
    return edited, occluders


# --- placement and composition -------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Environment plus target placement (distance, bearing, ego velocity)."""

    env: Environment
    distance: float
    angle: float                     # degrees, bearing from the sensor
    velocity: float = 0.0            # m/s along +x (ego axis)
    n_frames: int = 1
    lidar: LidarConfig = field(default_factory=LidarConfig)
    attributes: AttributeSpec | None = None

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        if not 0.0 <= self.angle < 360.0:
            raise ValueError("angle must lie in [0, 360)")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    def to_json(self) -> dict:
        out = {
            "env": self.env.name,
            "distance": self.distance,
            "angle": self.angle,
            "velocity": self.velocity,
            "n_frames": self.n_frames,
            "lidar": self.lidar.to_json(),
        }
        if self.attributes is not None:
            out["attributes"] = self.attributes.to_json()
        return out

    @staticmethod
    def from_json(obj: dict) -> "ScenarioConfig":
        return ScenarioConfig(
            env=build_environment(obj["env"], seed=int(obj.get("env_seed", 0))),
            distance=float(obj["distance"]),
            angle=float(obj["angle"]),
            velocity=float(obj.get("velocity", 0.0)),
            n_frames=int(obj.get("n_frames", 1)),
            lidar=LidarConfig.from_json(obj.get("lidar", {})),
            attributes=AttributeSpec.from_json(obj["attributes"]) if "attributes" in obj else None,
        )


def place_target(target: TriangleMesh, cfg: ScenarioConfig) -> Pose3D:
    """Ground the target at the configured range and bearing, facing the sensor."""
    a = math.radians(cfg.angle)
    ox, oy, _ = cfg.lidar.origin
    z_off = -float(target.vertices[:, 2].min()) if len(target.vertices) else 0.0
    return Pose3D(
        translation=[ox + cfg.distance * math.cos(a), oy + cfg.distance * math.sin(a), z_off],
        yaw=wrap_angle(a + math.pi),
        scale=1.0,
    )


def compose(env: Environment, target: TriangleMesh, pose: Pose3D) -> tuple[Bvh, Box3D]:
    """Index the environment plus the placed target; the ground-truth box is the
    target's local AABB carried through the pose."""
    if target.n_triangles == 0:
        raise EmptySceneError("target mesh is empty")
    bvh = Bvh([*env.static_meshes, transform_mesh(target, pose)])
    return bvh, placed_box(target, pose)


def compose_with_extras(env: Environment, target: TriangleMesh, pose: Pose3D,
                        extras: list[TriangleMesh] = ()) -> tuple[Bvh, Box3D, int]:
    """Like compose, but with extra meshes (e.g. occluders) placed by the same
    pose after the target. Returns the target's mesh id for provenance filters."""
    if target.n_triangles == 0:
        raise EmptySceneError("target mesh is empty")
    placed = [transform_mesh(m, pose) for m in (target, *extras)]
    target_id = len(env.static_meshes)
    bvh = Bvh([*env.static_meshes, *placed])
    return bvh, placed_box(target, pose), target_id


def scan_scenario(sc: ScenarioConfig, target: TriangleMesh,
                  extras: list[TriangleMesh] = ()) -> tuple[list[PointCloud], Box3D, int]:
    """Place, compose and scan a scenario; returns (per-frame clouds, gt box,
    target mesh id)."""
    pose = place_target(target, sc)
    bvh, gt, target_id = compose_with_extras(sc.env, target, pose, extras)
    clouds = scan_sequence([bvh] * sc.n_frames, sc.lidar, sc.velocity, sc.n_frames)
    return clouds, gt, target_id
