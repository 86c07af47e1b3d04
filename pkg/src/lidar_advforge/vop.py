"""Discrete verb-object-pose prompt space and the deterministic composition
generator that attaches a pool object to the pedestrian.

The generator realizes prompts with an attachment table: the pose selects an
anchor point on the body (computed from the pedestrian's tagged regions), the
verb selects an offset/orientation rule relative to that anchor. Identical
inputs produce bit-identical meshes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose3D, TriangleMesh, load_obj, merge_meshes, mesh_aabb, save_obj, transform_mesh
from .scene import box_mesh, cone_mesh, cylinder_mesh, sphere_mesh

DEFAULT_VERBS = ("hold", "carry", "push", "wear", "drag")
DEFAULT_POSES = ("on the head", "in front of the body", "on the back",
                 "at the side", "near the legs")
DEFAULT_BASE = "a full body-shot of a person standing"

_VERB_ING = {"hold": "holding", "carry": "carrying", "push": "pushing",
             "wear": "wearing", "drag": "dragging", "pull": "pulling",
             "ride": "riding", "lift": "lifting"}


class UnknownObjectError(KeyError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    verbs: tuple[str, ...]
    objects: tuple[str, ...]
    poses: tuple[str, ...]
    base: str = DEFAULT_BASE

    def __post_init__(self):
        for name in ("verbs", "objects", "poses"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            if len(set(vals)) != len(vals):
                raise ValueError(f"{name} entries must be unique")
            object.__setattr__(self, name, vals)

    @property
    def n_triplets(self) -> int:
        return len(self.verbs) * len(self.objects) * len(self.poses)

    def to_json(self) -> dict:
        return {"verbs": list(self.verbs), "objects": list(self.objects),
                "poses": list(self.poses), "base": self.base}

    @staticmethod
    def from_json(obj: dict) -> "Vocabulary":
        return Vocabulary(tuple(obj["verbs"]), tuple(obj["objects"]),
                          tuple(obj["poses"]), obj.get("base", DEFAULT_BASE))


@dataclass(frozen=True)
class VopTriplet:
    verb_idx: int
    object_idx: int
    pose_idx: int

    def words(self, vocab: Vocabulary) -> tuple[str, str, str]:
        if not (0 <= self.verb_idx < len(vocab.verbs)
                and 0 <= self.object_idx < len(vocab.objects)
                and 0 <= self.pose_idx < len(vocab.poses)):
            raise IndexError(f"triplet {self} out of range for vocabulary sizes "
                             f"({len(vocab.verbs)}, {len(vocab.objects)}, {len(vocab.poses)})")
        return (vocab.verbs[self.verb_idx], vocab.objects[self.object_idx],
                vocab.poses[self.pose_idx])

    def to_json(self) -> dict:
        return {"verb_idx": self.verb_idx, "object_idx": self.object_idx,
                "pose_idx": self.pose_idx}

    @staticmethod
    def from_json(obj: dict) -> "VopTriplet":
        return VopTriplet(int(obj["verb_idx"]), int(obj["object_idx"]), int(obj["pose_idx"]))


def _ing(verb: str) -> str:
    if verb in _VERB_ING:
        return _VERB_ING[verb]
    if verb.endswith("e") and not verb.endswith("ee"):
        return verb[:-1] + "ing"
    return verb + "ing"


def _article(noun: str) -> str:
    return "an" if noun[:1].lower() in "aeiou" else "a"


def concat_prompt(t: VopTriplet, vocab: Vocabulary) -> str:
    """Deterministic natural-language prompt for a triplet."""
    verb, obj, pose = t.words(vocab)
    base = vocab.base.rstrip(". ")
    return f"{base} and {_ing(verb)} {_article(obj)} {obj} {pose}."


def enumerate_triplets(vocab: Vocabulary) -> list[VopTriplet]:
    """All triplets in lexicographic (verb, object, pose) index order."""
    return [
        VopTriplet(v, o, p)
        for v in range(len(vocab.verbs))
        for o in range(len(vocab.objects))
        for p in range(len(vocab.poses))
    ]


def default_vocabulary(pool: "ObjectPool | None" = None) -> Vocabulary:
    objects = tuple(e.name for e in (pool or default_object_pool()).entries)
    return Vocabulary(DEFAULT_VERBS, objects, DEFAULT_POSES, DEFAULT_BASE)


# --- object pool ----------------------------------------------------------------

@dataclass(frozen=True)
class PoolEntry:
    name: str
    mesh: TriangleMesh
    default_scale: float = 1.0
    anchor_hint: str = "upright"   # upright | flat | hang


@dataclass(frozen=True)
class ObjectPool:
    entries: tuple[PoolEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("pool entry names must be unique")
        object.__setattr__(self, "entries", tuple(self.entries))

    def get(self, name: str) -> PoolEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise UnknownObjectError(name)

    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)


def _umbrella_open() -> TriangleMesh:
    return merge_meshes([
        cylinder_mesh(0.02, 0.0, 1.0, n=8, reflectance=0.45),
        cone_mesh(0.50, 0.88, 1.08, n=14, reflectance=0.55),
    ])


def _ladder() -> TriangleMesh:
    parts = [
        box_mesh((0.06, 0.06, 2.0), center=(0.0, 0.20, 1.0), reflectance=0.6),
        box_mesh((0.06, 0.06, 2.0), center=(0.0, -0.20, 1.0), reflectance=0.6),
    ]
    for z in (0.3, 0.65, 1.0, 1.35, 1.7):
        parts.append(box_mesh((0.05, 0.40, 0.05), center=(0.0, 0.0, z), reflectance=0.6))
    return merge_meshes(parts)


def _cart() -> TriangleMesh:
    parts = [box_mesh((0.62, 0.45, 0.10), center=(0.05, 0.0, 0.40), reflectance=0.55)]
    for sx, sy in ((0.3, 0.18), (0.3, -0.18), (-0.2, 0.18), (-0.2, -0.18)):
        parts.append(cylinder_mesh(0.035, 0.0, 0.35, center_xy=(sx, sy), n=8, reflectance=0.5))
    parts.append(box_mesh((0.05, 0.45, 0.70), center=(-0.25, 0.0, 0.80), reflectance=0.55))
    return merge_meshes(parts)


def _chair() -> TriangleMesh:
    parts = [box_mesh((0.42, 0.42, 0.06), center=(0.0, 0.0, 0.45), reflectance=0.6)]
    for sx, sy in ((0.17, 0.17), (0.17, -0.17), (-0.17, 0.17), (-0.17, -0.17)):
        parts.append(box_mesh((0.05, 0.05, 0.42), center=(sx, sy, 0.21), reflectance=0.6))
    parts.append(box_mesh((0.05, 0.42, 0.45), center=(-0.185, 0.0, 0.70), reflectance=0.6))
    return merge_meshes(parts)


def default_object_pool() -> ObjectPool:
    """The 13 carryable objects, procedurally built, resting on z = 0."""
    builders = (
        ("open umbrella", _umbrella_open, "upright"),
        ("closed umbrella", lambda: cylinder_mesh(0.04, 0.0, 0.95, n=8, reflectance=0.45), "hang"),
        ("small box", lambda: box_mesh((0.30, 0.30, 0.30), center=(0, 0, 0.15), reflectance=0.65), "flat"),
        ("large box", lambda: box_mesh((0.60, 0.50, 0.50), center=(0, 0, 0.25), reflectance=0.65), "flat"),
        ("board", lambda: box_mesh((0.05, 1.15, 0.85), center=(0, 0, 0.425), reflectance=0.7), "flat"),
        ("backpack", lambda: box_mesh((0.20, 0.35, 0.50), center=(0, 0, 0.25), reflectance=0.5), "hang"),
        ("ladder", _ladder, "upright"),
        ("cart", _cart, "upright"),
        ("suitcase", lambda: box_mesh((0.24, 0.45, 0.65), center=(0, 0, 0.325), reflectance=0.6), "upright"),
        ("traffic cone", lambda: merge_meshes([
            box_mesh((0.30, 0.30, 0.04), center=(0, 0, 0.02), reflectance=0.85),
            cone_mesh(0.16, 0.04, 0.55, n=10, reflectance=0.85)]), "upright"),
        ("bucket", lambda: cylinder_mesh(0.15, 0.0, 0.35, n=10, reflectance=0.5), "upright"),
        ("tube", lambda: cylinder_mesh(0.07, 0.0, 1.20, n=8, reflectance=0.4), "upright"),
        ("chair", _chair, "upright"),
    )
    return ObjectPool(tuple(
        PoolEntry(name=n, mesh=build(), default_scale=1.0, anchor_hint=hint)
        for n, build, hint in builders
    ))


# --- composition generator -------------------------------------------------------

_BODY_FALLBACK_FRACTIONS = {"head_top": 1.0, "chest_z": 0.66, "hip_z": 0.54, "shin_z": 0.26}


def _body_anchors(ped: TriangleMesh) -> dict:
    """Anchor points/normals on the pedestrian, derived from tagged regions when
    present and from AABB fractions otherwise. Pedestrian faces +x."""
    bb = mesh_aabb(ped)
    lo = bb.center - bb.size / 2.0
    hi = bb.center + bb.size / 2.0

    def region(tag, axis, kind):
        if ped.tags is not None and (ped.tags == tag).any():
            pts = ped.triangle_corners()[ped.tags == tag].reshape(-1, 3)
            return float(pts[:, axis].max() if kind == "max" else pts[:, axis].min())
        return None

    head_top = region("head", 2, "max") or (lo[2] + bb.size[2] * _BODY_FALLBACK_FRACTIONS["head_top"])
    torso_front = region("torso", 0, "max") or hi[0]
    torso_back = region("torso", 0, "min") or lo[0]
    side_y = max(region("arms", 1, "max") or hi[1], region("torso", 1, "max") or hi[1])
    # tall objects placed low are ground-clamped and reach torso heights, so the
    # legs anchor sits on the whole-body front plane rather than the shin line
    legs_front = max(region("legs", 0, "max") or hi[0], torso_front)
    chest_z = lo[2] + bb.size[2] * _BODY_FALLBACK_FRACTIONS["chest_z"]
    hip_z = lo[2] + bb.size[2] * _BODY_FALLBACK_FRACTIONS["hip_z"]
    shin_z = lo[2] + bb.size[2] * _BODY_FALLBACK_FRACTIONS["shin_z"]
    return {
        "on the head": (np.array([0.0, 0.0, head_top]), np.array([0.0, 0.0, 1.0])),
        "in front of the body": (np.array([torso_front, 0.0, chest_z]), np.array([1.0, 0.0, 0.0])),
        "on the back": (np.array([torso_back, 0.0, chest_z]), np.array([-1.0, 0.0, 0.0])),
        "at the side": (np.array([0.0, side_y, hip_z]), np.array([0.0, 1.0, 0.0])),
        "near the legs": (np.array([legs_front, 0.0, shin_z]), np.array([1.0, 0.0, 0.0])),
    }


def _attachment_pose(verb: str, anchor: np.ndarray, normal: np.ndarray,
                     obj_mesh: TriangleMesh, scale: float) -> Pose3D:
    """Attachment table: where the object's AABB goes relative to the anchor."""
    if verb == "wear":
        scale = scale * 0.9
    bb = mesh_aabb(obj_mesh)
    half = bb.size * scale / 2.0
    half_n = float(np.abs(normal) @ half)
    center = anchor + normal * half_n          # flush: surfaces touch at the anchor
    if verb == "hold":
        center = center + np.array([0.0, 0.0, 0.30])
    elif verb == "push":
        center = np.array([anchor[0] + 0.50, anchor[1], half[2]])
    elif verb == "drag":
        center = np.array([anchor[0] - 0.50 - half[0], anchor[1], half[2]])
    # keep the object above the ground plane
    if center[2] - half[2] < 0.0:
        center = center.copy()
        center[2] = half[2]
    return Pose3D(translation=center - bb.center * scale, yaw=0.0, scale=scale)


def generate_composition(t: VopTriplet, pool: ObjectPool, ped: TriangleMesh,
                         vocab: Vocabulary | None = None) -> TriangleMesh:
    """Pedestrian plus the posed object, as one mesh.

    The pedestrian's triangles come first and are bit-identical to the input;
    object triangles are tagged "none". Without an explicit vocabulary the
    triplet indexes the default verbs/poses and the pool's own object names.
    """
    if vocab is None:
        vocab = Vocabulary(DEFAULT_VERBS, pool.names(), DEFAULT_POSES)
    verb, obj, pose_phrase = t.words(vocab)
    return compose_human_object(verb, obj, pose_phrase, pool, ped)


def _resolve_pose(anchors: dict, pose_phrase: str):
    if pose_phrase in anchors:
        return anchors[pose_phrase]
    for key, name in (("head", "on the head"), ("back", "on the back"),
                      ("side", "at the side"), ("leg", "near the legs")):
        if key in pose_phrase:
            return anchors[name]
    return anchors["in front of the body"]


def compose_human_object(verb: str, object_name: str, pose_phrase: str,
                         pool: ObjectPool, ped: TriangleMesh) -> TriangleMesh:
    entry = pool.get(object_name)
    anchors = _body_anchors(ped)
    anchor, normal = _resolve_pose(anchors, pose_phrase)
    pose = _attachment_pose(verb, anchor, normal, entry.mesh, entry.default_scale)
    placed = transform_mesh(entry.mesh, pose)
    placed = TriangleMesh(placed.vertices, placed.triangles, placed.reflectance,
                          np.full(placed.n_triangles, "none", dtype="U8"))
    ped_tagged = ped if ped.tags is not None else TriangleMesh(
        ped.vertices, ped.triangles, ped.reflectance,
        np.full(ped.n_triangles, "none", dtype="U8"))
    return merge_meshes([ped_tagged, placed])


# --- manifests -------------------------------------------------------------------

def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), sort_keys=True, indent=1))


def load_vocabulary(path: str | Path) -> Vocabulary:
    return Vocabulary.from_json(json.loads(Path(path).read_text()))


def save_pool(pool: ObjectPool, directory: str | Path) -> Path:
    """Write pool meshes as OBJ files plus a manifest referencing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in pool.entries:
        stem = e.name.replace(" ", "_")
        save_obj(e.mesh, directory / f"{stem}.obj", sidecar=directory / f"{stem}.sidecar.json")
        entries.append({"name": e.name, "obj": f"{stem}.obj",
                        "sidecar": f"{stem}.sidecar.json",
                        "default_scale": e.default_scale, "anchor_hint": e.anchor_hint})
    manifest = directory / "pool.json"
    manifest.write_text(json.dumps({"entries": entries}, sort_keys=True, indent=1))
    return manifest


def load_pool(manifest_path: str | Path) -> ObjectPool:
    manifest_path = Path(manifest_path)
    data = json.loads(manifest_path.read_text())
    entries = []
    for e in data["entries"]:
        mesh = load_obj(manifest_path.parent / e["obj"],
                        sidecar=manifest_path.parent / e["sidecar"] if "sidecar" in e else None)
        entries.append(PoolEntry(name=e["name"], mesh=mesh,
                                 default_scale=float(e.get("default_scale", 1.0)),
                                 anchor_hint=e.get("anchor_hint", "upright")))
    return ObjectPool(tuple(entries))
