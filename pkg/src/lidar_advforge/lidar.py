"""Spinning multi-beam LiDAR simulator over a BVH-indexed triangle scene.

Two query paths share one Moller-Trumbore kernel and one hit-selection rule
(nearest t in (1e-4, max_range], ties broken by lowest (mesh id, triangle id)):

  * ``ray_cast``  - single-ray BVH traversal, used for ad-hoc queries.
  * ``scan``      - whole ray grids at once. Each triangle is bounded by a view
    cone from the (possibly moving) sensor and rasterized into the small
    (beam, column) rectangle it can possibly cover, so only candidate pairs are
    intersected. The candidate set is conservative by construction, hence scans
    are bit-identical to casting every ray exhaustively.

Range noise and dropout draw from a counter-based hash of
(seed, frame, column, beam), which makes scans deterministic, independent of
evaluation order, and identical for the same ray across different scenes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh

RAY_EPS = 1e-4          # hits closer than this are ignored
DET_EPS = 1e-9          # |det| below this counts as parallel -> miss
FRAME_DT = 0.1          # seconds per full sweep / per frame
INTENSITY_REF_RANGE = 10.0


class EmptySceneError(ValueError):
    pass


class UnnormalizedDirectionError(ValueError):
    pass


@dataclass(frozen=True)
class LidarConfig:
    beams: int = 64
    elevation_fov: tuple[float, float] = (-25.0, 15.0)   # degrees (min, max)
    azimuth_step: float = 0.2                            # degrees
    max_range: float = 120.0                             # meters
    origin: tuple[float, float, float] = (0.0, 0.0, 1.8)
    noise_sigma: float = 0.01                            # meters along the ray
    dropout_prob: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if not self.azimuth_step > 0:
            raise ValueError("azimuth_step must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")
        lo, hi = self.elevation_fov
        if not lo < hi:
            raise ValueError("elevation_fov min must be < max")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def n_columns(self) -> int:
        return int(math.ceil(360.0 / self.azimuth_step))

    def beam_elevations_rad(self) -> np.ndarray:
        lo, hi = self.elevation_fov
        if self.beams == 1:
            return np.array([math.radians((lo + hi) / 2.0)])
        return np.radians(np.linspace(lo, hi, self.beams))

    def column_azimuths_rad(self) -> np.ndarray:
        return np.radians(np.arange(self.n_columns) * self.azimuth_step)

    def to_json(self) -> dict:
        return {
            "beams": self.beams,
            "elevation_fov": list(self.elevation_fov),
            "azimuth_step": self.azimuth_step,
            "max_range": self.max_range,
            "origin": list(self.origin),
            "noise_sigma": self.noise_sigma,
            "dropout_prob": self.dropout_prob,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "LidarConfig":
        return LidarConfig(
            beams=int(obj.get("beams", 64)),
            elevation_fov=tuple(obj.get("elevation_fov", (-25.0, 15.0))),
            azimuth_step=float(obj.get("azimuth_step", 0.2)),
            max_range=float(obj.get("max_range", 120.0)),
            origin=tuple(obj.get("origin", (0.0, 0.0, 1.8))),
            noise_sigma=float(obj.get("noise_sigma", 0.01)),
            dropout_prob=float(obj.get("dropout_prob", 0.02)),
            seed=int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class PointCloud:
    """Array of (x, y, z, intensity, weight) samples.

    ``weight`` carries soft-mixture mass and is 1.0 for ordinary scan points.
    Provenance arrays (mesh/triangle/ray ids) are attached by the simulator so
    downstream code can tell target returns from environment returns; they are
    not part of the serialized record format.
    """

    points: np.ndarray                      # (n, 5) float64
    mesh_ids: np.ndarray | None = None      # (n,) int32
    tri_ids: np.ndarray | None = None       # (n,) int32
    ray_ids: np.ndarray | None = None       # (n,) int64, beam-major linear ray index

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64)).reshape(-1, 5)
        if pts.size:
            if not np.all(np.isfinite(pts)):
                raise ValueError("point cloud contains non-finite values")
            if pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0:
                raise ValueError("intensity must lie in [0, 1]")
            if pts[:, 4].min() < 0.0 or pts[:, 4].max() > 1.0:
                raise ValueError("weight must lie in [0, 1]")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        for name in ("mesh_ids", "tri_ids", "ray_ids"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.ascontiguousarray(arr)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def weights(self) -> np.ndarray:
        return self.points[:, 4]


def concat_clouds(clouds: list[PointCloud]) -> PointCloud:
    clouds = [c for c in clouds if len(c)]
    if not clouds:
        return PointCloud(np.zeros((0, 5)))
    has_prov = all(c.mesh_ids is not None for c in clouds)
    return PointCloud(
        np.concatenate([c.points for c in clouds]),
        mesh_ids=np.concatenate([c.mesh_ids for c in clouds]) if has_prov else None,
        tri_ids=np.concatenate([c.tri_ids for c in clouds]) if has_prov else None,
        ray_ids=np.concatenate([c.ray_ids for c in clouds])
        if all(c.ray_ids is not None for c in clouds) else None,
    )


# --- counter-based noise ------------------------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)).astype(np.uint64)
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)).astype(np.uint64)
    return x ^ (x >> np.uint64(31))


def _hash_u01(seed: int, frame: int, column: np.ndarray, beam: np.ndarray, channel: int) -> np.ndarray:
    """Uniform (0, 1) draw keyed by (seed, frame, column, beam, channel)."""
    h = np.full(np.broadcast(column, beam).shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    h = _splitmix64(h ^ np.uint64((frame & 0xFFFFFFFF) | (channel << 32)))
    h = _splitmix64(h ^ column.astype(np.uint64))
    h = _splitmix64(h ^ (beam.astype(np.uint64) << np.uint64(20)))
    # 53-bit mantissa, shifted into (0, 1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def _hash_normal(seed: int, frame: int, column: np.ndarray, beam: np.ndarray) -> np.ndarray:
    u1 = _hash_u01(seed, frame, column, beam, channel=0)
    u2 = _hash_u01(seed, frame, column, beam, channel=1)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


# --- BVH ----------------------------------------------------------------------

_LEAF_SIZE = 8


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    mesh_id: int
    tri_id: int
    incidence_cos: float


class Bvh:
    """Acceleration index over the triangles of a list of meshes.

    Triangle provenance is (index of the source mesh in the input list,
    triangle index within that mesh). Immutable after construction.
    """

    def __init__(self, meshes: list[TriangleMesh]):
        if not meshes or all(m.n_triangles == 0 for m in meshes):
            raise EmptySceneError("scene has no triangles")
        self.meshes = list(meshes)
        corners, mesh_ids, tri_ids, refl = [], [], [], []
        for mid, mesh in enumerate(meshes):
            if mesh.n_triangles == 0:
                continue
            corners.append(mesh.triangle_corners())
            mesh_ids.append(np.full(mesh.n_triangles, mid, dtype=np.int32))
            tri_ids.append(np.arange(mesh.n_triangles, dtype=np.int32))
            refl.append(mesh.reflectance)
        co = np.concatenate(corners)
        self.v0 = np.ascontiguousarray(co[:, 0])
        self.e1 = np.ascontiguousarray(co[:, 1] - co[:, 0])
        self.e2 = np.ascontiguousarray(co[:, 2] - co[:, 0])
        normal = np.cross(self.e1, self.e2)
        self.normals = normal / np.linalg.norm(normal, axis=1, keepdims=True)
        self.mesh_ids = np.concatenate(mesh_ids)
        self.tri_ids = np.concatenate(tri_ids)
        self.reflectance = np.concatenate(refl)
        self.centroids = co.mean(axis=1)
        self.radii = np.linalg.norm(co - self.centroids[:, None, :], axis=2).max(axis=1)
        self._tri_lo = co.min(axis=1)
        self._tri_hi = co.max(axis=1)
        self._build_tree()

    @property
    def n_triangles(self) -> int:
        return len(self.v0)

    def _build_tree(self):
        n = self.n_triangles
        order = np.arange(n)
        node_lo, node_hi, node_left, node_start, node_count = [], [], [], [], []

        def build(idx: np.ndarray) -> int:
            node = len(node_lo)
            lo = self._tri_lo[idx].min(axis=0)
            hi = self._tri_hi[idx].max(axis=0)
            node_lo.append(lo)
            node_hi.append(hi)
            node_left.append(-1)
            node_start.append(-1)
            node_count.append(0)
            if len(idx) <= _LEAF_SIZE:
                node_start[node] = len(leaf_order)
                node_count[node] = len(idx)
                leaf_order.extend(idx.tolist())
                return node
            axis = int(np.argmax(hi - lo))
            med = np.argsort(self.centroids[idx, axis], kind="stable")
            half = len(idx) // 2
            build(idx[med[:half]])             # left child sits at node + 1
            node_left[node] = len(node_lo)     # right child starts here
            build(idx[med[half:]])
            return node

        leaf_order: list[int] = []
        build(order)
        self.node_lo = np.asarray(node_lo)
        self.node_hi = np.asarray(node_hi)
        self.node_right = np.asarray(node_left, dtype=np.int64)
        self.node_start = np.asarray(node_start, dtype=np.int64)
        self.node_count = np.asarray(node_count, dtype=np.int64)
        self.leaf_tris = np.asarray(leaf_order, dtype=np.int64)

    # -- single-ray traversal --

    def ray_cast(self, origin, direction, max_range: float) -> Hit | None:
        origin = np.asarray(origin, dtype=np.float64).reshape(3)
        direction = np.asarray(direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(direction)
        if abs(norm - 1.0) > 1e-6:
            raise UnnormalizedDirectionError(f"|direction| = {norm:.8f}, expected 1")
        inv = np.where(direction != 0.0, 1.0 / np.where(direction == 0.0, 1.0, direction), np.inf)
        best_t = np.inf
        best_mesh = best_tri = -1
        best_cos = 0.0
        stack = [0]
        while stack:
            node = stack.pop()
            t0 = (self.node_lo[node] - origin) * inv
            t1 = (self.node_hi[node] - origin) * inv
            tmin = np.minimum(t0, t1).max()
            tmax = np.maximum(t0, t1).min()
            if tmax < max(tmin, 0.0) or tmin > min(best_t, max_range):
                continue
            cnt = self.node_count[node]
            if cnt > 0:
                tris = self.leaf_tris[self.node_start[node]: self.node_start[node] + cnt]
                t, ok = moller_trumbore(
                    origin[None, :], direction[None, :],
                    self.v0[tris], self.e1[tris], self.e2[tris],
                )
                ok &= (t > RAY_EPS) & (t <= max_range)
                for j in np.flatnonzero(ok):
                    tj = float(t[j])
                    prov = (int(self.mesh_ids[tris[j]]), int(self.tri_ids[tris[j]]))
                    if tj < best_t or (tj == best_t and prov < (best_mesh, best_tri)):
                        best_t = tj
                        best_mesh, best_tri = prov
                        best_cos = float(-np.dot(direction, self.normals[tris[j]]))
            else:
                right = int(self.node_right[node])
                stack.append(right)
                stack.append(node + 1)
        if not np.isfinite(best_t):
            return None
        return Hit(
            t=best_t, point=origin + best_t * direction,
            mesh_id=best_mesh, tri_id=best_tri, incidence_cos=best_cos,
        )


def _cross_cols(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


def moller_trumbore(origins, directions, v0, e1, e2):
    """Batched ray-triangle intersection; arrays broadcast elementwise.

    Returns (t, valid). Rays parallel to the triangle plane (|det| < 1e-9) miss.
    Edge hits (u or v exactly 0 or u+v exactly 1) count as hits.

    Cross/dot products are unrolled by column: on large batches this is several
    times faster than np.cross and keeps a single allocation per component.
    """
    dx, dy, dz = directions[..., 0], directions[..., 1], directions[..., 2]
    e1x, e1y, e1z = e1[..., 0], e1[..., 1], e1[..., 2]
    e2x, e2y, e2z = e2[..., 0], e2[..., 1], e2[..., 2]
    px, py, pz = _cross_cols(dx, dy, dz, e2x, e2y, e2z)
    det = e1x * px + e1y * py + e1z * pz
    ok = np.abs(det) >= DET_EPS
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tx = origins[..., 0] - v0[..., 0]
    ty = origins[..., 1] - v0[..., 1]
    tz = origins[..., 2] - v0[..., 2]
    u = (tx * px + ty * py + tz * pz) * inv_det
    qx, qy, qz = _cross_cols(tx, ty, tz, e1x, e1y, e1z)
    v = (dx * qx + dy * qy + dz * qz) * inv_det
    t = (e2x * qx + e2y * qy + e2z * qz) * inv_det
    ok &= (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0)
    return t, ok


def build_bvh(meshes: list[TriangleMesh]) -> Bvh:
    return Bvh(meshes)


def ray_cast(bvh: Bvh, origin, direction, max_range: float) -> Hit | None:
    return bvh.ray_cast(origin, direction, max_range)


def intensity_model(hit: Hit, reflectance: float) -> float:
    """Lambertian x inverse-square return intensity, clamped to [0, 1]."""
    if not hit.t > 0:
        raise ValueError("hit range must be positive")
    value = reflectance * max(0.0, hit.incidence_cos) * (INTENSITY_REF_RANGE / hit.t) ** 2
    return min(max(value, 0.0), 1.0)


def _intensity_values(reflectance, incidence_cos, t):
    value = reflectance * np.maximum(0.0, incidence_cos) * (INTENSITY_REF_RANGE / t) ** 2
    return np.clip(value, 0.0, 1.0)


_PAIR_CHUNK = 4_000_000


def _candidate_rectangles(bvh: Bvh, cfg: LidarConfig, mid_origin: np.ndarray, half_travel: float):
    """Conservative (beam, column) index rectangles per triangle.

    Bounds each triangle by a sphere, the sensor path by a segment, and the set
    of hitting directions by a cone; the cone maps to an elevation band plus an
    azimuth band (full wrap when the cone reaches a pole). Never misses a true
    intersection; may include extra candidate rays.
    """
    c = bvh.centroids - mid_origin
    d = np.linalg.norm(c, axis=1)
    d_min = d - half_travel
    reach = d_min - bvh.radii  # lower bound on any hit range
    alive = reach <= cfg.max_range
    theta = np.full(len(d), np.pi)
    near = d_min <= bvh.radii + 1e-9
    far = ~near
    with np.errstate(invalid="ignore"):
        theta[far] = (
            np.arcsin(np.clip(bvh.radii[far] / d_min[far], 0.0, 1.0))
            + np.arcsin(np.clip(half_travel / np.maximum(d[far], 1e-12), 0.0, 1.0))
            + 1e-6
        )
    elev_c = np.arcsin(np.clip(c[:, 2] / np.maximum(d, 1e-12), -1.0, 1.0))
    azim_c = np.arctan2(c[:, 1], c[:, 0])

    elevs = cfg.beam_elevations_rad()
    n_beams, n_cols = cfg.beams, cfg.n_columns
    step = math.radians(cfg.azimuth_step)

    full = near | (theta >= math.pi / 2.0)
    elev_lo = np.where(full, elevs[0], elev_c - theta)
    elev_hi = np.where(full, elevs[-1], elev_c + theta)
    # beams are uniformly spaced; beams == 1 handled by clipping below
    if n_beams > 1:
        de = (elevs[-1] - elevs[0]) / (n_beams - 1)
        b_lo = np.ceil((elev_lo - elevs[0]) / de - 1e-9).astype(np.int64)
        b_hi = np.floor((elev_hi - elevs[0]) / de + 1e-9).astype(np.int64)
    else:
        inside = (elev_lo <= elevs[0] + 1e-12) & (elev_hi >= elevs[0] - 1e-12)
        b_lo = np.where(inside, 0, 1).astype(np.int64)
        b_hi = np.where(inside, 0, 0).astype(np.int64)
    b_lo = np.clip(b_lo, 0, n_beams - 1)
    b_hi = np.clip(b_hi, -1, n_beams - 1)

    # azimuth extent of a cone: full wrap if it can contain a pole
    pole = full | (theta + np.abs(elev_c) >= math.pi / 2.0 - 1e-9)
    with np.errstate(invalid="ignore"):
        dphi = np.arcsin(np.clip(np.sin(theta) / np.maximum(np.cos(elev_c), 1e-12), 0.0, 1.0)) + 1e-6
    k_lo = np.where(pole, 0, np.ceil((azim_c - dphi) / step - 1e-9)).astype(np.int64)
    k_hi = np.where(pole, n_cols - 1, np.floor((azim_c + dphi) / step + 1e-9)).astype(np.int64)
    k_hi = np.minimum(k_hi, k_lo + n_cols - 1)

    keep = alive & (b_hi >= b_lo) & (k_hi >= k_lo)
    return keep, b_lo, b_hi, k_lo, k_hi


def _reduce_best(ray, t, tri_order, best_t, best_tri):
    """Merge candidate hits into per-ray running best under the selection rule."""
    if not len(ray):
        return
    order = np.lexsort((tri_order, t, ray))
    ray_s, t_s, tr_s = ray[order], t[order], tri_order[order]
    first = np.ones(len(ray_s), dtype=bool)
    first[1:] = ray_s[1:] != ray_s[:-1]
    ray_f, t_f, tr_f = ray_s[first], t_s[first], tr_s[first]
    cur_t = best_t[ray_f]
    cur_tr = best_tri[ray_f]
    better = (t_f < cur_t) | ((t_f == cur_t) & (tr_f < cur_tr))
    best_t[ray_f[better]] = t_f[better]
    best_tri[ray_f[better]] = tr_f[better]


def _scan_grid(bvh: Bvh, cfg: LidarConfig, frame: int, velocity: float) -> PointCloud:
    """One full sweep. The sensor advances along +x by velocity * column time."""
    elevs = cfg.beam_elevations_rad()
    azims = cfg.column_azimuths_rad()
    n_beams, n_cols = cfg.beams, cfg.n_columns
    base = np.asarray(cfg.origin, dtype=np.float64) + np.array(
        [velocity * frame * FRAME_DT, 0.0, 0.0]
    )
    col_dx = velocity * (np.arange(n_cols) / n_cols) * FRAME_DT
    travel = velocity * FRAME_DT
    mid_origin = base + np.array([travel / 2.0, 0.0, 0.0])

    dir_cos_e = np.cos(elevs)
    sin_e = np.sin(elevs)
    cos_a, sin_a = np.cos(azims), np.sin(azims)

    # provenance order for tie-breaking: sort triangles by (mesh, tri) once
    prov_order = np.lexsort((bvh.tri_ids, bvh.mesh_ids))
    keep, b_lo, b_hi, k_lo, k_hi = _candidate_rectangles(bvh, cfg, mid_origin, abs(travel) / 2.0)

    n_rays = n_beams * n_cols
    best_t = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, 2**62, dtype=np.int64)  # provenance rank

    tri_sel = prov_order[keep[prov_order]]
    counts = (b_hi[tri_sel] - b_lo[tri_sel] + 1) * (k_hi[tri_sel] - k_lo[tri_sel] + 1)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    total = int(bounds[-1])

    pos = 0
    while pos < len(tri_sel):
        end = int(np.searchsorted(bounds, bounds[pos] + _PAIR_CHUNK, side="left"))
        end = min(max(end, pos + 1), len(tri_sel))
        chunk = tri_sel[pos:end]
        c_counts = counts[pos:end]
        c_total = int(c_counts.sum())
        rep = np.repeat(np.arange(len(chunk)), c_counts)
        offset = np.arange(c_total) - np.repeat(bounds[pos:end] - bounds[pos], c_counts)
        ncol_i = (k_hi[chunk] - k_lo[chunk] + 1)[rep]
        beam = b_lo[chunk][rep] + offset // ncol_i
        col = (k_lo[chunk][rep] + offset % ncol_i) % n_cols
        tri = chunk[rep]

        d = np.empty((c_total, 3))
        d[:, 0] = dir_cos_e[beam] * cos_a[col]
        d[:, 1] = dir_cos_e[beam] * sin_a[col]
        d[:, 2] = sin_e[beam]
        o = np.empty((c_total, 3))
        o[:, 0] = base[0] + col_dx[col]
        o[:, 1] = base[1]
        o[:, 2] = base[2]
        t, ok = moller_trumbore(o, d, bvh.v0[tri], bvh.e1[tri], bvh.e2[tri])
        ok &= (t > RAY_EPS) & (t <= cfg.max_range)
        if ok.any():
            ray_lin = beam[ok] * n_cols + col[ok]
            _reduce_best(ray_lin, t[ok], _prov_rank(bvh, tri[ok]), best_t, best_tri)
        pos = end

    hit = np.isfinite(best_t)
    ray_lin = np.flatnonzero(hit)
    if not len(ray_lin):
        return PointCloud(
            np.zeros((0, 5)),
            mesh_ids=np.zeros(0, dtype=np.int32),
            tri_ids=np.zeros(0, dtype=np.int32),
            ray_ids=np.zeros(0, dtype=np.int64),
        )
    beam = ray_lin // n_cols
    col = ray_lin % n_cols
    tri = _prov_unrank(bvh, best_tri[hit])
    t_true = best_t[hit]

    if cfg.dropout_prob > 0.0:
        u = _hash_u01(cfg.seed, frame, col, beam, channel=2)
        keep_pts = u >= cfg.dropout_prob
        ray_lin, beam, col, tri, t_true = (
            ray_lin[keep_pts], beam[keep_pts], col[keep_pts], tri[keep_pts], t_true[keep_pts]
        )
    r = t_true
    if cfg.noise_sigma > 0.0:
        r = t_true + cfg.noise_sigma * _hash_normal(cfg.seed, frame, col, beam)
        r = np.clip(r, 1e-6, cfg.max_range)

    d = np.empty((len(ray_lin), 3))
    d[:, 0] = dir_cos_e[beam] * cos_a[col]
    d[:, 1] = dir_cos_e[beam] * sin_a[col]
    d[:, 2] = sin_e[beam]
    o = np.empty_like(d)
    o[:, 0] = base[0] + col_dx[col]
    o[:, 1] = base[1]
    o[:, 2] = base[2]

    incid = -np.einsum("ij,ij->i", d, bvh.normals[tri])
    inten = _intensity_values(bvh.reflectance[tri], incid, t_true)

    pts = np.empty((len(ray_lin), 5))
    pts[:, :3] = o + d * r[:, None]
    pts[:, 3] = inten
    pts[:, 4] = 1.0

    # emit in sweep order: column-major, beams within a column
    order = np.lexsort((beam, col))
    return PointCloud(
        pts[order],
        mesh_ids=bvh.mesh_ids[tri[order]].astype(np.int32),
        tri_ids=bvh.tri_ids[tri[order]].astype(np.int32),
        ray_ids=ray_lin[order],
    )


def _prov_rank(bvh: Bvh, tri: np.ndarray) -> np.ndarray:
    """Dense ordering key equal to lexicographic (mesh id, triangle id)."""
    return bvh.mesh_ids[tri].astype(np.int64) * (2**31) + bvh.tri_ids[tri].astype(np.int64)


def _prov_unrank(bvh: Bvh, rank: np.ndarray) -> np.ndarray:
    if not hasattr(bvh, "_rank_to_tri"):
        ranks = bvh.mesh_ids.astype(np.int64) * (2**31) + bvh.tri_ids.astype(np.int64)
        order = np.argsort(ranks, kind="stable")
        object.__setattr__(bvh, "_rank_sorted", ranks[order])
        object.__setattr__(bvh, "_rank_to_tri", order)
    idx = np.searchsorted(bvh._rank_sorted, rank)
    return bvh._rank_to_tri[idx]


def scan(bvh: Bvh, cfg: LidarConfig) -> PointCloud:
    """One sweep from a static sensor; weight = 1.0 for every point."""
    return _scan_grid(bvh, cfg, frame=0, velocity=0.0)


def scan_sequence(
    bvh_per_frame: list[Bvh], cfg: LidarConfig, ego_velocity: float, n_frames: int
) -> list[PointCloud]:
    """Scan n_frames sweeps while the sensor moves along +x at ego_velocity.

    Frame k starts from the base origin advanced by k * 0.1 s * velocity, and
    the origin additionally advances per azimuth column within the sweep
    (rolling-shutter model).
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    if len(bvh_per_frame) < n_frames:
        raise ValueError("need one Bvh per frame")
    return [
        _scan_grid(bvh_per_frame[k], cfg, frame=k, velocity=float(ego_velocity))
        for k in range(n_frames)
    ]


# --- point-cloud files --------------------------------------------------------

def save_cloud(cloud: PointCloud, path: str | Path, cfg: LidarConfig | None = None,
               extra: dict | None = None) -> None:
    """Write KITTI-style float32 (x, y, z, intensity) records plus a JSON sidecar.

    The sidecar carries the config and seed, and per-point weights whenever any
    weight differs from 1.
    """
    path = Path(path)
    rec = np.ascontiguousarray(cloud.points[:, :4], dtype="<f4")
    path.write_bytes(rec.tobytes())
    side: dict = {"n_points": len(cloud)}
    if cfg is not None:
        side["config"] = cfg.to_json()
        side["seed"] = cfg.seed
    if len(cloud) and not np.all(cloud.weights == 1.0):
        side["weights"] = [float(w) for w in cloud.weights]
    if extra:
        side.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(side, sort_keys=True, indent=1)
    )


def load_cloud(path: str | Path) -> PointCloud:
    path = Path(path)
    rec = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(-1, 4).astype(np.float64)
    weights = np.ones(len(rec))
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        side = json.loads(sidecar.read_text())
        if "weights" in side:
            weights = np.asarray(side["weights"], dtype=np.float64)
    pts = np.concatenate([rec, weights[:, None]], axis=1)
    return PointCloud(pts)
