"""Small trainable BEV pedestrian detector with a hand-rolled gradient path.

The network topology is fixed so parameter files stay portable:
    3 BEV channels -> conv3x3(8) ReLU -> conv3x3(16) ReLU
    -> 1x1 sigmoid objectness head
    -> 1x1 box head (dx, dy, dz, log l, log w, log h, yaw)

Featurization is differentiable with respect to point weights and intensities,
which is the gradient path the adversarial optimizer consumes: per-cell
channels are the weighted count, a temperature-0.1 softmax over point heights,
and the weighted mean intensity.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Box3D, iou3d
from .lidar import LidarConfig, PointCloud
from ._parallel import pmap

SOFT_TEMP = 0.1
FEAT_EPS = 1e-6

# box decode bounds; they also bound how far a gated cell can sit from the
# ground-truth center (see matched_confidence)
XY_OFFSET_BOUND = 2.0           # meters, via tanh
LOG_SIZE_BOUND = math.log(2.0)  # sizes within [prior/2, prior*2]
SIZE_PRIOR = (0.6, 0.6, 1.75)
Z_PRIOR = 0.9

PARAMS_MAGIC = b"LAFD"
PARAMS_VERSION = 1

_LAYERS = (
    ("w1", (3, 3, 3, 8)), ("b1", (8,)),
    ("w2", (3, 3, 8, 16)), ("b2", (16,)),
    ("wo", (16, 1)), ("bo", (1,)),
    ("wb", (16, 7)), ("bb", (7,)),
)


class DivergedTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """BEV raster over a fixed world-frame extent."""

    x_min: float = 0.0
    x_max: float = 50.0
    y_min: float = -25.0
    y_max: float = 25.0
    cell: float = 0.25

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    def cell_center_x(self, ix) -> np.ndarray:
        return self.x_min + (np.asarray(ix) + 0.5) * self.cell

    def cell_center_y(self, iy) -> np.ndarray:
        return self.y_min + (np.asarray(iy) + 0.5) * self.cell

    def to_json(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "cell": self.cell}

    @staticmethod
    def from_json(obj: dict) -> "GridSpec":
        return GridSpec(**obj)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    confidence: float


# --- featurization --------------------------------------------------------------

class FeatureMap:
    """BEV channels plus the per-point context needed to backpropagate."""

    def __init__(self, grid: GridSpec, values: np.ndarray, lin: np.ndarray,
                 in_extent: np.ndarray, w: np.ndarray, inten: np.ndarray,
                 expz: np.ndarray, z: np.ndarray,
                 sum_w: np.ndarray, sum_a: np.ndarray):
        self.grid = grid
        self.values = values      # (nx, ny, 3)
        self._lin = lin           # cell index per in-extent point
        self._in_extent = in_extent
        self._w = w
        self._inten = inten
        self._expz = expz
        self._z = z
        self._sum_w = sum_w       # flat per-cell sums
        self._sum_a = sum_a

    def backward_to_weights(self, grad: np.ndarray) -> np.ndarray:
        """Map d(loss)/d(values) to d(loss)/d(point weight); out-of-extent
        points get exactly zero."""
        g = grad.reshape(-1, 3)
        out = np.zeros(len(self._in_extent))
        if not len(self._lin):
            return out
        lin = self._lin
        flat = self.values.reshape(-1, 3)
        mean_i = flat[lin, 2]
        maxh = flat[lin, 1]
        d = (
            g[lin, 0]
            + g[lin, 2] * (self._inten - mean_i) / (self._sum_w[lin] + FEAT_EPS)
            + g[lin, 1] * self._expz * (self._z - maxh) / (self._sum_a[lin] + FEAT_EPS)
        )
        out[self._in_extent] = d
        return out


def _cloud_arrays(cloud) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(cloud, PointCloud):
        return cloud.xyz, cloud.intensity, cloud.weights
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 5)
    return pts[:, :3], pts[:, 3], pts[:, 4]


def featurize(cloud, grid: GridSpec) -> FeatureMap:
    """Scatter points into the BEV raster.

    Channels: 0 = weighted count, 1 = soft max height (temperature 0.1,
    weight-scaled), 2 = weighted mean intensity. Accepts a PointCloud or a raw
    (n, 5) array; weights of 0 are legal here and contribute nothing while
    keeping their gradient defined.
    """
    xyz, inten, w = _cloud_arrays(cloud)
    nx, ny = grid.nx, grid.ny
    n_cells = nx * ny
    if not len(xyz):
        vals = np.zeros((nx, ny, 3))
        z0 = np.zeros(0)
        return FeatureMap(grid, vals, z0.astype(np.int64), np.zeros(0, dtype=bool),
                          z0, z0, z0, z0, np.zeros(n_cells), np.zeros(n_cells))
    ix = np.floor((xyz[:, 0] - grid.x_min) / grid.cell).astype(np.int64)
    iy = np.floor((xyz[:, 1] - grid.y_min) / grid.cell).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    lin = (ix[ok] * ny + iy[ok])
    wk, ik, zk = w[ok], inten[ok], xyz[ok, 2]
    expz = np.exp(zk / SOFT_TEMP)
    sum_w = np.bincount(lin, weights=wk, minlength=n_cells)
    sum_wi = np.bincount(lin, weights=wk * ik, minlength=n_cells)
    sum_a = np.bincount(lin, weights=wk * expz, minlength=n_cells)
    sum_b = np.bincount(lin, weights=wk * expz * zk, minlength=n_cells)
    vals = np.stack([
        sum_w,
        sum_b / (sum_a + FEAT_EPS),
        sum_wi / (sum_w + FEAT_EPS),
    ], axis=1).reshape(nx, ny, 3)
    return FeatureMap(grid, vals, lin, ok, wk, ik, expz, zk, sum_w, sum_a)


# --- network -------------------------------------------------------------------

# fixed input preprocessing: log-compress counts, rescale heights/intensity
def _preprocess(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    out = np.empty_like(x)
    out[..., 0] = np.log1p(x[..., 0])
    out[..., 1] = 0.5 * x[..., 1]
    out[..., 2] = 1.5 * x[..., 2]
    dpre = np.empty_like(x)
    dpre[..., 0] = 1.0 / (1.0 + x[..., 0])
    dpre[..., 1] = 0.5
    dpre[..., 2] = 1.5
    return out, dpre


def _im2col(x: np.ndarray) -> np.ndarray:
    """(nx, ny, ci) -> (nx*ny, 9*ci) patch matrix for a padded 3x3 window."""
    nx, ny, ci = x.shape
    xp = np.zeros((nx + 2, ny + 2, ci))
    xp[1:-1, 1:-1] = x
    s = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, shape=(nx, ny, 3, 3, ci), strides=(s[0], s[1], s[0], s[1], s[2]),
        writeable=False,
    )
    return patches.reshape(nx * ny, 9 * ci)


def _conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                     cols: np.ndarray | None = None) -> np.ndarray:
    nx, ny, ci = x.shape
    co = w.shape[3]
    if cols is None:
        cols = _im2col(x)
    return (cols @ w.reshape(9 * ci, co) + b).reshape(nx, ny, co)


def _conv3x3_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray,
                      need_dx: bool, need_dw: bool, cols: np.ndarray | None = None):
    nx, ny, ci = x.shape
    co = w.shape[3]
    dy2 = dy.reshape(-1, co)
    dx = dw = db = None
    if need_dx:
        dxp = np.zeros((nx + 2, ny + 2, ci))
        for ky in range(3):
            for kx in range(3):
                dxp[ky:ky + nx, kx:kx + ny] += (dy2 @ w[ky, kx].T).reshape(nx, ny, ci)
        dx = dxp[1:-1, 1:-1]
    if need_dw:
        if cols is None:
            cols = _im2col(x)
        dw = (cols.T @ dy2).reshape(3, 3, ci, co)
        db = dy2.sum(axis=0)
    return dx, dw, db


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _net_forward(weights: dict, features: np.ndarray) -> dict:
    x, dpre = _preprocess(features)
    cols1 = _im2col(x)
    h1 = np.maximum(_conv3x3_forward(x, weights["w1"], weights["b1"], cols1), 0.0)
    cols2 = _im2col(h1)
    h2 = np.maximum(_conv3x3_forward(h1, weights["w2"], weights["b2"], cols2), 0.0)
    flat = h2.reshape(-1, h2.shape[2])
    logit = (flat @ weights["wo"] + weights["bo"]).reshape(h2.shape[0], h2.shape[1])
    braw = (flat @ weights["wb"] + weights["bb"]).reshape(h2.shape[0], h2.shape[1], 7)
    return {"x": x, "dpre": dpre, "cols1": cols1, "cols2": cols2, "h1": h1, "h2": h2,
            "logit": logit, "conf": _sigmoid(logit), "braw": braw}


def _net_backward(weights: dict, cache: dict, d_logit: np.ndarray,
                  d_braw: np.ndarray | None, need_dinput: bool, need_dparams: bool):
    h2 = cache["h2"]
    nx, ny, c2 = h2.shape
    flat2 = h2.reshape(-1, c2)
    dl = d_logit.reshape(-1, 1)
    dh2 = (dl @ weights["wo"].T)
    grads: dict = {}
    if need_dparams:
        grads["wo"] = flat2.T @ dl
        grads["bo"] = dl.sum(axis=0)
    if d_braw is not None:
        db = d_braw.reshape(-1, 7)
        dh2 = dh2 + db @ weights["wb"].T
        if need_dparams:
            grads["wb"] = flat2.T @ db
            grads["bb"] = db.sum(axis=0)
    elif need_dparams:
        grads["wb"] = np.zeros_like(weights["wb"])
        grads["bb"] = np.zeros_like(weights["bb"])
    dh2 = dh2.reshape(nx, ny, c2) * (h2 > 0.0)
    dh1, dw2, db2 = _conv3x3_backward(dh2, cache["h1"], weights["w2"],
                                      need_dx=True, need_dw=need_dparams,
                                      cols=cache["cols2"])
    if need_dparams:
        grads["w2"], grads["b2"] = dw2, db2
    dh1 = dh1 * (cache["h1"] > 0.0)
    dx, dw1, db1 = _conv3x3_backward(dh1, cache["x"], weights["w1"],
                                     need_dx=need_dinput, need_dw=need_dparams,
                                     cols=cache["cols1"])
    if need_dparams:
        grads["w1"], grads["b1"] = dw1, db1
    dinput = dx * cache["dpre"] if need_dinput else None
    return dinput, grads


def decode_boxes(braw: np.ndarray, grid: GridSpec, ix0: int = 0, iy0: int = 0) -> dict:
    """Map raw box-head outputs to world-frame box parameters (vectorized)."""
    nx, ny = braw.shape[:2]
    cx = grid.cell_center_x(np.arange(ix0, ix0 + nx))[:, None]
    cy = grid.cell_center_y(np.arange(iy0, iy0 + ny))[None, :]
    out = {
        "cx": cx + XY_OFFSET_BOUND * np.tanh(braw[..., 0] / XY_OFFSET_BOUND),
        "cy": cy + XY_OFFSET_BOUND * np.tanh(braw[..., 1] / XY_OFFSET_BOUND),
        "cz": Z_PRIOR + braw[..., 2],
        "yaw": braw[..., 6],
    }
    for k, name in enumerate(("l", "w", "h")):
        out[name] = SIZE_PRIOR[k] * np.exp(
            LOG_SIZE_BOUND * np.tanh(braw[..., 3 + k] / LOG_SIZE_BOUND))
    return out


def _box_at(dec: dict, i: int, j: int) -> Box3D:
    return Box3D(
        center=[dec["cx"][i, j], dec["cy"][i, j], dec["cz"][i, j]],
        size=[dec["l"][i, j], dec["w"][i, j], dec["h"][i, j]],
        yaw=float(dec["yaw"][i, j]),
    )


# --- parameters ------------------------------------------------------------------

def _topology_hash() -> str:
    blob = json.dumps([[n, list(s)] for n, s in _LAYERS]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class DetectorParams:
    """Trained weights plus the BEV grid they were trained for."""

    weights: dict
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        chunks = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION),
                  _topology_hash().encode()]
        for name, shape in _LAYERS:
            arr = np.ascontiguousarray(self.weights[name], dtype="<f4")
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            chunks.append(arr.tobytes())
        path.write_bytes(b"".join(chunks))
        meta = dict(self.meta)
        meta["grid"] = self.grid.to_json()
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(meta, sort_keys=True, indent=1))

    @staticmethod
    def load(path: str | Path) -> "DetectorParams":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != PARAMS_MAGIC:
            raise ValueError("not a detector parameters file")
        (version,) = struct.unpack("<I", blob[4:8])
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported params version {version}")
        topo = blob[8:24].decode()
        if topo != _topology_hash():
            raise ValueError("parameters were written for a different topology")
        off = 24
        weights = {}
        for name, shape in _LAYERS:
            n = int(np.prod(shape))
            weights[name] = np.frombuffer(
                blob, dtype="<f4", count=n, offset=off
            ).astype(np.float64).reshape(shape)
            off += 4 * n
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        grid = GridSpec.from_json(meta.pop("grid"))
        return DetectorParams(weights=weights, grid=grid, meta=meta)


def init_weights(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in _LAYERS:
        if name.startswith("w"):
            fan_in = int(np.prod(shape[:-1]))
            w[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        else:
            w[name] = np.zeros(shape)
    w["bo"][:] = -4.0   # calibrated so an empty grid yields no detections
    return w


# --- detection -------------------------------------------------------------------

NMS_BEV_IOU = 0.3
DEFAULT_CONF_THRESHOLD = 0.5


def detect(cloud, params: DetectorParams, conf_threshold: float = DEFAULT_CONF_THRESHOLD
           ) -> list[Detection]:
    """Full-grid detection: featurize, score, threshold, BEV NMS at IoU 0.3.

    Returns world-frame detections sorted by descending confidence.
    """
    fm = featurize(cloud, params.grid)
    cache = _net_forward(params.weights, fm.values)
    conf = cache["conf"]
    dec = decode_boxes(cache["braw"], params.grid)
    ii, jj = np.nonzero(conf >= conf_threshold)
    if not len(ii):
        return []
    order = np.lexsort((jj, ii, -conf[ii, jj]))
    from .geometry import bev_iou
    kept: list[Detection] = []
    boxes: list[Box3D] = []
    for k in order:
        cand = _box_at(dec, ii[k], jj[k])
        if any(bev_iou(cand, b) > NMS_BEV_IOU for b in boxes):
            continue
        boxes.append(cand)
        kept.append(Detection(box=cand, confidence=float(conf[ii[k], jj[k]])))
    return kept


def gate_radius(gt: Box3D) -> float:
    """Upper bound on the BEV distance between the gt center and any cell whose
    decoded box can overlap the gt at all, given the decode bounds."""
    max_diag = math.hypot(SIZE_PRIOR[0] * 2.0, SIZE_PRIOR[1] * 2.0)
    gt_diag = math.hypot(float(gt.size[0]), float(gt.size[1]))
    return XY_OFFSET_BOUND + 0.5 * (max_diag + gt_diag) + 0.5


def matched_confidence(fm: FeatureMap, params: DetectorParams, gt: Box3D | None,
                       delta: float = 0.5):
    """Highest objectness among cells whose decoded box has IoU(gt) > delta,
    evaluated on a gt-centered window that provably contains every cell able to
    pass the gate. With gt=None the gate is dropped (global max confidence).

    Returns (confidence or None, (i, j) argmax cell, forward cache, window origin).
    """
    grid = params.grid
    if gt is None:
        ix0 = iy0 = 0
        feats = fm.values
    else:
        r = gate_radius(gt)
        ix0 = max(int((gt.center[0] - r - grid.x_min) / grid.cell) - 2, 0)
        ix1 = min(int((gt.center[0] + r - grid.x_min) / grid.cell) + 3, grid.nx)
        iy0 = max(int((gt.center[1] - r - grid.y_min) / grid.cell) - 2, 0)
        iy1 = min(int((gt.center[1] + r - grid.y_min) / grid.cell) + 3, grid.ny)
        if ix0 >= ix1 or iy0 >= iy1:
            return None, None, None, (0, 0)
        feats = fm.values[ix0:ix1, iy0:iy1]
    cache = _net_forward(params.weights, feats)
    conf = cache["conf"]
    dec = decode_boxes(cache["braw"], grid, ix0, iy0)
    if gt is None:
        i, j = np.unravel_index(int(np.argmax(conf)), conf.shape)
        return float(conf[i, j]), (int(i), int(j)), cache, (ix0, iy0)

    # cheap necessary conditions first, exact IoU on the survivors
    gt_half_diag = 0.5 * math.hypot(float(gt.size[0]), float(gt.size[1]))
    dist = np.hypot(dec["cx"] - gt.center[0], dec["cy"] - gt.center[1])
    diag = 0.5 * np.hypot(dec["l"], dec["w"])
    vol = dec["l"] * dec["w"] * dec["h"]
    ratio = np.minimum(vol, gt.volume) / np.maximum(vol, gt.volume)
    z_ov = (np.minimum(dec["cz"] + dec["h"] / 2, gt.center[2] + gt.size[2] / 2)
            - np.maximum(dec["cz"] - dec["h"] / 2, gt.center[2] - gt.size[2] / 2))
    maybe = (dist <= diag + gt_half_diag) & (ratio > delta) & (z_ov > 0.0)
    best = -1.0
    best_ij = None
    for i, j in zip(*np.nonzero(maybe)):
        if conf[i, j] <= best:
            continue
        if iou3d(_box_at(dec, i, j), gt) > delta:
            best = float(conf[i, j])
            best_ij = (int(i), int(j))
    if best_ij is None:
        return None, None, cache, (ix0, iy0)
    return best, best_ij, cache, (ix0, iy0)


def confidence_gradient(cloud, params: DetectorParams, gt: Box3D | None = None,
                        delta: float = 0.5) -> tuple[float, np.ndarray]:
    """d(max matched confidence)/d(point weight) by reverse-mode differentiation.

    The argmax cell and the IoU gate are frozen during differentiation. With no
    gated cell the value is 0 and the gradient vanishes.
    """
    xyz, _, w = _cloud_arrays(cloud)
    fm = featurize(cloud, params.grid)
    conf, ij, cache, (ix0, iy0) = matched_confidence(fm, params, gt, delta)
    if conf is None:
        return 0.0, np.zeros(len(xyz))
    i, j = ij
    d_logit = np.zeros(cache["conf"].shape)
    d_logit[i, j] = conf * (1.0 - conf)
    dinput, _ = _net_backward(params.weights, cache, d_logit, None,
                              need_dinput=True, need_dparams=False)
    grad_vals = np.zeros_like(fm.values)
    grad_vals[ix0:ix0 + dinput.shape[0], iy0:iy0 + dinput.shape[1]] = dinput
    return conf, fm.backward_to_weights(grad_vals)


# --- training --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 4
    batch: int = 8
    lr: float = 1e-3
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    box_weight: float = 1.0
    crop: int = 64
    holdout: int = 150
    seed: int = 0
    workers: int = 1

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch", "lr", "focal_gamma", "focal_alpha",
            "box_weight", "crop", "holdout", "seed", "workers")}


@dataclass(frozen=True)
class TrainScene:
    cloud: PointCloud
    gt_box: Box3D | None


def visible_bearing(rng: np.random.Generator, distance: float, grid: GridSpec) -> float:
    """Uniform bearing (degrees) over the arc that keeps a target of this range
    inside the BEV extent (with a 1 m margin)."""
    a_y = math.asin(min(1.0, (grid.y_max - 1.0) / distance))
    a_x = math.acos(min(1.0, max(-1.0, (grid.x_min + 2.0) / distance)))
    amax = min(a_y, a_x)
    a = rng.uniform(-amax, amax)
    return math.degrees(a) % 360.0


class TrainingSampler:
    """Deterministic scene generator indexed by integer; picklable so scene
    preparation can fan out over worker processes.

    Even indices are positives (clean pedestrian at a visible range/bearing),
    the rest alternate environment-only and carryable-object-only negatives.
    """

    def __init__(self, lidar: LidarConfig, grid: GridSpec, seed: int,
                 d_range: tuple[float, float] = (5.0, 40.0)):
        self.lidar = lidar
        self.grid = grid
        self.seed = seed
        self.d_range = d_range
        self._ped = None
        self._pool = None

    def __getstate__(self):
        return {"lidar": self.lidar, "grid": self.grid, "seed": self.seed,
                "d_range": self.d_range}

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._ped = None
        self._pool = None

    def _assets(self):
        if self._ped is None:
            from .scene import build_pedestrian_template
            from .vop import default_object_pool
            self._ped = build_pedestrian_template()
            self._pool = default_object_pool()
        return self._ped, self._pool

    def __call__(self, index: int) -> TrainScene:
        from .lidar import build_bvh, scan
        from .scene import ScenarioConfig, build_environment, scan_scenario

        ped, pool = self._assets()
        env_names = ("open_lot", "street", "corridor")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
        env = build_environment(env_names[index % 3], seed=int(rng.integers(1 << 16)))
        lidar_i = replace(self.lidar, seed=int(rng.integers(1 << 30)))
        kind = index % 4
        if kind in (0, 2):          # positive
            d = float(rng.uniform(*self.d_range))
            sc = ScenarioConfig(env=env, distance=d,
                                angle=visible_bearing(rng, d, self.grid), lidar=lidar_i)
            clouds, gt, _ = scan_scenario(sc, ped)
            return TrainScene(cloud=clouds[0], gt_box=gt)
        if kind == 1:               # environment only
            cloud = scan(build_bvh(list(env.static_meshes)), lidar_i)
            return TrainScene(cloud=cloud, gt_box=None)
        entry = pool.entries[int(rng.integers(len(pool.entries)))]
        d = float(rng.uniform(*self.d_range))
        sc = ScenarioConfig(env=env, distance=d,
                            angle=visible_bearing(rng, d, self.grid), lidar=lidar_i)
        clouds, _, _ = scan_scenario(sc, entry.mesh)
        return TrainScene(cloud=clouds[0], gt_box=None)


def _smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def _crop_for_scene(scene: TrainScene, grid: GridSpec, crop: int, rng: np.random.Generator):
    """Featurized crop window plus the positive-cell target inside it."""
    fm = featurize(scene.cloud, grid)
    nx, ny = grid.nx, grid.ny
    if scene.gt_box is not None:
        gi = int((scene.gt_box.center[0] - grid.x_min) / grid.cell)
        gj = int((scene.gt_box.center[1] - grid.y_min) / grid.cell)
        anchor = (gi, gj)
    elif len(scene.cloud) and scene.cloud.mesh_ids is not None and scene.cloud.mesh_ids.max(initial=-1) > 0:
        # object-only negatives: crop around the placed object when present
        sel = scene.cloud.mesh_ids == scene.cloud.mesh_ids.max()
        ctr = scene.cloud.xyz[sel].mean(axis=0) if sel.any() else np.zeros(3)
        anchor = (int((ctr[0] - grid.x_min) / grid.cell), int((ctr[1] - grid.y_min) / grid.cell))
    else:
        anchor = (int(rng.integers(nx)), int(rng.integers(ny)))
    jit = crop // 2 - 4
    ix0 = anchor[0] - crop // 2 + int(rng.integers(-jit, jit + 1))
    iy0 = anchor[1] - crop // 2 + int(rng.integers(-jit, jit + 1))
    ix0 = min(max(ix0, 0), nx - crop)
    iy0 = min(max(iy0, 0), ny - crop)
    feats = fm.values[ix0:ix0 + crop, iy0:iy0 + crop]
    pos = None
    if scene.gt_box is not None:
        pi, pj = anchor[0] - ix0, anchor[1] - iy0
        if 0 <= pi < crop and 0 <= pj < crop:
            pos = (pi, pj)
    return feats, pos, scene.gt_box, (ix0, iy0)


def _scene_loss(weights: dict, feats: np.ndarray, pos, gt: Box3D | None,
                origin: tuple[int, int], grid: GridSpec, hyper: TrainHyper):
    """Focal objectness + smooth-L1 box loss on one crop; returns loss pieces
    and parameter gradients."""
    cache = _net_forward(weights, feats)
    conf = cache["conf"]
    alpha, gamma = hyper.focal_alpha, hyper.focal_gamma
    p = np.clip(conf, 1e-7, 1.0 - 1e-7)
    target = np.zeros_like(conf)
    if pos is not None:
        target[pos] = 1.0
    # focal loss and its gradient w.r.t. the logit
    loss_pos = -alpha * (1 - p) ** gamma * np.log(p)
    loss_neg = -(1 - alpha) * p ** gamma * np.log(1 - p)
    focal = np.where(target > 0, loss_pos, loss_neg)
    g_pos = alpha * (1 - p) ** (gamma - 1) * (gamma * p * np.log(p) + p - 1.0)
    g_neg = (1 - alpha) * p ** (gamma - 1) * (-gamma * (1 - p) * np.log(1 - p) + p * (1 - p))
    d_logit = np.where(target > 0, g_pos, g_neg)

    d_braw = None
    box_loss = 0.0
    if pos is not None and gt is not None:
        i, j = pos
        braw = cache["braw"][i, j]
        dec = decode_boxes(cache["braw"][i:i + 1, j:j + 1], grid,
                           origin[0] + i, origin[1] + j)
        pred = np.array([dec["cx"][0, 0], dec["cy"][0, 0], dec["cz"][0, 0],
                         math.log(dec["l"][0, 0]), math.log(dec["w"][0, 0]),
                         math.log(dec["h"][0, 0])])
        tgt = np.array([gt.center[0], gt.center[1], gt.center[2],
                        math.log(gt.size[0]), math.log(gt.size[1]), math.log(gt.size[2])])
        diff = pred - tgt
        val, gval = _smooth_l1(diff)
        sy = math.sin(float(dec["yaw"][0, 0]) - gt.yaw)
        yv, yg = _smooth_l1(np.array([sy]))
        box_loss = float(val.sum() + yv[0])
        # chain through the decode transforms
        d_braw = np.zeros_like(cache["braw"])
        th0 = np.tanh(braw[0] / XY_OFFSET_BOUND)
        th1 = np.tanh(braw[1] / XY_OFFSET_BOUND)
        d_braw[i, j, 0] = gval[0] * (1 - th0 ** 2)
        d_braw[i, j, 1] = gval[1] * (1 - th1 ** 2)
        d_braw[i, j, 2] = gval[2]
        for k in range(3):
            tk = np.tanh(braw[3 + k] / LOG_SIZE_BOUND)
            d_braw[i, j, 3 + k] = gval[3 + k] * (1 - tk ** 2)
        d_braw[i, j, 6] = yg[0] * math.cos(float(dec["yaw"][0, 0]) - gt.yaw)
        d_braw *= hyper.box_weight
    _, grads = _net_backward(weights, cache, d_logit, d_braw,
                             need_dinput=False, need_dparams=True)
    return float(focal.sum()), box_loss, grads


def _prepare_crop(args):
    sampler, index, grid, crop, seed = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, index, 77]))
    return _crop_for_scene(sampler(index), grid, crop, rng)


def train(scenario_sampler, n_scenes: int, hyper: TrainHyper = TrainHyper(),
          grid: GridSpec = GridSpec(), progress=None) -> DetectorParams:
    """Train detector weights on sampled scenes; deterministic given the seed.

    ``scenario_sampler`` is an integer-indexed callable returning TrainScene.
    Raises DivergedTrainingError if the loss goes non-finite and ValueError if
    the sample contains no positives.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    crops = pmap(
        _prepare_crop,
        [(scenario_sampler, i, grid, hyper.crop, hyper.seed) for i in range(n_scenes)],
        workers=hyper.workers,
    )
    if not any(c[1] is not None for c in crops):
        raise ValueError("training sample contains no positive scenes")

    weights = init_weights(hyper.seed)
    m = {k: np.zeros_like(v) for k, v in weights.items()}
    v = {k: np.zeros_like(w) for k, w in weights.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    order_rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 999]))
    for epoch in range(hyper.epochs):
        order = order_rng.permutation(n_scenes)
        for start in range(0, n_scenes, hyper.batch):
            batch = order[start:start + hyper.batch]
            acc = {k: np.zeros_like(w) for k, w in weights.items()}
            n_pos = sum(1 for b in batch if crops[b][1] is not None)
            total = 0.0
            for b in batch:
                feats, pos, gt, origin = crops[b]
                focal, box_loss, grads = _scene_loss(
                    weights, feats, pos, gt, origin, grid, hyper)
                total += focal + box_loss
                for k in grads:
                    acc[k] += grads[k].reshape(weights[k].shape)
            if not math.isfinite(total):
                raise DivergedTrainingError(f"non-finite loss at step {step}")
            scale = 1.0 / max(n_pos, 1)
            step += 1
            for k in weights:
                g = acc[k] * scale
                m[k] = beta1 * m[k] + (1 - beta1) * g
                v[k] = beta2 * v[k] + (1 - beta2) * g * g
                mh = m[k] / (1 - beta1 ** step)
                vh = v[k] / (1 - beta2 ** step)
                weights[k] = weights[k] - hyper.lr * mh / (np.sqrt(vh) + eps)
        if progress is not None:
            progress(epoch, total)

    params = DetectorParams(weights=weights, grid=grid,
                            meta={"hyper": hyper.to_json(), "seed": hyper.seed,
                                  "n_scenes": n_scenes})
    dsr = holdout_dsr(params, hyper)
    meta = dict(params.meta)
    meta["holdout_dsr"] = dsr
    return DetectorParams(weights=weights, grid=grid, meta=meta)


def holdout_dsr(params: DetectorParams, hyper: TrainHyper,
                d_range: tuple[float, float] = (5.0, 30.0)) -> float:
    """Detection success rate on fresh clean-pedestrian scenes at <= 30 m."""
    from .harness import score_trial
    from .scene import ScenarioConfig, build_environment, build_pedestrian_template, scan_scenario

    ped = build_pedestrian_template()
    env_names = ("open_lot", "street", "corridor")
    hits = 0
    n = hyper.holdout
    if n <= 0:
        return float("nan")
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 31337, k]))
        env = build_environment(env_names[k % 3], seed=int(rng.integers(1 << 16)))
        d = float(rng.uniform(*d_range))
        lidar = LidarConfig.from_json(params.meta.get("lidar", {})) if "lidar" in params.meta \
            else LidarConfig(azimuth_step=0.4)
        lidar = replace(lidar, seed=int(rng.integers(1 << 30)))
        sc = ScenarioConfig(env=env, distance=d,
                            angle=visible_bearing(rng, d, params.grid), lidar=lidar)
        clouds, gt, _ = scan_scenario(sc, ped)
        dets = detect(clouds[0], params)
        detected, _ = score_trial(dets, gt, DEFAULT_CONF_THRESHOLD)
        hits += int(detected)
    return 100.0 * hits / n
