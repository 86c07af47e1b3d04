"""Experiment runners: the detected/attacked metric rule, randomized trial
sweeps over attributes, environment factors, beam counts and body occlusions,
and CSV/JSON writers.

All sweeps are reproducible bit-exactly given (seed, config): every trial
derives its own rng from (seed, cell index, trial index), and aggregates are
exact integer counts formatted late.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .detector import DEFAULT_CONF_THRESHOLD, Detection, DetectorParams, detect, visible_bearing
from .geometry import Box3D, iou3d
from .lidar import LidarConfig
from .scene import (
    AttributeSpec,
    ScenarioConfig,
    build_environment,
    build_pedestrian_template,
    apply_attributes,
    scan_scenario,
)
from .vop import VopTriplet, default_object_pool, default_vocabulary, generate_composition

DETECT_IOU = 0.5
ATTACK_IOU = 0.1


@dataclass(frozen=True)
class TrialResult:
    scenario_id: str
    condition: str
    detections: list
    gt_box: Box3D
    detected: bool
    attacked: bool


def score_trial(dets: list[Detection], gt: Box3D,
                conf_threshold: float = DEFAULT_CONF_THRESHOLD) -> tuple[bool, bool]:
    """(detected, attacked) under the IoU 0.5 / 0.1 rule.

    detected: some detection at/above the confidence threshold overlaps the
    ground truth with IoU > 0.5. attacked: nothing at/above the threshold, or
    every such detection has IoU < 0.1. Detections landing in between leave
    both flags false (the gray zone).
    """
    ious = [iou3d(d.box, gt) for d in dets if d.confidence >= conf_threshold]
    if not ious:
        return False, True
    detected = max(ious) > DETECT_IOU
    attacked = max(ious) < ATTACK_IOU
    return detected, attacked


# --- representative attribute conditions (Table-1 style) -------------------------

ATTRIBUTE_CONDITIONS = ("clean", "topology", "connectivity", "intensity", "combination")

REPRESENTATIVE_SPECS = {
    "clean": AttributeSpec(),
    "topology": AttributeSpec(topology_mask=frozenset({"arms"})),
    "connectivity": AttributeSpec(connectivity_gap=("z", 0.12, 0.9)),
    "intensity": AttributeSpec(intensity_factor=0.25),
}
# carried large object in front of the body: the default combination condition
REPRESENTATIVE_TRIPLET = {"verb": "carry", "object": "large box",
                          "pose": "in front of the body"}


def _trial_scenario(env_name: str, rng: np.random.Generator, lidar: LidarConfig,
                    grid, d_range=(6.0, 28.0), velocity=0.0) -> ScenarioConfig:
    env = build_environment(env_name, seed=int(rng.integers(1 << 16)))
    d = float(rng.uniform(*d_range))
    return ScenarioConfig(
        env=env, distance=d, angle=visible_bearing(rng, d, grid),
        velocity=velocity, lidar=replace(lidar, seed=int(rng.integers(1 << 30))),
    )


def _run_one_trial(args) -> tuple[bool, bool]:
    (params, lidar, env_name, condition, seed, cell_idx, trial_idx,
     d_range, velocity, beams, occluder, triplet) = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, cell_idx, trial_idx]))
    lidar_t = lidar if beams is None else replace(lidar, beams=beams)
    sc = _trial_scenario(env_name, rng, lidar_t, params.grid,
                         d_range=d_range, velocity=velocity)
    ped = build_pedestrian_template()
    extras: list = []
    if condition == "combination" or triplet is not None:
        pool = default_object_pool()
        vocab = default_vocabulary(pool)
        trip = triplet or REPRESENTATIVE_TRIPLET
        t = VopTriplet(vocab.verbs.index(trip["verb"]),
                       vocab.objects.index(trip["object"]),
                       vocab.poses.index(trip["pose"]))
        target = generate_composition(t, pool, ped, vocab)
        gt_source = ped
    elif condition in REPRESENTATIVE_SPECS and condition != "clean":
        target, extras = apply_attributes(ped, REPRESENTATIVE_SPECS[condition])
        gt_source = target
    elif occluder is not None:
        target, extras = apply_attributes(ped, AttributeSpec(occluder=occluder))
        gt_source = target
    else:
        target, gt_source = ped, ped

    clouds, gt, tid = scan_scenario(sc, target, extras)
    if gt_source is not target:
        # ground truth stays the pedestrian when objects are attached
        from .geometry import placed_box
        from .scene import place_target
        gt = placed_box(gt_source, place_target(target, sc))
    dets = detect(clouds[-1], params)
    return score_trial(dets, gt)


@dataclass(frozen=True)
class SweepCell:
    label: str
    n: int
    detected: int
    attacked: int

    @property
    def dsr(self) -> float:
        return 100.0 * self.detected / self.n if self.n else 0.0

    @property
    def asr(self) -> float:
        return 100.0 * self.attacked / self.n if self.n else 0.0

    def stderr(self, count: int) -> float:
        if self.n == 0:
            return 0.0
        p = count / self.n
        return 100.0 * math.sqrt(p * (1.0 - p) / self.n)

    def row(self) -> dict:
        return {
            "label": self.label, "n": self.n,
            "detected": self.detected, "dsr": f"{self.dsr:.1f}",
            "dsr_stderr": f"{self.stderr(self.detected):.2f}",
            "attacked": self.attacked, "asr": f"{self.asr:.1f}",
            "asr_stderr": f"{self.stderr(self.attacked):.2f}",
        }


def _run_cell(params, lidar, env_name, condition, seed, cell_idx, n_trials,
              label, workers=1, d_range=(6.0, 28.0), velocity=0.0, beams=None,
              occluder=None, triplet=None) -> SweepCell:
    args = [
        (params, lidar, env_name, condition, seed, cell_idx, k,
         d_range, velocity, beams, occluder, triplet)
        for k in range(n_trials)
    ]
    results = pmap(_run_one_trial, args, workers=workers)
    return SweepCell(
        label=label, n=n_trials,
        detected=sum(1 for d, _ in results if d),
        attacked=sum(1 for _, a in results if a),
    )


SCENE_NAMES = ("open_lot", "street", "corridor")


def run_attribute_sweep(params: DetectorParams, lidar: LidarConfig, seed: int,
                        n_trials: int = 200, scenes=SCENE_NAMES,
                        conditions=ATTRIBUTE_CONDITIONS, triplet: dict | None = None,
                        workers: int = 1) -> list[SweepCell]:
    """Detection success per (scene, condition); Table-1 style."""
    cells = []
    for ci, (scene, cond) in enumerate((s, c) for s in scenes for c in conditions):
        cells.append(_run_cell(
            params, lidar, scene, cond, seed, ci, n_trials,
            label=f"{scene}/{cond}", workers=workers,
            triplet=triplet if cond == "combination" else None,
        ))
    return cells


def run_env_sweep(params: DetectorParams, lidar: LidarConfig, seed: int,
                  factor: str, values, n_trials: int = 200,
                  scene: str = "open_lot", triplet: dict | None = None,
                  workers: int = 1) -> list[SweepCell]:
    """Attack success versus one environment factor (distance, angle, velocity),
    with the combination target fixed."""
    if factor not in ("distance", "angle", "velocity"):
        raise ValueError("factor must be distance, angle or velocity")
    trip = triplet or REPRESENTATIVE_TRIPLET
    cells = []
    for ci, value in enumerate(values):
        d_range = (6.0, 28.0)
        velocity = 0.0
        if factor == "distance":
            d_range = (float(value), float(value))
        elif factor == "velocity":
            velocity = float(value)
        if factor == "angle":
            cell = _run_angle_cell(params, lidar, seed, ci, float(value), n_trials,
                                   scene, trip, workers)
        else:
            cell = _run_cell(params, lidar, scene, "combination", seed, ci, n_trials,
                             label=f"{factor}={value}", workers=workers,
                             d_range=d_range, velocity=velocity, triplet=trip)
        cells.append(cell)
    return cells


def _run_angle_trial(args) -> tuple[bool, bool]:
    params, lidar, scene, seed, cell_idx, k, angle, trip = args
    rng = np.random.default_rng(np.random.SeedSequence([seed, cell_idx, k]))
    env = build_environment(scene, seed=int(rng.integers(1 << 16)))
    d = float(rng.uniform(8.0, 16.0))
    sc = ScenarioConfig(env=env, distance=d, angle=angle % 360.0,
                        lidar=replace(lidar, seed=int(rng.integers(1 << 30))))
    ped = build_pedestrian_template()
    pool = default_object_pool()
    vocab = default_vocabulary(pool)
    t = VopTriplet(vocab.verbs.index(trip["verb"]), vocab.objects.index(trip["object"]),
                   vocab.poses.index(trip["pose"]))
    target = generate_composition(t, pool, ped, vocab)
    clouds, _, _ = scan_scenario(sc, target)
    from .geometry import placed_box
    from .scene import place_target
    gt = placed_box(ped, place_target(target, sc))
    return score_trial(detect(clouds[-1], params), gt)


def _run_angle_cell(params, lidar, seed, cell_idx, angle, n_trials, scene, trip,
                    workers) -> SweepCell:
    args = [(params, lidar, scene, seed, cell_idx, k, angle, trip)
            for k in range(n_trials)]
    results = pmap(_run_angle_trial, args, workers=workers)
    return SweepCell(label=f"angle={angle}", n=n_trials,
                     detected=sum(1 for d, _ in results if d),
                     attacked=sum(1 for _, a in results if a))


def run_beam_sweep(params: DetectorParams, lidar: LidarConfig, seed: int,
                   beams=(32, 64, 128), n_trials: int = 200,
                   scene: str = "open_lot", triplet: dict | None = None,
                   workers: int = 1) -> list[SweepCell]:
    """Attack success per beam count with the attack composition fixed."""
    return [
        _run_cell(params, lidar, scene, "combination", seed, ci, n_trials,
                  label=f"beams={b}", workers=workers, beams=int(b),
                  triplet=triplet or REPRESENTATIVE_TRIPLET)
        for ci, b in enumerate(beams)
    ]


def run_occlusion_study(params: DetectorParams, lidar: LidarConfig, seed: int,
                        regions=("feet", "torso", "head"), scenes=SCENE_NAMES,
                        n_trials: int = 200, workers: int = 1) -> list[SweepCell]:
    """Attack success per occluded body region, per scene."""
    cells = []
    for ci, (region, scene) in enumerate((r, s) for r in regions for s in scenes):
        cells.append(_run_cell(
            params, lidar, scene, "occlusion", seed, ci, n_trials,
            label=f"{region}/{scene}", workers=workers, occluder=region,
        ))
    return cells


def region_summary(cells: list[SweepCell], regions=("feet", "torso", "head")) -> dict:
    """Mean and standard deviation of ASR across scenes, per region."""
    out = {}
    for region in regions:
        vals = [c.asr for c in cells if c.label.startswith(region + "/")]
        out[region] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n_cells": len(vals)}
    return out


# --- output writers ---------------------------------------------------------------

CSV_FIELDS = ("label", "n", "detected", "dsr", "dsr_stderr", "attacked", "asr", "asr_stderr")


def cells_to_csv(cells: list[SweepCell]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for c in cells:
        writer.writerow(c.row())
    return buf.getvalue()


def write_sweep_outputs(cells: list[SweepCell], out_dir: str | Path, name: str,
                        config: dict, seed: int, emit_plotdata: bool = False,
                        timestamp: str | None = None) -> dict:
    """CSV + manifest (+ optional per-point plot series). Only the manifest may
    carry a timestamp so result payloads stay byte-stable."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    csv_path.write_text(cells_to_csv(cells))
    files = {"csv": csv_path.name}
    if emit_plotdata:
        plot = {
            "series": [{"label": c.label, "n": c.n, "dsr": c.dsr, "asr": c.asr}
                       for c in cells]
        }
        plot_path = out_dir / f"{name}.plotdata.json"
        plot_path.write_text(json.dumps(plot, sort_keys=True, indent=1))
        files["plotdata"] = plot_path.name
    manifest = {"name": name, "config": config, "seed": seed, "files": files}
    if timestamp is not None:
        manifest["timestamp"] = timestamp
    (out_dir / f"{name}.manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))
    return manifest
