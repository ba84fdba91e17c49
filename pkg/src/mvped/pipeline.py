"""In-memory pipeline: segmentation, volume fit, BEV detection and scoring.

The functions here take arrays and config objects and return arrays and
reports; the command-line layer wraps them with file I/O.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import detect, optimize, sis, synth
from .config import DetectConfig, GridConfig, RunConfig
from .volume import GridSpec, SceneVolume


@dataclass
class FitOutcome:
    scene: SceneVolume
    history: list
    grid: GridSpec


@dataclass
class PipelineResult:
    masks: np.ndarray
    fit: FitOutcome
    bev: np.ndarray
    detections: list
    metrics: detect.MetricsReport | None
    extras: dict = field(default_factory=dict)


def make_grid(area, cfg: GridConfig) -> GridSpec:
    return GridSpec.covering(area, cfg.voxel_size, cfg.z_min, cfg.z_max, cfg.max_voxels)


def segment(features, semantic, image_size, cfg: sis.SisConfig) -> np.ndarray:
    return sis.sis_segment(features, semantic, cfg, image_size=image_size)


def fit_volume(calibration, images, masks, features, run: RunConfig, callback=None) -> FitOutcome:
    calibration.require_multiview()
    grid = make_grid(calibration.area, run.grid)
    scene, history, _ = optimize.fit(
        calibration.cameras, images, masks, grid, run.fit, run.render,
        features=features, callback=callback,
    )
    return FitOutcome(scene, history, grid)


def detect_people(scene: SceneVolume, cfg: DetectConfig):
    bev = detect.bev_project(scene.density)
    dets = detect.extract_peaks(bev, scene.grid, cfg.score_thr, cfg.nms_radius)
    return bev, dets


def evaluate(dets, gt, cfg: DetectConfig) -> detect.MetricsReport:
    return detect.match_and_score(dets, gt, cfg.match_radius)


def run_scene(scene: synth.SynthScene, run: RunConfig, callback=None) -> PipelineResult:
    """Segment, fit, detect and score one synthetic scene already in memory."""
    h, w = scene.images.shape[1:3]
    if run.pipeline.mask_source == "ideal":
        masks = scene.gt_masks
    else:
        masks = segment(scene.features, scene.semantic, (h, w), run.sis)
    outcome = fit_volume(scene.calibration, scene.images, masks, scene.features, run, callback)
    bev, dets = detect_people(outcome.scene, run.detect)
    metrics = evaluate(dets, scene.positions, run.detect)
    return PipelineResult(masks, outcome, bev, dets, metrics)


def run_synthetic(run: RunConfig, callback=None) -> PipelineResult:
    """Generate the synthetic scene described by ``run.synth`` and run every stage."""
    return run_scene(synth.build_scene(run.synth), run, callback)


def bev_occupancy(density) -> float:
    """Mean over ground cells of the column-wise max density."""
    return float(detect.bev_project(density).mean())
