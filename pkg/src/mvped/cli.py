"""Command-line front end: synth, segment, fit, detect, eval, pipeline.

Every command reads one JSON config (``--config``, defaults applied to
missing keys) and writes the effective config to ``run_config.json`` next to
its outputs.  Exit codes: 0 success, 3 missing or unreadable input,
4 invalid input or config, 5 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import detect, pipeline, sis, synth, tensorio
from .config import ConfigError, RunConfig
from .optimize import FitDivergenceError
from .renderer import ViewRenderer
from .volume import GridSpec, SceneVolume

EXIT_OK = 0
EXIT_IO = 3
EXIT_INVALID = 4
EXIT_DIVERGED = 5


def _load_config(args) -> RunConfig:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.apply_seed(args.seed)
    return run


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    return path


# -- stages -----------------------------------------------------------------


def cmd_synth(run: RunConfig, out_dir: Path) -> None:
    synth.generate(run.synth, out_dir)
    run.dump(out_dir / "run_config.json")


def cmd_segment(run: RunConfig, root: Path) -> np.ndarray:
    ds = tensorio.DatasetManifest.open(root)
    cams = ds.calibration.cameras
    masks = pipeline.segment(ds.features(), ds.semantic(), (cams[0].image_height, cams[0].image_width), run.sis)
    for cam, m in zip(cams, masks):
        tensorio.write_tensor(ds.view_path("masks", cam.view_id), m)
        tensorio.write_image_pgm(root / "masks" / f"view_{cam.view_id}.pgm", m)
    run.dump(root / "run_config.json")
    return masks


def _mask_kind(run: RunConfig) -> str:
    return "gt_masks" if run.pipeline.mask_source == "ideal" else "masks"


def _grid_to_dict(grid: GridSpec) -> dict:
    return {"origin": list(grid.origin), "voxel_size": grid.voxel_size, "dims": list(grid.dims)}


def _grid_from_dict(doc: dict) -> GridSpec:
    try:
        return GridSpec(tuple(doc["origin"]), float(doc["voxel_size"]), tuple(doc["dims"]))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scene_grid.json: {exc}") from exc


def cmd_fit(run: RunConfig, root: Path) -> pipeline.FitOutcome:
    ds = tensorio.DatasetManifest.open(root)
    masks = ds.masks(_mask_kind(run))
    outcome = pipeline.fit_volume(ds.calibration, ds.images(), masks, ds.features(), run)
    scene = outcome.scene
    tensorio.write_tensor(root / "scene_density.vpt", scene.density)
    tensorio.write_tensor(root / "scene_color.vpt", scene.color)
    _write_json(root / "scene_grid.json", _grid_to_dict(outcome.grid))
    with open(root / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "l_color", "l_mask", "l_vbr", "total"])
        for r in outcome.history:
            w.writerow([r.iteration, repr(r.l_color), repr(r.l_mask), repr(r.l_vbr), repr(r.total)])
    # previews of the fitted scene from each camera at render resolution
    for cam in ds.calibration.cameras:
        view = ViewRenderer(cam, outcome.grid, run.render).render(scene)
        tensorio.write_image_pgm(root / "renders" / f"mask_{cam.view_id}.pgm", view.mask)
        tensorio.write_image_ppm(root / "renders" / f"color_{cam.view_id}.ppm", np.moveaxis(view.color, 0, -1))
    run.dump(root / "run_config.json")
    return outcome


def _read_scene(root: Path) -> SceneVolume:
    grid = _grid_from_dict(json.loads(_require(root / "scene_grid.json").read_text()))
    density = tensorio.read_tensor(_require(root / "scene_density.vpt")).astype(np.float64)
    color = tensorio.read_tensor(_require(root / "scene_color.vpt")).astype(np.float64)
    return SceneVolume(density, color, grid)


def cmd_detect(run: RunConfig, root: Path) -> list:
    scene = _read_scene(root)
    bev, dets = pipeline.detect_people(scene, run.detect)
    tensorio.write_tensor(root / "bev.vpt", bev)
    # rows are y so the PGM reads as a top-down map
    tensorio.write_image_pgm(root / "bev.pgm", bev.T)
    with open(root / "detections.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "score"])
        for d in dets:
            w.writerow([repr(d.x), repr(d.y), repr(d.score)])
    run.dump(root / "run_config.json")
    return dets


def read_detections(path: Path) -> list:
    with open(_require(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "y", "score"]:
        raise ValueError(f"{path}: expected header x,y,score")
    try:
        return [detect.Detection(float(x), float(y), float(s)) for x, y, s in rows[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed row ({exc})") from exc


def cmd_eval(run: RunConfig, root: Path) -> detect.MetricsReport:
    dets = read_detections(root / "detections.csv")
    gt = tensorio.read_positions(_require(root / "gt_positions.vpt"))
    report = pipeline.evaluate(dets, gt, run.detect)
    _write_json(root / "metrics.json", report.to_dict())
    run.dump(root / "run_config.json")
    return report


def cmd_pipeline(run: RunConfig, root: Path) -> detect.MetricsReport:
    if run.pipeline.mask_source == "sis":
        cmd_segment(run, root)
    cmd_fit(run, root)
    cmd_detect(run, root)
    return cmd_eval(run, root)


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvped", description="Unsupervised multi-view pedestrian detection.")
    sub = p.add_subparsers(dest="command", required=True)
    help_text = {
        "synth": "generate a synthetic calibrated dataset",
        "segment": "segment pedestrians from per-view features",
        "fit": "fit the density/color volume to the masks and images",
        "detect": "extract BEV detections from the fitted volume",
        "eval": "score detections against gt_positions.vpt",
        "pipeline": "segment, fit, detect and eval in one go",
    }
    for name, text in help_text.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("dir", type=Path, help="output directory" if name == "synth" else "dataset directory")
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "fit": cmd_fit,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _load_config(args)
        result = COMMANDS[args.command](run, args.dir)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FitDivergenceError, sis.ConvergenceError) as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, tensorio.TensorFormatError, tensorio.CalibrationError, detect.MetricsError,
            synth.PlacementError, sis.SegmentationError, ValueError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if isinstance(result, detect.MetricsReport):
        print(json.dumps(result.to_dict(), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
