"""Component ablations on synthetic scenes, reported as a MODA/MODP/precision/recall table."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import pipeline, sis, synth
from .config import RunConfig

FUSION_MODES = ("softmax", "add", "concat_project")


@dataclass
class AblationRow:
    variant: str
    seed: int
    moda: float
    modp: float
    precision: float
    recall: float
    occupancy: float


def _with(run: RunConfig, **sections) -> RunConfig:
    doc = run.to_dict()
    for name, values in sections.items():
        doc[name] = {**doc[name], **values}
    return RunConfig.from_dict(doc)


def _row(variant, seed, result: pipeline.PipelineResult) -> AblationRow:
    m = result.metrics
    occ = pipeline.bev_occupancy(result.fit.scene.density)
    return AblationRow(variant, seed, m.moda, m.modp, m.precision, m.recall, occ)


def run_variants(base: RunConfig, variants: dict, seeds) -> list[AblationRow]:
    """Run every ``{name: {section: {key: value}}}`` variant on every seed.

    The scene for a seed is generated once and shared across variants.
    """
    rows = []
    for seed in seeds:
        scene = synth.build_scene(dataclasses.replace(base.synth, seed=seed))
        for name, overrides in variants.items():
            run = _with(base, **overrides).apply_seed(seed)
            rows.append(_row(name, seed, pipeline.run_scene(scene, run)))
    return rows


def fusion_variants(decoder="linear") -> dict:
    return {mode: {"fit": {"fusion": mode, "decoder": decoder}} for mode in FUSION_MODES}


def vbr_variants(weight=1.0) -> dict:
    return {"with VBR": {"fit": {"vbr_weight": weight}}, "w/o VBR": {"fit": {"vbr_weight": 0.0}}}


def sis_iou_table(base: sis.SisConfig, synth_cfg: synth.SynthConfig, seeds, settings) -> dict:
    """Mask IoU against ground truth per ``(iterations, semantic_selection)`` setting and seed."""
    out = {s: [] for s in settings}
    for seed in seeds:
        scene = synth.build_scene(dataclasses.replace(synth_cfg, seed=seed))
        h, w = scene.images.shape[1:3]
        for iters, select in settings:
            cfg = dataclasses.replace(base, iterations=iters, semantic_selection=select, seed=seed)
            masks = sis.sis_segment(scene.features, scene.semantic, cfg, image_size=(h, w))
            out[(iters, select)].append(sis.mask_iou(masks, scene.gt_masks))
    return out


def summarize(rows: list[AblationRow]) -> dict:
    """Per-variant means, in first-seen order."""
    names = list(dict.fromkeys(r.variant for r in rows))
    table = {}
    for name in names:
        sel = [r for r in rows if r.variant == name]
        table[name] = {
            k: float(np.mean([getattr(r, k) for r in sel]))
            for k in ("moda", "modp", "precision", "recall", "occupancy")
        }
    return table


def format_table(rows: list[AblationRow], title="Ablation") -> str:
    table = summarize(rows)
    lines = [title, f"{'variant':<18}{'MODA':>8}{'MODP':>8}{'Prec.':>8}{'Recall':>8}{'occ.':>9}"]
    for name, v in table.items():
        lines.append(
            f"{name:<18}{100 * v['moda']:8.1f}{100 * v['modp']:8.1f}"
            f"{100 * v['precision']:8.1f}{100 * v['recall']:8.1f}{v['occupancy']:9.4f}"
        )
    return "\n".join(lines)
