"""Synthetic calibrated multi-camera scenes with analytic ground truth.

Pedestrians are vertical ellipsoids standing on a textured ground plane; one
colored box acts as a distractor object.  Every pixel is classified by its
nearest ray hit, which gives exact masks, images, per-pixel features and a
surrogate semantic-similarity map.
"""
from __future__ import annotations

import colorsys
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .geometry import CameraModel, intrinsic_from_fov, pixel_rays
from .tensorio import CalibrationSet

# per-pixel class labels; pedestrians are PED_BASE + index
SKY, GROUND, BOX, PED_BASE = -1, -2, -3, 0

SKY_COLOR = (0.6, 0.75, 0.9)


class PlacementError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    num_cameras: int = 4
    num_pedestrians: int = 5
    area: tuple = (8.0, 8.0)
    ped_radius: float = 0.3
    ped_height: float = 1.7
    min_separation: float = 1.0
    image_width: int = 64
    image_height: int = 64
    feature_downsample: int = 1
    feature_dim: int = 16
    noise: float = 0.05
    seed: int = 0
    camera_height: float = 2.5
    camera_margin: float = 1.0
    fov_deg: float = 60.0
    distractor: bool = True
    box_size: tuple = (1.2, 1.2, 1.2)
    box_color: tuple = (0.85, 0.55, 0.15)
    objectness_scale: float = 4.0
    class_scale: float = 2.5
    semantic_fg: float = 0.9
    semantic_bg: float = 0.1
    max_attempts: int = 1000

    def __post_init__(self):
        self.area = tuple(float(a) for a in self.area)
        self.box_size = tuple(float(b) for b in self.box_size)
        self.box_color = tuple(float(c) for c in self.box_color)
        if self.num_cameras < 2:
            raise ValueError("need at least 2 cameras")
        if self.num_pedestrians < 0:
            raise ValueError("num_pedestrians must be >= 0")
        if self.feature_dim < 6:
            raise ValueError("feature_dim must be >= 6 (3 color + 3 class dims)")
        if self.image_width % self.feature_downsample or self.image_height % self.feature_downsample:
            raise ValueError("feature_downsample must divide the image size")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.min_separation < 2 * self.ped_radius:
            raise ValueError("min_separation must be at least twice the pedestrian radius")


@dataclass
class SynthScene:
    config: SynthConfig
    calibration: CalibrationSet
    positions: np.ndarray  # G x 2
    ped_colors: np.ndarray  # G x 3
    box: tuple | None  # (lower(3), upper(3)) or None
    images: np.ndarray  # N x H x W x 3
    labels: np.ndarray  # N x H x W int
    features: np.ndarray  # N x H' x W' x D
    semantic: np.ndarray  # N x H' x W'
    extra: dict = field(default_factory=dict)

    @property
    def gt_masks(self) -> np.ndarray:
        return (self.labels >= PED_BASE).astype(np.float64)


def ring_cameras(cfg: SynthConfig) -> CalibrationSet:
    """Inward-looking cameras evenly spaced on a ring around the area."""
    w, h = cfg.area
    cx, cy = w / 2, h / 2
    radius = 0.5 * np.hypot(w, h) + cfg.camera_margin
    K = intrinsic_from_fov(cfg.image_width, cfg.image_height, cfg.fov_deg)
    cams = []
    for n in range(cfg.num_cameras):
        ang = np.pi / 4 + 2 * np.pi * n / cfg.num_cameras
        eye = (cx + radius * np.cos(ang), cy + radius * np.sin(ang), cfg.camera_height)
        cams.append(CameraModel.look_at(eye, (cx, cy, 0.0), K, cfg.image_width, cfg.image_height, n))
    return CalibrationSet(cams, (0.0, 0.0, w, h))


def _ellipsoid_hits(origin, dirs, centers, axes):
    """Nearest positive hit distance per ray and ellipsoid, ``inf`` on a miss."""
    t = np.full(dirs.shape[:-1] + (len(centers),), np.inf)
    for k, (c, ax) in enumerate(zip(centers, axes)):
        o = (origin - c) / ax
        d = dirs / ax
        a = np.einsum("...i,...i->...", d, d)
        b = 2 * np.einsum("...i,i->...", d, o)
        cc = o @ o - 1.0
        disc = b * b - 4 * a * cc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        tk = np.where(t0 > 0, t0, t1)
        t[..., k] = np.where(ok & (tk > 0), tk, np.inf)
    return t


def _box_hit(origin, dirs, lower, upper):
    from .renderer import ray_box_intervals

    t_near, t_far, hit = ray_box_intervals(origin, dirs, lower, upper)
    # camera outside the box: entering distance
    return np.where(hit & (t_near > 0), t_near, np.inf)


def classify_pixels(camera, width, height, positions, cfg, box):
    """Per-pixel class labels and hit points for a ``height x width`` sampling of the image."""
    jj, ii = np.meshgrid(np.arange(width), np.arange(height))
    u = (jj + 0.5) * (camera.image_width / width)
    v = (ii + 0.5) * (camera.image_height / height)
    origin, dirs = pixel_rays(camera, u, v)
    G = len(positions)
    r, hh = cfg.ped_radius, cfg.ped_height
    cols = [np.full((height, width), np.inf)]
    with np.errstate(divide="ignore", invalid="ignore"):
        cols[0] = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    labels = [GROUND]
    if box is not None:
        cols.append(_box_hit(origin, dirs, *box))
        labels.append(BOX)
    if G:
        centers = np.column_stack([positions, np.full(G, hh / 2)])
        axes = np.tile([r, r, hh / 2], (G, 1))
        te = _ellipsoid_hits(origin, dirs, centers, axes)
        cols.extend(np.moveaxis(te, -1, 0))
        labels.extend(PED_BASE + np.arange(G))
    t = np.stack(cols, axis=-1)
    nearest = t.argmin(axis=-1)
    lab = np.asarray(labels)[nearest]
    tmin = t.min(axis=-1)
    lab = np.where(np.isfinite(tmin), lab, SKY)
    hit = origin + np.where(np.isfinite(tmin), tmin, 0.0)[..., None] * dirs
    return lab, hit


def _ped_colors(G, rng):
    hues = (np.arange(G) / max(G, 1) + rng.uniform(0, 1)) % 1.0
    return np.array([colorsys.hsv_to_rgb(h, 0.8, 0.85) for h in hues]).reshape(G, 3)


def _shade(labels, hit, ped_colors, cfg):
    img = np.empty(labels.shape + (3,))
    img[:] = SKY_COLOR
    g = labels == GROUND
    checker = (np.floor(hit[..., 0]) + np.floor(hit[..., 1])) % 2
    img[g] = (0.45 + 0.1 * checker[g])[:, None]
    img[labels == BOX] = cfg.box_color
    ped = labels >= PED_BASE
    img[ped] = ped_colors[labels[ped]]
    return img


def class_embeddings(cfg: SynthConfig, rng):
    """Background, pedestrian and distractor embeddings in ``D - 3`` dims.

    Both object classes share an objectness offset from the background and
    differ from each other by a smaller class-specific offset.
    """
    q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim - 3, 3)))
    background = np.zeros(cfg.feature_dim - 3)
    obj = cfg.objectness_scale * q[:, 0]
    ped = obj + cfg.class_scale / np.sqrt(2) * q[:, 1]
    box = obj + cfg.class_scale / np.sqrt(2) * q[:, 2]
    return background, ped, box


def _place(cfg: SynthConfig, rng, calib):
    w, h = cfg.area
    margin = cfg.ped_radius + 0.2
    for _ in range(cfg.max_attempts):
        box = None
        if cfg.distractor:
            bx, by, bz = cfg.box_size
            x0 = rng.uniform(0.2, w - bx - 0.2)
            y0 = rng.uniform(0.2, h - by - 0.2)
            box = (np.array([x0, y0, 0.0]), np.array([x0 + bx, y0 + by, bz]))
        pos = []
        tries = 0
        while len(pos) < cfg.num_pedestrians and tries < 200:
            tries += 1
            p = rng.uniform([margin, margin], [w - margin, h - margin])
            if any(np.hypot(*(p - q)) < cfg.min_separation for q in pos):
                continue
            if box is not None:
                gap = cfg.ped_radius + 0.3
                if (box[0][0] - gap < p[0] < box[1][0] + gap) and (box[0][1] - gap < p[1] < box[1][1] + gap):
                    continue
            pos.append(p)
        if len(pos) < cfg.num_pedestrians:
            continue
        positions = np.array(pos).reshape(-1, 2)
        labels = [
            classify_pixels(c, cfg.image_width, cfg.image_height, positions, cfg, box)[0]
            for c in calib.cameras
        ]
        seen = np.zeros(cfg.num_pedestrians, dtype=int)
        for lab in labels:
            seen += np.isin(np.arange(cfg.num_pedestrians), lab)
        box_seen = box is None or sum(np.any(lab == BOX) for lab in labels) >= 2
        if np.all(seen >= 2) and box_seen:
            return positions, box
    raise PlacementError(f"could not place the scene in {cfg.max_attempts} attempts")


def build_scene(cfg: SynthConfig) -> SynthScene:
    rng = np.random.default_rng(cfg.seed)
    calib = ring_cameras(cfg)
    positions, box = _place(cfg, rng, calib)
    ped_colors = _ped_colors(len(positions), rng)
    bg_emb, ped_emb, box_emb = class_embeddings(cfg, rng)

    s = cfg.feature_downsample
    Hf, Wf = cfg.image_height // s, cfg.image_width // s
    images, labels, feats, sems = [], [], [], []
    for cam in calib.cameras:
        lab, hit = classify_pixels(cam, cfg.image_width, cfg.image_height, positions, cfg, box)
        images.append(_shade(lab, hit, ped_colors, cfg))
        labels.append(lab)
        flab, fhit = classify_pixels(cam, Wf, Hf, positions, cfg, box)
        color = _shade(flab, fhit, ped_colors, cfg)
        emb = np.where(
            (flab >= PED_BASE)[..., None], ped_emb,
            np.where((flab == BOX)[..., None], box_emb, bg_emb),
        )
        f = np.concatenate([color, emb], axis=-1)
        feats.append(f + cfg.noise * rng.standard_normal(f.shape))
        sem = np.where(flab >= PED_BASE, cfg.semantic_fg, cfg.semantic_bg)
        sems.append(np.clip(sem + cfg.noise * rng.standard_normal(sem.shape), -1.0, 1.0))
    return SynthScene(
        cfg, calib, positions, ped_colors, box,
        np.stack(images), np.stack(labels), np.stack(feats), np.stack(sems),
    )


def write_scene(scene: SynthScene, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_calibration(out / "calibration.json", scene.calibration)
    for n, cam in enumerate(scene.calibration.cameras):
        vid = cam.view_id
        tensorio.write_tensor(out / "features" / f"view_{vid}.vpt", scene.features[n])
        tensorio.write_tensor(out / "semantic" / f"view_{vid}.vpt", scene.semantic[n])
        tensorio.write_tensor(out / "images" / f"view_{vid}.vpt", scene.images[n])
        tensorio.write_tensor(out / "gt_masks" / f"view_{vid}.vpt", scene.gt_masks[n])
    tensorio.write_tensor(out / "gt_positions.vpt", scene.positions.reshape(-1, 2))
    (out / "synth_config.json").write_text(json.dumps(asdict(scene.config), indent=2) + "\n")
    return out


def generate(cfg: SynthConfig, out_dir=None) -> SynthScene:
    """Build a scene and, if ``out_dir`` is given, write the dataset layout there."""
    scene = build_scene(cfg)
    if out_dir is not None:
        write_scene(scene, out_dir)
    return scene


def ideal_masks(cfg: SynthConfig, scene: SynthScene | None = None) -> np.ndarray:
    """Exact pedestrian masks ``N x H x W`` recomputed from the scene geometry."""
    scene = scene or build_scene(cfg)
    out = []
    for cam in scene.calibration.cameras:
        lab, _ = classify_pixels(cam, cfg.image_width, cfg.image_height, scene.positions, cfg, scene.box)
        out.append((lab >= PED_BASE).astype(np.float64))
    return np.stack(out)
