"""BEV occupancy, peak extraction, and MODA/MODP evaluation against ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linear_sum_assignment

from .volume import GridSpec


class MetricsError(ValueError):
    def __init__(self, message, fp=0):
        super().__init__(message)
        self.fp = fp


@dataclass
class Detection:
    x: float
    y: float
    score: float


@dataclass
class MetricsReport:
    moda: float
    modp: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    def to_dict(self):
        return asdict(self)


def bev_project(density) -> np.ndarray:
    """Column-wise max over z: ``X x Y x Z`` to ``X x Y``."""
    return np.asarray(density, dtype=np.float64).max(axis=2)


def extract_peaks(bev, grid: GridSpec, score_thr=0.3, nms_radius=0.5):
    """Local maxima above ``score_thr`` with greedy radius NMS and centroid refinement.

    Each kept peak is moved to the score-weighted centroid of above-threshold
    cells within ``nms_radius``.  If that brings two detections closer than
    ``nms_radius``, both fall back to their cell centers, which NMS already
    keeps at least ``nms_radius`` apart.
    """
    if not 0 < score_thr < 1:
        raise ValueError("score_thr must lie in (0, 1)")
    if not nms_radius > 0:
        raise ValueError("nms_radius must be positive")
    bev = np.asarray(bev, dtype=np.float64)
    if bev.shape != grid.dims[:2]:
        raise ValueError(f"BEV shape {bev.shape} does not match grid footprint {grid.dims[:2]}")
    centers = grid.bev_centers()
    local_max = bev >= maximum_filter(bev, size=3, mode="constant", cval=-np.inf)
    cand = np.argwhere(local_max & (bev >= score_thr))
    # descending score, ties in raster order
    order = np.lexsort((cand[:, 1], cand[:, 0], -bev[cand[:, 0], cand[:, 1]]))
    cand = cand[order]

    kept = []
    for ix, iy in cand:
        p = centers[ix, iy]
        if all(np.hypot(*(p - centers[k])) >= nms_radius for k in kept):
            kept.append((ix, iy))

    above = bev >= score_thr
    cells = centers[above]
    vals = bev[above]
    raw = np.array([centers[k] for k in kept]).reshape(-1, 2)
    refined = raw.copy()
    for i, p in enumerate(raw):
        near = np.hypot(*(cells - p).T) < nms_radius
        refined[i] = vals[near] @ cells[near] / vals[near].sum()
    reverted = np.zeros(len(kept), dtype=bool)
    changed = True
    while changed:
        changed = False
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                if np.hypot(*(refined[i] - refined[j])) < nms_radius:
                    for k in (i, j):
                        if not reverted[k]:
                            refined[k], reverted[k], changed = raw[k], True, True
    return [Detection(float(p[0]), float(p[1]), float(bev[k])) for p, k in zip(refined, kept)]


def match(det_xy, gt_xy, match_radius=0.5):
    """Optimal one-to-one matching within ``match_radius``.

    Maximizes the number of matched pairs, then minimizes their total
    distance.  Returns ``(det_idx, gt_idx, dist)`` arrays.
    """
    det_xy = np.asarray(det_xy, dtype=np.float64).reshape(-1, 2)
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    if len(det_xy) == 0 or len(gt_xy) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    dist = np.linalg.norm(det_xy[:, None, :] - gt_xy[None, :, :], axis=2)
    allowed = dist <= match_radius
    # any forbidden pair costs more than every allowed assignment together
    big = match_radius * (min(dist.shape) + 1) + 1.0
    cost = np.where(allowed, dist, big)
    r, c = linear_sum_assignment(cost)
    ok = allowed[r, c]
    return r[ok], c[ok], dist[r[ok], c[ok]]


def detections_xy(dets) -> np.ndarray:
    """``K x 2`` positions from a list of :class:`Detection` or an array."""
    if isinstance(dets, (list, tuple)) and dets and isinstance(dets[0], Detection):
        return np.array([[d.x, d.y] for d in dets])
    return np.asarray(dets, dtype=np.float64).reshape(-1, 2)


def match_and_score(dets, gt, match_radius=0.5) -> MetricsReport:
    if not match_radius > 0:
        raise ValueError("match_radius must be positive")
    det_xy = detections_xy(dets)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    _, _, d = match(det_xy, gt, match_radius)
    tp = len(d)
    fp = len(det_xy) - tp
    fn = len(gt) - tp
    if len(gt) == 0 and fp > 0:
        raise MetricsError(f"MODA undefined without ground truth ({fp} false positives)", fp)
    moda = 1.0 - (fp + fn) / len(gt) if len(gt) else 1.0
    modp = float(np.mean(1.0 - d / match_radius)) if tp else 0.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return MetricsReport(moda, modp, precision, recall, tp, fp, fn)
