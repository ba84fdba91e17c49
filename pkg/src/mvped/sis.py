"""Iterative-PCA pseudo-label segmentation with semantic side selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SegmentationError(RuntimeError):
    pass


class ConvergenceError(SegmentationError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (final angular change {residual:.3g})")
        self.residual = residual


@dataclass
class PcaResult:
    direction: np.ndarray
    scores: np.ndarray
    threshold: float = 0.0
    eigenvalue: float = 0.0
    iterations: int = 0


@dataclass
class SisConfig:
    iterations: int = 2  # T_PCA
    threshold: float = 0.0
    semantic_selection: bool = True
    power_iters: int = 200
    power_tol: float = 1e-7
    seed: int = 0


def center_features(stack) -> np.ndarray:
    """Subtract the per-dimension mean over all pixels; returns ``P x D``."""
    X = np.asarray(stack, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    if X.shape[0] < 2:
        raise SegmentationError("centering needs at least 2 pixels")
    return X - X.mean(axis=0)


def _skewness(s):
    m2 = np.mean(s * s)
    if m2 == 0:
        return 0.0
    return float(np.mean(s ** 3) / m2 ** 1.5)


def first_principal_component(X, iters=200, tol=1e-7, seed=0) -> PcaResult:
    """Dominant covariance eigenvector of centered ``P x D`` data by power iteration.

    The iterated matrix is squared after every step, so step ``k`` applies
    ``cov ** (2 ** k)``.

    The sign is fixed so the score distribution has non-negative skewness;
    symmetric score distributions fall back to a positive first nonzero
    component.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cov = X.T @ X / X.shape[0]
    if not np.any(cov):
        raise SegmentationError("zero covariance: all features are identical")
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(cov.shape[0])
    d /= np.linalg.norm(d)
    # step k multiplies by cov^(2^k): near-degenerate spectra converge in tens
    # of steps instead of thousands
    M = cov / np.abs(cov).max()
    change = np.inf
    for it in range(1, iters + 1):
        nxt = M @ d
        norm = np.linalg.norm(nxt)
        if norm == 0:
            # start vector landed in the null space
            nxt = rng.standard_normal(cov.shape[0])
            norm = np.linalg.norm(nxt)
        nxt /= norm
        change = float(np.arccos(np.clip(abs(nxt @ d), -1.0, 1.0)))
        d = nxt
        if change < tol:
            break
        M = M @ M
        M /= np.abs(M).max()
    else:
        raise ConvergenceError(f"power iteration did not converge in {iters} iterations", change)

    scores = X @ d
    skew = _skewness(scores)
    if abs(skew) < 1e-12:
        first = d[np.flatnonzero(np.abs(d) > 1e-12)[0]]
        flip = first < 0
    else:
        flip = skew < 0
    if flip:
        d, scores = -d, -scores
    return PcaResult(d, scores, 0.0, float(d @ cov @ d), it)


def threshold_scores(scores, threshold=0.0) -> np.ndarray:
    return (np.asarray(scores) > threshold).astype(np.float64)


def semantic_side_select(pos, neg, semantic) -> np.ndarray:
    """Pick the candidate foreground with the larger mean semantic similarity.

    Ties go to the candidate with fewer pixels (then to ``pos``).
    """
    pos = np.asarray(pos) > 0.5
    neg = np.asarray(neg) > 0.5
    sem = np.asarray(semantic, dtype=np.float64)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 and n_neg == 0:
        raise SegmentationError("both candidate foregrounds are empty")
    if n_neg == 0:
        return pos.astype(np.float64)
    if n_pos == 0:
        return neg.astype(np.float64)
    m_pos, m_neg = sem[pos].mean(), sem[neg].mean()
    if m_pos > m_neg or (m_pos == m_neg and n_pos <= n_neg):
        return pos.astype(np.float64)
    return neg.astype(np.float64)


def upsample_nearest(masks, height, width) -> np.ndarray:
    """Nearest-neighbour upsampling of ``N x H' x W'`` masks by an integer factor."""
    masks = np.asarray(masks)
    h, w = masks.shape[-2:]
    if height % h or width % w:
        raise ValueError(f"feature grid {h}x{w} does not divide image size {height}x{width}")
    return masks.repeat(height // h, axis=-2).repeat(width // w, axis=-1)


def sis_iterations(features, semantic, cfg: SisConfig):
    """Run the segmentation; returns the list of masks ``M^1..M^T`` at feature resolution."""
    X = np.asarray(features, dtype=np.float64)
    grid_shape = X.shape[:-1]
    X = X.reshape(-1, X.shape[-1])
    if cfg.iterations < 1:
        raise ValueError("T_PCA must be >= 1")
    if X.shape[1] < 2:
        raise SegmentationError("features need D >= 2")
    if cfg.semantic_selection:
        if semantic is None:
            raise SegmentationError("semantic selection enabled but no semantic map given")
        sem = np.asarray(semantic, dtype=np.float64).reshape(-1)
        if sem.shape[0] != X.shape[0]:
            raise SegmentationError(f"semantic map has {sem.shape[0]} pixels, features have {X.shape[0]}")
        if sem.min() < -1.0 or sem.max() > 1.0:
            raise SegmentationError("semantic similarities must lie in [-1, 1]")

    active = np.flatnonzero(np.ones(X.shape[0], dtype=bool))
    history = []
    for t in range(1, cfg.iterations + 1):
        if active.size < 2:
            raise SegmentationError(f"foreground emptied out at iteration {t}")
        Xc = center_features(X[active])
        pca = first_principal_component(Xc, cfg.power_iters, cfg.power_tol, cfg.seed)
        pos = threshold_scores(pca.scores, cfg.threshold)
        if cfg.semantic_selection:
            keep = semantic_side_select(pos, 1.0 - pos, sem[active])
        else:
            keep = pos
        active = active[keep > 0.5]
        if active.size == 0:
            raise SegmentationError(f"foreground emptied out at iteration {t}")
        m = np.zeros(X.shape[0])
        m[active] = 1.0
        history.append(m.reshape(grid_shape))
    return history


def sis_segment(features, semantic, cfg: SisConfig | None = None, image_size=None) -> np.ndarray:
    """Binary ``N x H x W`` pedestrian masks from ``N x H' x W' x D`` features.

    ``image_size`` is ``(H, W)``; when given the masks are upsampled to it.
    """
    cfg = cfg or SisConfig()
    mask = sis_iterations(features, semantic, cfg)[-1]
    if image_size is not None:
        mask = upsample_nearest(mask, *image_size)
    return mask


def mask_iou(a, b) -> float:
    a = np.asarray(a) > 0.5
    b = np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)
