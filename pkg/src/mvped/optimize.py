"""Rendering losses, the vertical BEV regularizer, and the Adam fitting loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .renderer import RenderConfig, ViewRenderer
from .volume import (
    DecoderParams,
    FusedVolume,
    GridSpec,
    SceneVolume,
    decode_logits,
    fuse,
    lift_features,
    sigmoid,
)

log = logging.getLogger(__name__)


class FitDivergenceError(RuntimeError):
    def __init__(self, iteration, report=None):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.report = report


@dataclass
class LossReport:
    l_color: float
    l_mask: float
    l_vbr: float
    total: float
    iteration: int = 0


@dataclass
class FitConfig:
    iterations: int = 500
    learning_rate: float | None = None  # None: 0.1 for direct, 0.01 for linear
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    huber_delta: float = 1.0
    vbr_weight: float = 1.0
    use_color_loss: bool = True
    temperature: float = 1.0
    fusion: str = "softmax"
    decoder: str = "direct"
    init_density_logit: float = -5.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0 or not self.huber_delta > 0 or not self.temperature > 0:
            raise ValueError("eps, huber_delta and temperature must be positive")
        if self.vbr_weight < 0:
            raise ValueError("vbr_weight must be non-negative")
        if self.decoder not in ("direct", "linear"):
            raise ValueError(f"unknown decoder {self.decoder!r}")
        if self.fusion not in ("softmax", "add", "concat_project"):
            raise ValueError(f"unknown fusion {self.fusion!r}")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 0.1 if self.decoder == "direct" else 0.01


def huber_loss(pred, target, delta=1.0):
    """Mean Huber loss and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    e = pred - target
    a = np.abs(e)
    quad = a <= delta
    per = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
    n = max(e.size, 1)
    grad = np.where(quad, e, delta * np.sign(e)) / n
    return float(per.sum() / n), grad


def vbr_loss(density):
    """Mean over ground cells of the absolute column-wise max density.

    The subgradient goes to the lowest-z argmax voxel of each column; with
    non-negative density the derivative of ``|max|`` is taken as 1.
    """
    D = np.asarray(density, dtype=np.float64)
    if D.size and D.min() < 0:
        raise ValueError("density must be non-negative")
    X, Y, _ = D.shape
    loss = float(np.abs(D.max(axis=2)).sum() / (X * Y))
    grad = np.zeros_like(D)
    ix, iy = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    grad[ix, iy, D.argmax(axis=2)] = 1.0 / (X * Y)
    return loss, grad


def color_mask_targets(masks, images):
    """Mask targets ``N x H x W`` and masked color targets ``N x 3 x H x W``.

    ``images`` is ``N x H x W x 3``.
    """
    M = np.asarray(masks, dtype=np.float64)
    I = np.asarray(images, dtype=np.float64)
    if I.shape != M.shape + (3,):
        raise ValueError(f"images {I.shape} do not match masks {M.shape}")
    return M, np.moveaxis(I * M[..., None], -1, 1)


def _area_matrix(n_in, n_out):
    """``n_out x n_in`` matrix averaging input cells over each output cell."""
    edges_in = np.arange(n_in + 1) / n_in
    edges_out = np.arange(n_out + 1) / n_out
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    return np.clip(hi - lo, 0, None) * n_out


def area_resample(images, height, width):
    """Area-average the last two axes of ``images`` to ``height x width``."""
    a = np.asarray(images, dtype=np.float64)
    h, w = a.shape[-2:]
    if (h, w) == (height, width):
        return a.copy()
    Ah = _area_matrix(h, height)
    Aw = _area_matrix(w, width)
    return np.einsum("ij,...jk,lk->...il", Ah, a, Aw)


def render_targets(masks, images, height, width):
    """Pseudo-label targets at render resolution: binarized masks and masked colors."""
    M = (area_resample(masks, height, width) >= 0.5).astype(np.float64)
    I = area_resample(np.moveaxis(np.asarray(images, dtype=np.float64), -1, 1), height, width)
    return M, I * M[:, None]


def total_loss(rendered_masks, rendered_colors, mask_targets, color_targets, density, cfg: FitConfig):
    """Loss report plus gradients w.r.t. rendered masks, rendered colors and density."""
    l_mask, g_mask = huber_loss(rendered_masks, mask_targets, cfg.huber_delta)
    if cfg.use_color_loss:
        l_color, g_color = huber_loss(rendered_colors, color_targets, cfg.huber_delta)
    else:
        l_color, g_color = 0.0, np.zeros_like(np.asarray(rendered_colors, dtype=np.float64))
    l_vbr, g_vbr = vbr_loss(density)
    total = l_color + l_mask + cfg.vbr_weight * l_vbr
    report = LossReport(l_color, l_mask, l_vbr, total)
    return report, g_mask, g_color, cfg.vbr_weight * g_vbr


class Objective:
    """The full training objective as a function of decoder parameters."""

    def __init__(self, cameras, grid: GridSpec, mask_targets, color_targets, cfg: FitConfig,
                 render_cfg: RenderConfig = RenderConfig(), fused: FusedVolume | None = None):
        self.grid, self.cfg, self.fused = grid, cfg, fused
        self.renderers = [ViewRenderer(c, grid, render_cfg) for c in cameras]
        self.mask_targets = np.asarray(mask_targets, dtype=np.float64)
        self.color_targets = np.asarray(color_targets, dtype=np.float64)
        expect = (len(cameras), render_cfg.render_height, render_cfg.render_width)
        if self.mask_targets.shape != expect:
            raise ValueError(f"mask targets {self.mask_targets.shape}, expected {expect}")
        if self.color_targets.shape != (expect[0], 3) + expect[1:]:
            raise ValueError(f"color targets {self.color_targets.shape} do not match render size")
        self.coverage = None if fused is None else (fused.coverage > 0)

    def scene(self, params: DecoderParams) -> SceneVolume:
        D, C = self._decode(params)
        return SceneVolume(D, C, self.grid)

    def _decode(self, params):
        dl, cl = decode_logits(self.fused, params)
        D = sigmoid(dl)
        if self.coverage is not None:
            D = np.where(self.coverage, D, 0.0)
        return D, sigmoid(cl)

    def __call__(self, params: DecoderParams, need_grad=True):
        D, C = self._decode(params)
        outs = [r.forward(D, C) for r in self.renderers]
        masks = np.stack([o[0] for o in outs])
        colors = np.stack([o[1] for o in outs])
        report, g_mask, g_color, g_D = total_loss(
            masks, colors, self.mask_targets, self.color_targets, D, self.cfg
        )
        if not need_grad:
            return report, None
        g_C = np.zeros_like(C)
        for n, (r, o) in enumerate(zip(self.renderers, outs)):
            gd, gc = r.backward(o[2], g_mask[n], g_color[n])
            g_D += gd
            g_C += gc
        return report, self._param_grads(params, D, C, g_D, g_C)

    def _param_grads(self, params, D, C, g_D, g_C):
        g_dl = g_D * D * (1.0 - D)
        if self.coverage is not None:
            g_dl = np.where(self.coverage, g_dl, 0.0)
        g_cl = g_C * C * (1.0 - C)
        if params.mode == "direct":
            return {"density_logits": g_dl, "color_logits": g_cl}
        V = self.fused.values.reshape(self.fused.values.shape[0], -1)
        return {
            "w_sigma": V @ g_dl.reshape(-1),
            "b_sigma": np.array([g_dl.sum()]),
            "W_c": g_cl.reshape(3, -1) @ V.T,
            "b_c": g_cl.reshape(3, -1).sum(axis=1),
        }


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = p - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return out


def init_params(cfg: FitConfig, grid: GridSpec, channels: int | None = None) -> DecoderParams:
    if cfg.decoder == "direct":
        return DecoderParams.direct(grid.dims, cfg.init_density_logit, 0.0)
    if channels is None:
        raise ValueError("linear decoder needs the feature channel count")
    return DecoderParams.linear(channels, seed=cfg.seed, b_sigma=cfg.init_density_logit)


def build_fused(cameras, features, grid: GridSpec, cfg: FitConfig) -> FusedVolume:
    vols = [lift_features(c, f, grid) for c, f in zip(cameras, features)]
    return fuse(vols, cfg.fusion, cfg.temperature, cfg.seed)


def fit(cameras, images, masks, grid: GridSpec, cfg: FitConfig = FitConfig(),
        render_cfg: RenderConfig = RenderConfig(), features=None, callback=None):
    """Optimize decoder parameters against multi-view pseudo labels.

    ``images`` is ``N x H x W x 3``, ``masks`` ``N x H x W`` and ``features``
    ``N x H' x W' x C``.  Features are lifted and fused to provide voxel
    coverage (and, for the linear decoder, the decoder input).  Returns the
    scene at the lowest total loss, the loss history and the best parameters.
    """
    if len(cameras) < 2:
        raise ValueError("fitting needs at least 2 views")
    if features is None:
        # coverage only: lift a constant map
        features = [np.ones((c.image_height, c.image_width, 1)) for c in cameras]
    fused = build_fused(cameras, features, grid, cfg)
    mt, ct = render_targets(masks, images, render_cfg.render_height, render_cfg.render_width)
    objective = Objective(cameras, grid, mt, ct, cfg, render_cfg, fused)
    params = init_params(cfg, grid, fused.values.shape[0])
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    arrays = params.arrays()
    history = []
    best = (np.inf, params)
    for it in range(cfg.iterations + 1):
        report, grads = objective(params, need_grad=it < cfg.iterations)
        report.iteration = it
        if not np.isfinite(report.total):
            raise FitDivergenceError(it, report)
        history.append(report)
        if report.total < best[0]:
            best = (report.total, params)
        if callback is not None:
            callback(report)
        if it == cfg.iterations:
            break
        arrays = adam.step(arrays, grads)
        params = params.with_arrays(arrays)
    return objective.scene(best[1]), history, best[1]
