"""Emission-absorption volume rendering of a voxel scene, with analytic gradients.

Densities are used directly as per-sample opacities in [0, 1].  Sample
positions depend only on the camera, grid and :class:`RenderConfig`, so each
view's trilinear lookup is precomputed once as a sparse ``(rays*S) x voxels``
matrix; forward is a sparse-dense product, backward its transpose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import CameraModel, pixel_rays
from .volume import GridSpec, SceneVolume


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    render_width: int = 64
    render_height: int = 64
    chunk_size: int = 4096

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if min(self.render_width, self.render_height, self.chunk_size) < 1:
            raise ValueError("render size and chunk size must be positive")


@dataclass
class RenderedView:
    mask: np.ndarray  # H x W
    color: np.ndarray  # 3 x H x W


def ray_box_intervals(origins, dirs, lower, upper):
    """Slab intersection for many rays; returns ``(t_near, t_far, hit)``, clipped to t >= 0."""
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lower - o) * inv
        t1 = (upper - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: inside the slab is unconstrained, outside misses
    para = d == 0
    inside = (o >= lower) & (o <= upper)
    lo = np.where(para, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(para, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    return t_near, t_far, t_far > t_near


def ray_box_intersect(origin, direction, grid: GridSpec):
    """``(t_near, t_far)`` of a ray through the grid box, or ``None`` on a miss."""
    t_near, t_far, hit = ray_box_intervals(
        np.asarray(origin, dtype=np.float64)[None], np.asarray(direction, dtype=np.float64)[None],
        grid.lower, grid.upper,
    )
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def trilinear_weights(grid: GridSpec, points):
    """Corner voxel indices ``(M, 8)`` and weights ``(M, 8)`` for ``(M, 3)`` points.

    Points outside the hull of voxel centers get all-zero weights.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dims = np.asarray(grid.dims)
    f = (p - grid.lower) / grid.voxel_size - 0.5
    inside = np.all((f >= 0) & (f <= dims - 1), axis=1)
    i0 = np.clip(np.floor(f), 0, np.maximum(dims - 2, 0)).astype(np.int64)
    frac = np.clip(f - i0, 0.0, 1.0)
    i1 = np.minimum(i0 + 1, dims - 1)
    X, Y, Z = grid.dims
    idx = np.empty((p.shape[0], 8), dtype=np.int64)
    w = np.empty((p.shape[0], 8))
    k = 0
    for cx in (0, 1):
        ix = i1[:, 0] if cx else i0[:, 0]
        wx = frac[:, 0] if cx else 1 - frac[:, 0]
        for cy in (0, 1):
            iy = i1[:, 1] if cy else i0[:, 1]
            wy = frac[:, 1] if cy else 1 - frac[:, 1]
            for cz in (0, 1):
                iz = i1[:, 2] if cz else i0[:, 2]
                wz = frac[:, 2] if cz else 1 - frac[:, 2]
                idx[:, k] = (ix * Y + iy) * Z + iz
                w[:, k] = wx * wy * wz
                k += 1
    w[~inside] = 0.0
    return idx, w


def trilinear_sample(field, grid: GridSpec, p):
    """Trilinear interpolation of a ``X x Y x Z`` or ``C x X x Y x Z`` field at one point."""
    field = np.asarray(field, dtype=np.float64)
    idx, w = trilinear_weights(grid, p)
    if field.ndim == 3:
        return float(field.reshape(-1)[idx[0]] @ w[0])
    flat = field.reshape(field.shape[0], -1)
    return flat[:, idx[0]] @ w[0]


def composite_ea(sigma, color):
    """Front-to-back compositing of one ray; returns ``(alpha, rgb, weights)``."""
    s = np.asarray(sigma, dtype=np.float64)[None]
    c = np.asarray(color, dtype=np.float64)[None]
    alpha, rgb, w, _ = composite(s, c)
    return float(alpha[0]), rgb[0], w[0]


def composite(sigma, color):
    """Vectorized compositing over rays ``(R, S)`` with colors ``(R, S, 3)``.

    Returns alpha ``(R,)``, rgb ``(R, 3)``, weights ``(R, S)`` and the
    transmittance ``T_i = prod_{j<i} (1 - sigma_j)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    alpha, rgb, w, T = _composite_sr(np.ascontiguousarray(sigma.T), np.moveaxis(color, 1, 0))
    return alpha, rgb, w.T, T.T


def composite_backward(sigma, color, w, T, g_alpha, g_rgb):
    """Gradients of ``g_alpha . alpha + g_rgb . rgb`` w.r.t. sigma ``(R, S)`` and color ``(R, S, 3)``.

    Uses the suffix recurrence ``B_k = s_{k+1} e_{k+1} + (1 - s_{k+1}) B_{k+1}``
    so that ``dL/ds_k = T_k (e_k - B_k)`` needs no division by ``1 - s_k``.
    """
    g_s, g_c = _composite_backward_sr(
        np.ascontiguousarray(np.asarray(sigma, dtype=np.float64).T),
        np.moveaxis(np.asarray(color, dtype=np.float64), 1, 0),
        np.ascontiguousarray(w.T), np.ascontiguousarray(T.T),
        np.asarray(g_alpha, dtype=np.float64), np.asarray(g_rgb, dtype=np.float64),
    )
    return g_s.T, np.moveaxis(g_c, 0, 1)


# Sample-major variants: sigma (S, R), color (S, R, 3).  The renderer keeps
# this layout so the per-sample recurrences run over contiguous rows.

def _composite_sr(sigma, color):
    trans = np.cumprod(1.0 - sigma, axis=0)
    T = np.empty_like(sigma)
    T[0] = 1.0
    T[1:] = trans[:-1]
    w = sigma * T
    alpha = 1.0 - trans[-1]
    rgb = np.einsum("sr,src->rc", w, color)
    return alpha, rgb, w, T


def _composite_backward_sr(sigma, color, w, T, g_alpha, g_rgb):
    e = np.einsum("src,rc->sr", color, g_rgb)
    e += g_alpha
    B = np.empty_like(sigma)
    B[-1] = 0.0
    for k in range(sigma.shape[0] - 2, -1, -1):
        B[k] = sigma[k + 1] * (e[k + 1] - B[k + 1]) + B[k + 1]
    g_sigma = T * (e - B)
    g_color = w[:, :, None] * g_rgb[None, :, :]
    return g_sigma, g_color


try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None


class _Chunk:
    __slots__ = ("pixels", "idx", "w", "op", "op_t", "n_rays")

    def __init__(self, pixels, idx, w, backend, num_voxels):
        self.pixels = pixels
        self.n_rays = pixels.size
        self.idx = self.w = self.op = self.op_t = None
        if backend == "numba":
            self.idx = np.ascontiguousarray(idx.transpose(1, 0, 2), dtype=np.int32)
            self.w = np.ascontiguousarray(w.transpose(1, 0, 2))
        else:
            S = w.shape[0]
            rows = np.repeat(np.arange(S * self.n_rays), 8)
            self.op = sp.csr_matrix(
                (w.ravel(), (rows, idx.ravel())), shape=(S * self.n_rays, num_voxels)
            )
            self.op.eliminate_zeros()
            self.op_t = self.op.T.tocsr()


class ViewRenderer:
    """Renders one camera view of any scene on a fixed grid.

    ``backend`` is ``"numba"`` (compiled kernels, default when available) or
    ``"sparse"`` (scipy sparse matrices); both compute the same quantities.
    """

    def __init__(self, camera: CameraModel, grid: GridSpec, cfg: RenderConfig = RenderConfig(),
                 backend: str | None = None):
        if backend is None:
            backend = "numba" if _kernels is not None else "sparse"
        if backend not in ("numba", "sparse"):
            raise ValueError(f"unknown backend {backend!r}")
        self.camera, self.grid, self.cfg, self.backend = camera, grid, cfg, backend
        H, W, S = cfg.render_height, cfg.render_width, cfg.samples_per_ray
        jj, ii = np.meshgrid(np.arange(W), np.arange(H))
        u = (jj.ravel() + 0.5) * (camera.image_width / W)
        v = (ii.ravel() + 0.5) * (camera.image_height / H)
        origin, dirs = pixel_rays(camera, u, v)
        t_near, t_far, hit = ray_box_intervals(origin, dirs, grid.lower, grid.upper)
        mid = (np.arange(S) + 0.5) / S
        self.chunks = []
        hit_pixels = np.flatnonzero(hit)
        for start in range(0, hit_pixels.size, cfg.chunk_size):
            pix = hit_pixels[start:start + cfg.chunk_size]
            t = t_near[pix] + (t_far[pix] - t_near[pix]) * mid[:, None]
            pts = origin + t[..., None] * dirs[pix][None, :, :]
            idx, w = trilinear_weights(grid, pts.reshape(-1, 3))
            self.chunks.append(_Chunk(
                pix, idx.reshape(S, pix.size, 8), w.reshape(S, pix.size, 8), backend, grid.num_voxels
            ))

    @property
    def shape(self):
        return self.cfg.render_height, self.cfg.render_width

    def _field(self, density, color):
        return np.ascontiguousarray(np.concatenate(
            [np.asarray(density, dtype=np.float64).reshape(-1, 1),
             np.asarray(color, dtype=np.float64).reshape(3, -1).T], axis=1,
        ))

    def forward(self, density, color):
        """Returns ``(mask, rgb, cache)``; ``cache`` feeds :meth:`backward`."""
        S = self.cfg.samples_per_ray
        F = self._field(density, color)
        npix = self.shape[0] * self.shape[1]
        mask = np.zeros(npix)
        rgb = np.zeros((npix, 3))
        cache = []
        for ch in self.chunks:
            if self.backend == "numba":
                sigma = np.empty((ch.n_rays, S))
                col = np.empty((ch.n_rays, S, 3))
                T = np.empty((ch.n_rays, S))
                a = np.empty(ch.n_rays)
                c = np.empty((ch.n_rays, 3))
                _kernels.march_forward(ch.idx, ch.w, F, sigma, col, T, a, c)
                w = None
            else:
                vals = (ch.op @ F).reshape(S, ch.n_rays, 4)
                sigma = np.ascontiguousarray(vals[..., 0])
                col = vals[..., 1:]
                a, c, w, T = _composite_sr(sigma, col)
            mask[ch.pixels] = a
            rgb[ch.pixels] = c
            cache.append((sigma, col, w, T))
        return mask.reshape(self.shape), rgb.T.reshape((3,) + self.shape), cache

    def backward(self, cache, g_mask, g_color):
        """Gradients w.r.t. density ``X x Y x Z`` and color ``3 x X x Y x Z``."""
        S = self.cfg.samples_per_ray
        gm = np.asarray(g_mask, dtype=np.float64).reshape(-1)
        gc = np.asarray(g_color, dtype=np.float64).reshape(3, -1).T
        grad = np.zeros((self.grid.num_voxels, 4))
        # fixed chunk order keeps the reduction deterministic
        for ch, (sigma, col, w, T) in zip(self.chunks, cache):
            if self.backend == "numba":
                _kernels.march_backward(
                    ch.idx, ch.w, sigma, col, T,
                    np.ascontiguousarray(gm[ch.pixels]), np.ascontiguousarray(gc[ch.pixels]), grad,
                )
            else:
                g_s, g_c = _composite_backward_sr(sigma, col, w, T, gm[ch.pixels], gc[ch.pixels])
                G = np.concatenate([g_s[..., None], g_c], axis=2).reshape(S * ch.n_rays, 4)
                grad += ch.op_t @ G
        dims = self.grid.dims
        return grad[:, 0].reshape(dims), grad[:, 1:].T.reshape((3,) + dims)

    def render(self, scene: SceneVolume) -> RenderedView:
        mask, rgb, _ = self.forward(scene.density, scene.color)
        return RenderedView(mask, rgb)


def render_view(scene: SceneVolume, camera: CameraModel, cfg: RenderConfig = RenderConfig()) -> RenderedView:
    return ViewRenderer(camera, scene.grid, cfg).render(scene)


def render_backward(scene: SceneVolume, camera: CameraModel, cfg: RenderConfig, g_mask, g_color):
    r = ViewRenderer(camera, scene.grid, cfg)
    _, _, cache = r.forward(scene.density, scene.color)
    return r.backward(cache, g_mask, g_color)
