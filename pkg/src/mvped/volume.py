"""Lifting per-view feature maps into a voxel grid, fusing views, decoding density/color."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, project_points

DEFAULT_MAX_VOXELS = 1 << 22


@dataclass(frozen=True)
class GridSpec:
    origin: tuple  # min corner (x, y, z), meters
    voxel_size: float
    dims: tuple  # (X, Y, Z)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("grid origin and dims must have 3 entries")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if min(self.dims) < 1:
            raise ValueError(f"grid dims must be positive, got {self.dims}")

    @classmethod
    def covering(cls, area, voxel_size=0.25, z_min=0.0, z_max=2.0, max_voxels=DEFAULT_MAX_VOXELS):
        """Smallest grid anchored at the area's min corner that covers ``area``."""
        xmin, ymin, xmax, ymax = area
        dims = (
            int(np.ceil((xmax - xmin) / voxel_size - 1e-9)),
            int(np.ceil((ymax - ymin) / voxel_size - 1e-9)),
            int(np.ceil((z_max - z_min) / voxel_size - 1e-9)),
        )
        grid = cls((xmin, ymin, z_min), voxel_size, dims)
        if grid.num_voxels > max_voxels:
            raise ValueError(f"grid {dims} exceeds the voxel budget of {max_voxels}")
        return grid

    @property
    def num_voxels(self) -> int:
        X, Y, Z = self.dims
        return X * Y * Z

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.voxel_size * np.asarray(self.dims)

    def centers(self) -> np.ndarray:
        """Voxel centers as an ``X x Y x Z x 3`` array."""
        axes = [
            self.origin[k] + (np.arange(self.dims[k]) + 0.5) * self.voxel_size
            for k in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def bev_centers(self) -> np.ndarray:
        """Cell centers of the ground footprint, ``X x Y x 2``."""
        return self.centers()[:, :, 0, :2]


def voxel_center(grid: GridSpec, ix: int, iy: int, iz: int) -> np.ndarray:
    idx = (ix, iy, iz)
    for i, n in zip(idx, grid.dims):
        if not 0 <= i < n:
            raise IndexError(f"voxel index {idx} out of range for dims {grid.dims}")
    return grid.lower + (np.asarray(idx, dtype=np.float64) + 0.5) * grid.voxel_size


@dataclass
class FeatureVolume:
    values: np.ndarray  # C x X x Y x Z
    visibility: np.ndarray  # X x Y x Z bool


@dataclass
class FusedVolume:
    values: np.ndarray  # C x X x Y x Z
    coverage: np.ndarray  # X x Y x Z int


def bilinear_sample(fmap: np.ndarray, fu, fv) -> np.ndarray:
    """Sample an ``H x W x C`` map at continuous index coordinates (edge-clamped)."""
    H, W = fmap.shape[:2]
    fu = np.clip(fu, 0.0, W - 1)
    fv = np.clip(fv, 0.0, H - 1)
    u0 = np.minimum(np.floor(fu).astype(np.int64), max(W - 2, 0))
    v0 = np.minimum(np.floor(fv).astype(np.int64), max(H - 2, 0))
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = (fu - u0)[..., None]
    b = (fv - v0)[..., None]
    return (
        (1 - a) * (1 - b) * fmap[v0, u0]
        + a * (1 - b) * fmap[v0, u1]
        + (1 - a) * b * fmap[v1, u0]
        + a * b * fmap[v1, u1]
    )


def lift_features(camera: CameraModel, features, grid: GridSpec) -> FeatureVolume:
    """Assign each visible voxel the feature of the pixel its center projects to.

    ``features`` is ``H' x W' x C`` at feature resolution; image coordinates are
    rescaled to it.  Voxels outside the frustum get zeros.
    """
    fmap = np.asarray(features, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[..., None]
    Hf, Wf, C = fmap.shape
    u, v, _, vis = project_points(camera, grid.centers())
    fu = u[vis] * (Wf / camera.image_width) - 0.5
    fv = v[vis] * (Hf / camera.image_height) - 0.5
    out = np.zeros(grid.dims + (C,))
    out[vis] = bilinear_sample(fmap, fu, fv)
    return FeatureVolume(np.moveaxis(out, -1, 0), vis)


def _check_grids(volumes):
    if not volumes:
        raise ValueError("need at least one volume to fuse")
    shape = volumes[0].values.shape
    for v in volumes[1:]:
        if v.values.shape != shape:
            raise ValueError(f"mismatched volume shapes {shape} vs {v.values.shape}")


def softmax_weights(volumes, temperature: float) -> np.ndarray:
    """Per-view fusion weights ``N x X x Y x Z``; invisible views get exactly 0."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    vis = np.stack([v.visibility for v in volumes])
    conf = np.stack([np.linalg.norm(v.values, axis=0) for v in volumes]) / temperature
    conf = np.where(vis, conf, -np.inf)
    top = conf.max(axis=0)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(vis, np.exp(conf - top), 0.0)
    total = e.sum(axis=0)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def fuse_softmax(volumes, temperature: float = 1.0) -> FusedVolume:
    _check_grids(volumes)
    w = softmax_weights(volumes, temperature)
    fused = sum(w[n] * v.values for n, v in enumerate(volumes))
    coverage = np.sum([v.visibility for v in volumes], axis=0).astype(np.int64)
    return FusedVolume(fused, coverage)


def concat_projection(channels: int, num_views: int, seed: int = 0) -> np.ndarray:
    """Fixed ``C x (N*C)`` matrix with orthonormal rows."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((num_views * channels, channels)))
    return q.T


def fuse_alternative(volumes, mode: str = "add", seed: int = 0) -> FusedVolume:
    _check_grids(volumes)
    vis = np.stack([v.visibility for v in volumes])
    coverage = vis.sum(axis=0).astype(np.int64)
    if mode == "add":
        total = sum(v.values for v in volumes)
        fused = np.divide(total, coverage, out=np.zeros_like(total), where=coverage > 0)
    elif mode == "concat_project":
        C = volumes[0].values.shape[0]
        P = concat_projection(C, len(volumes), seed)
        cat = np.concatenate([v.values for v in volumes], axis=0)
        fused = np.tensordot(P, cat, axes=1)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    fused = np.where(coverage > 0, fused, 0.0)
    return FusedVolume(fused, coverage)


def fuse(volumes, mode="softmax", temperature=1.0, seed=0) -> FusedVolume:
    if mode == "softmax":
        return fuse_softmax(volumes, temperature)
    return fuse_alternative(volumes, mode, seed)


@dataclass
class SceneVolume:
    density: np.ndarray  # X x Y x Z in [0, 1]
    color: np.ndarray  # 3 x X x Y x Z in [0, 1]
    grid: GridSpec

    def __post_init__(self):
        if self.density.shape != self.grid.dims:
            raise ValueError(f"density shape {self.density.shape} != grid {self.grid.dims}")
        if self.color.shape != (3,) + self.grid.dims:
            raise ValueError(f"color shape {self.color.shape} != 3 x {self.grid.dims}")
        for name, a in (("density", self.density), ("color", self.color)):
            if a.size and (a.min() < 0 or a.max() > 1):
                raise ValueError(f"{name} outside [0, 1]")


@dataclass
class DecoderParams:
    mode: str = "direct"
    density_logits: np.ndarray | None = None
    color_logits: np.ndarray | None = None
    w_sigma: np.ndarray | None = None
    b_sigma: float = 0.0
    W_c: np.ndarray | None = None
    b_c: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def direct(cls, dims, density_logit=0.0, color_logit=0.0):
        return cls(
            "direct",
            density_logits=np.full(dims, float(density_logit)),
            color_logits=np.full((3,) + tuple(dims), float(color_logit)),
        )

    @classmethod
    def linear(cls, channels, seed=0, scale=0.01, b_sigma=0.0):
        rng = np.random.default_rng(seed)
        return cls(
            "linear",
            w_sigma=scale * rng.standard_normal(channels),
            b_sigma=float(b_sigma),
            W_c=scale * rng.standard_normal((3, channels)),
            b_c=np.zeros(3),
        )

    def arrays(self) -> dict:
        """Trainable parameters by name."""
        if self.mode == "direct":
            return {"density_logits": self.density_logits, "color_logits": self.color_logits}
        if self.mode == "linear":
            return {
                "w_sigma": self.w_sigma,
                "b_sigma": np.atleast_1d(np.asarray(self.b_sigma, dtype=np.float64)),
                "W_c": self.W_c,
                "b_c": self.b_c,
            }
        raise ValueError(f"unknown decoder mode {self.mode!r}")

    def with_arrays(self, arrays: dict) -> "DecoderParams":
        if self.mode == "direct":
            return DecoderParams("direct", arrays["density_logits"], arrays["color_logits"])
        return DecoderParams(
            "linear",
            w_sigma=arrays["w_sigma"],
            b_sigma=float(np.asarray(arrays["b_sigma"]).reshape(-1)[0]),
            W_c=arrays["W_c"],
            b_c=arrays["b_c"],
        )


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_logits(fused: FusedVolume | None, params: DecoderParams):
    """Pre-sigmoid density ``X x Y x Z`` and color ``3 x X x Y x Z`` logits."""
    if params.mode == "direct":
        dl, cl = params.density_logits, params.color_logits
        if dl is None or cl is None or cl.shape != (3,) + dl.shape:
            raise ValueError("direct decoder needs density logits X x Y x Z and color logits 3 x X x Y x Z")
        if fused is not None and fused.coverage.shape != dl.shape:
            raise ValueError(f"logit shape {dl.shape} does not match volume {fused.coverage.shape}")
        return dl, cl
    if params.mode == "linear":
        if fused is None:
            raise ValueError("linear decoder needs a fused feature volume")
        V = fused.values
        if params.w_sigma.shape != (V.shape[0],) or params.W_c.shape != (3, V.shape[0]):
            raise ValueError(f"decoder weights do not match {V.shape[0]} feature channels")
        dl = np.tensordot(params.w_sigma, V, axes=1) + params.b_sigma
        cl = np.tensordot(params.W_c, V, axes=1) + params.b_c[:, None, None, None]
        return dl, cl
    raise ValueError(f"unknown decoder mode {params.mode!r}")


def decode(fused: FusedVolume | None, params: DecoderParams, grid: GridSpec) -> SceneVolume:
    dl, cl = decode_logits(fused, params)
    density = sigmoid(dl)
    if fused is not None:
        density = np.where(fused.coverage > 0, density, 0.0)
    return SceneVolume(density, sigmoid(cl), grid)
