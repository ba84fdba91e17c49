"""Pinhole camera model and world/pixel transforms.

World frame is z-up with the ground plane at z = 0, in meters.  Pixel ``i``
covers the continuous interval ``[i, i + 1)``, so its center is ``i + 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-6

# selects (x', y', z') from the homogeneous camera-frame point
PI0 = np.hstack([np.eye(3), np.zeros((3, 1))])


class PixelProjection(NamedTuple):
    u: float
    v: float
    depth: float
    in_frustum: bool


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Calibrated pinhole camera, world-to-camera extrinsics ``x_cam = R x + t``."""

    intrinsic: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int
    view_id: int = 0

    def __post_init__(self):
        K = np.array(self.intrinsic, dtype=np.float64).reshape(3, 3)
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        for name, arr in (("intrinsic", K), ("rotation", R), ("translation", t)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"camera {self.view_id}: non-finite {name}")
        if np.abs(R @ R.T - np.eye(3)).max() >= ORTHO_TOL:
            raise ValueError(f"camera {self.view_id}: rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError(f"camera {self.view_id}: rotation determinant is not +1")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError(f"camera {self.view_id}: K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError(f"camera {self.view_id}: focal lengths must be positive")
        if int(self.image_width) <= 0 or int(self.image_height) <= 0:
            raise ValueError(f"camera {self.view_id}: image size must be positive")
        for a in (K, R, t):
            a.setflags(write=False)
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_width", int(self.image_width))
        object.__setattr__(self, "image_height", int(self.image_height))
        object.__setattr__(self, "view_id", int(self.view_id))

    @property
    def extrinsic(self) -> np.ndarray:
        """4x4 homogeneous world-to-camera transform."""
        psi = np.eye(4)
        psi[:3, :3] = self.rotation
        psi[:3, 3] = self.translation
        return psi

    @property
    def projection_matrix(self) -> np.ndarray:
        return self.intrinsic @ PI0 @ self.extrinsic

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, intrinsic, width, height, view_id=0, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` whose optical axis points at ``target``.

        Image x runs right and image y runs down, so the camera-frame y axis
        is the negated world up vector projected off the viewing direction.
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("look_at: viewing direction is parallel to up")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(intrinsic, R, -R @ eye, width, height, view_id)


def intrinsic_from_fov(width: int, height: int, fov_deg: float) -> np.ndarray:
    """Square-pixel intrinsics with the given horizontal field of view."""
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])


def project_points(camera: CameraModel, points):
    """Vectorized projection of ``(..., 3)`` world points.

    Returns ``(u, v, depth, in_frustum)`` arrays of shape ``(...)``.  Points at
    or behind the camera get ``u = v = nan`` and ``in_frustum = False``.
    """
    p = np.asarray(points, dtype=np.float64)
    cam = p @ camera.rotation.T + camera.translation
    img = cam @ camera.intrinsic.T
    depth = img[..., 2]
    front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, img[..., 0] / depth, np.nan)
        v = np.where(front, img[..., 1] / depth, np.nan)
    in_frustum = (
        front
        & (u >= 0) & (u < camera.image_width)
        & (v >= 0) & (v < camera.image_height)
    )
    return u, v, depth, in_frustum


def project(camera: CameraModel, p) -> PixelProjection:
    u, v, depth, inside = project_points(camera, np.asarray(p, dtype=np.float64).reshape(3))
    return PixelProjection(float(u), float(v), float(depth), bool(inside))


def backproject(camera: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """World point that projects to pixel ``(u, v)`` at optical-axis depth ``depth``."""
    if not depth > 0:
        raise ValueError(f"backproject: depth must be positive, got {depth}")
    ray_cam = np.linalg.solve(camera.intrinsic, np.array([u, v, 1.0]))
    cam = depth * ray_cam
    return camera.rotation.T @ (cam - camera.translation)


def pixel_rays(camera: CameraModel, u, v):
    """Vectorized :func:`ray_through_pixel`; returns origin ``(3,)`` and unit directions ``(..., 3)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    ray_cam = pix @ np.linalg.inv(camera.intrinsic).T
    d = ray_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return camera.center, d


def ray_through_pixel(camera: CameraModel, u: float, v: float):
    origin, d = pixel_rays(camera, u, v)
    return origin, d.reshape(3)
