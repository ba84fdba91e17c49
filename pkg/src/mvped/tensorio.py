"""File formats shared by every pipeline stage.

VPT1 tensor layout (little-endian)::

    b"VPT1" | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | f32 payload

Payload is row-major with the last dimension fastest.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ORTHO_TOL, CameraModel

log = logging.getLogger(__name__)

MAGIC = b"VPT1"
DTYPE_F32 = 0
MAX_NDIM = 4
# 16 GiB of f32 payload; anything larger is a corrupt header in practice
MAX_ELEMENTS = 1 << 32

ORTHO_WARN = 1e-4
ORTHO_REJECT = 1e-2


class TensorFormatError(ValueError):
    """Base class for VPT1 decoding failures."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class PayloadLengthError(TensorFormatError):
    """Payload is longer than the header declares."""


class NonFiniteError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class CalibrationError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.ndim < 1 or a.ndim > MAX_NDIM:
        raise DimOverflowError(f"ndim must be 1..{MAX_NDIM}, got {a.ndim}")
    a32 = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(a32)):
        raise NonFiniteError("tensor contains non-finite values")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a32.tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise BadMagicError("missing VPT1 magic")
    dtype, ndim = struct.unpack_from("<BB", buf, 4)
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"unknown dtype code {dtype}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise DimOverflowError(f"ndim must be 1..{MAX_NDIM}, got {ndim}")
    off = 6 + 4 * ndim
    if len(buf) < off:
        raise TruncatedPayloadError("header truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, 6)
    count = 1
    for d in shape:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimOverflowError(f"declared shape {shape} is too large")
    expected = off + 4 * count
    if len(buf) < expected:
        raise TruncatedPayloadError(f"payload has {len(buf) - off} bytes, header declares {4 * count}")
    if len(buf) > expected:
        raise PayloadLengthError(f"payload has {len(buf) - off} bytes, header declares {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("tensor contains non-finite values")
    return data.astype(np.float32)


def write_tensor(path, array) -> None:
    payload = encode_tensor(array)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(payload)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- calibration ------------------------------------------------------------


@dataclass
class CalibrationSet:
    cameras: list
    area: tuple  # (xmin, ymin, xmax, ymax) in meters

    def __post_init__(self):
        ids = [c.view_id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise CalibrationError(f"duplicate camera ids: {ids}")
        xmin, ymin, xmax, ymax = self.area
        if not (xmax > xmin and ymax > ymin):
            raise CalibrationError(f"degenerate area {self.area}")

    def __len__(self):
        return len(self.cameras)

    def require_multiview(self):
        if len(self.cameras) < 2:
            raise CalibrationError(f"need at least 2 cameras, got {len(self.cameras)}")


def nearest_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _floats(entry, key, n, cam_id):
    vals = entry.get(key)
    if not isinstance(vals, list) or len(vals) != n:
        raise CalibrationError(f"camera {cam_id}: '{key}' must be a list of {n} numbers")
    try:
        arr = np.array([float(x) for x in vals])
    except (TypeError, ValueError) as exc:
        raise CalibrationError(f"camera {cam_id}: '{key}' has non-numeric entries") from exc
    if not np.all(np.isfinite(arr)):
        raise CalibrationError(f"camera {cam_id}: '{key}' has non-finite entries")
    return arr


def calibration_from_dict(doc: dict) -> CalibrationSet:
    if not isinstance(doc, dict) or set(doc) != {"area", "cameras"}:
        raise CalibrationError("calibration must have exactly the keys 'area' and 'cameras'")
    area = doc["area"]
    if not isinstance(area, list) or len(area) != 4:
        raise CalibrationError("'area' must be [xmin, ymin, xmax, ymax]")
    cams = doc["cameras"]
    if not isinstance(cams, list) or not cams:
        raise CalibrationError("'cameras' must be a non-empty list")
    out = []
    for entry in cams:
        if not isinstance(entry, dict) or set(entry) != {"id", "width", "height", "K", "R", "t"}:
            raise CalibrationError(f"camera entry has wrong keys: {entry!r:.80}")
        cid = entry["id"]
        if not isinstance(cid, int) or isinstance(cid, bool):
            raise CalibrationError(f"camera id must be an integer, got {cid!r}")
        for k in ("width", "height"):
            if not isinstance(entry[k], int) or entry[k] <= 0:
                raise CalibrationError(f"camera {cid}: '{k}' must be a positive integer")
        K = _floats(entry, "K", 9, cid).reshape(3, 3)
        R = _floats(entry, "R", 9, cid).reshape(3, 3)
        t = _floats(entry, "t", 3, cid)
        if np.linalg.det(R) < 0:
            raise CalibrationError(f"camera {cid}: rotation has negative determinant")
        err = np.abs(R @ R.T - np.eye(3)).max()
        if err > ORTHO_REJECT:
            raise CalibrationError(f"camera {cid}: rotation orthonormality error {err:.3g}")
        if err > ORTHO_WARN:
            log.warning("camera %d: re-orthonormalizing rotation (error %.3g)", cid, err)
        if err >= ORTHO_TOL:
            # rounding in text files alone can exceed the camera tolerance
            R = nearest_rotation(R)
        try:
            out.append(CameraModel(K, R, t, entry["width"], entry["height"], cid))
        except ValueError as exc:
            raise CalibrationError(str(exc)) from exc
    try:
        area_t = tuple(float(a) for a in area)
    except (TypeError, ValueError) as exc:
        raise CalibrationError("'area' has non-numeric entries") from exc
    return CalibrationSet(out, area_t)


def calibration_to_dict(calib: CalibrationSet) -> dict:
    return {
        "area": [float(a) for a in calib.area],
        "cameras": [
            {
                "id": c.view_id,
                "width": c.image_width,
                "height": c.image_height,
                "K": [float(x) for x in c.intrinsic.ravel()],
                "R": [float(x) for x in c.rotation.ravel()],
                "t": [float(x) for x in c.translation.ravel()],
            }
            for c in calib.cameras
        ],
    }


def read_calibration(path) -> CalibrationSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CalibrationError(f"{path}: invalid JSON ({exc})") from exc
    return calibration_from_dict(doc)


def write_calibration(path, calib: CalibrationSet) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(calibration_to_dict(calib), indent=2) + "\n")


# -- images -----------------------------------------------------------------


def to_bytes8(image) -> np.ndarray:
    """Quantize values in [0, 1] to 8 bits, rounding halves up."""
    a = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(a)) or a.min(initial=0.0) < 0.0 or a.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(255.0 * a + 0.5).astype(np.uint8)


def write_image_pgm(path, image) -> None:
    """Binary P5 greyscale image from an ``H x W`` array."""
    a = np.asarray(image)
    if a.ndim != 2:
        raise ValueError(f"PGM needs an H x W array, got shape {a.shape}")
    data = to_bytes8(a)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + data.tobytes())


def write_image_ppm(path, image) -> None:
    """Binary P6 color image from an ``H x W x 3`` array."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 array, got shape {a.shape}")
    data = to_bytes8(a)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]) + data.tobytes())


# -- dataset layout ---------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    calibration: CalibrationSet
    view_ids: list = field(default_factory=list)

    @classmethod
    def open(cls, root) -> "DatasetManifest":
        root = Path(root)
        cpath = root / "calibration.json"
        if not cpath.exists():
            raise FileNotFoundError(f"missing input: {cpath}")
        calib = read_calibration(cpath)
        return cls(root, calib, [c.view_id for c in calib.cameras])

    def view_path(self, kind: str, view_id: int) -> Path:
        return self.root / kind / f"view_{view_id}.vpt"

    def _stack(self, kind):
        arrays = []
        for vid in self.view_ids:
            p = self.view_path(kind, vid)
            if not p.exists():
                raise FileNotFoundError(f"missing input: {p}")
            arrays.append(read_tensor(p))
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise ValueError(f"{kind}: inconsistent per-view shapes {sorted(shapes)}")
        return np.stack(arrays)

    def features(self) -> np.ndarray:
        return self._stack("features")

    def semantic(self) -> np.ndarray:
        return self._stack("semantic")

    def images(self) -> np.ndarray:
        imgs = self._stack("images")
        for cam, img in zip(self.calibration.cameras, imgs):
            if img.shape != (cam.image_height, cam.image_width, 3):
                raise ValueError(f"view {cam.view_id}: image shape {img.shape} does not match calibration")
        return imgs

    def masks(self, kind="masks") -> np.ndarray:
        return self._stack(kind)

    def has(self, kind) -> bool:
        return all(self.view_path(kind, v).exists() for v in self.view_ids)

    def gt_positions(self):
        p = self.root / "gt_positions.vpt"
        return read_positions(p) if p.exists() else None


def read_positions(path) -> np.ndarray:
    """Ground-plane positions ``G x 2`` in meters."""
    gt = read_tensor(path)
    if gt.ndim != 2 or gt.shape[1] != 2:
        raise ValueError(f"gt_positions must be G x 2, got {gt.shape}")
    return gt.astype(np.float64)
