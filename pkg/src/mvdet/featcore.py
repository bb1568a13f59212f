"""Dense feature pyramids, bilinear sampling, and multi-view aggregation.

Sampling convention: integer coordinates sit at pixel centers and level
coordinates equal full-resolution image pixels divided by the level stride.
Out-of-bounds samples contribute a zero feature with a zero visibility mask
instead of clamping.  Feature maps are stored as 32-bit floats; all
interpolation and reduction arithmetic runs in 64-bit for deterministic,
testable tolerances.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camgeo import CameraRig, project_points

__all__ = [
    "FeatureError",
    "TensorFormatError",
    "FeatureLevel",
    "FeaturePyramid",
    "SampleResult",
    "bilinear_sample",
    "bilinear_sample_many",
    "bilinear_grad",
    "sample_multiview",
    "sample_multiview_many",
    "write_tensor",
    "read_tensor",
    "save_pyramid",
    "load_pyramid",
]

TENSOR_MAGIC = b"GDT3"
TENSOR_VERSION = 1


class FeatureError(ValueError):
    """Feature map inputs violate their invariants."""


class TensorFormatError(IOError):
    """A tensor file is malformed or uses an unsupported version."""


@dataclass(frozen=True)
class FeatureLevel:
    """One dense feature map of shape (C, H, W) plus its downsampling stride."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise FeatureError(f"feature data must be (C, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise FeatureError(f"feature dimensions must be >= 1, got {arr.shape}")
        if self.stride < 1:
            raise FeatureError(f"stride must be >= 1, got {self.stride}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "stride", int(self.stride))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


class FeaturePyramid:
    """Per-camera stacks of feature levels with identical shapes across cameras."""

    def __init__(self, levels_per_camera: Sequence[Sequence[FeatureLevel]]):
        cams = [tuple(levels) for levels in levels_per_camera]
        if not cams or not cams[0]:
            raise FeatureError("pyramid needs at least one camera with one level")
        ref = [(lv.data.shape, lv.stride) for lv in cams[0]]
        for levels in cams[1:]:
            if [(lv.data.shape, lv.stride) for lv in levels] != ref:
                raise FeatureError("all cameras must share identical per-level shapes")
        self._cams = tuple(cams)

    @property
    def camera_count(self) -> int:
        return len(self._cams)

    @property
    def level_count(self) -> int:
        return len(self._cams[0])

    @property
    def channels(self) -> int:
        return self._cams[0][0].channels

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(lv.stride for lv in self._cams[0])

    def levels(self, camera: int) -> tuple[FeatureLevel, ...]:
        return self._cams[camera]

    def __iter__(self):
        return iter(self._cams)


@dataclass(frozen=True)
class SampleResult:
    """Visibility-normalized multi-view sample.

    ``feature`` is all-zeros and ``valid`` is False when the point was not
    visible in any (camera, level) pair.
    """

    feature: np.ndarray
    visible_count: int
    valid: bool


# ---------------------------------------------------------------------------
# Bilinear interpolation


def _support_indices(pos: np.ndarray, width: int, height: int):
    """Corner indices, fractional offsets, and the inside mask for positions (N, 2)."""
    u = pos[:, 0]
    v = pos[:, 1]
    inside = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    # floor keeps integer positions exact (frac 0); at u == width-1 the
    # second support column collapses onto the first.
    x0 = np.floor(uc).astype(np.int64)
    y0 = np.floor(vc).astype(np.int64)
    fu = uc - x0
    fv = vc - y0
    return x0, y0, fu, fv, inside


def bilinear_sample_many(level: FeatureLevel, pos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample many positions at once.

    Nested linear interpolation keeps constant fields and integer grid
    points exact.

    Args:
        level: feature map to sample.
        pos: (N, 2) continuous positions in the level's own pixel grid.

    Returns:
        (features, inside): features (N, C) float64, zero rows where the
        position falls outside [0, W-1] x [0, H-1]; inside (N,) bool.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    # NaN positions (e.g. behind-camera projections) are outside by definition.
    pos = np.where(np.isfinite(pos), pos, -1.0)
    x0, y0, fu, fv, inside = _support_indices(pos, level.width, level.height)
    x1 = np.minimum(x0 + 1, level.width - 1)
    y1 = np.minimum(y0 + 1, level.height - 1)
    data = level.data.astype(np.float64, copy=False)
    f00 = data[:, y0, x0]
    f10 = data[:, y0, x1]
    f01 = data[:, y1, x0]
    f11 = data[:, y1, x1]
    top = f00 + fu * (f10 - f00)
    bottom = f01 + fu * (f11 - f01)
    feats = (top + fv * (bottom - top)).T
    feats[~inside] = 0.0
    return feats, inside


def bilinear_sample(level: FeatureLevel, pos) -> tuple[np.ndarray, bool]:
    """Sample one position; returns (feature (C,), inside)."""
    feats, inside = bilinear_sample_many(level, np.asarray(pos, dtype=np.float64).reshape(1, 2))
    return feats[0], bool(inside[0])


def bilinear_grad(level: FeatureLevel, pos) -> tuple[np.ndarray, bool]:
    """Analytic derivative of the sampled feature w.r.t. the sample position.

    Args:
        level: feature map.
        pos: (u, v) position, expected strictly inside the grid and away from
            integer coordinate lines where the interpolant has a kink.

    Returns:
        (grad, at_kink): grad is (C, 2) with columns d/du and d/dv; at_kink is
        True when the position sits on an integer coordinate line (or outside
        the grid), in which case the one-sided derivative of the enclosing
        cell is returned and the caller should treat the point as
        non-differentiable.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(2)
    u, v = pos
    w, h = level.width, level.height
    inside = 0 <= u <= w - 1 and 0 <= v <= h - 1
    at_kink = (not inside) or float(u).is_integer() or float(v).is_integer()
    x0 = int(np.clip(np.floor(u), 0, max(w - 2, 0)))
    y0 = int(np.clip(np.floor(v), 0, max(h - 2, 0)))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fu = u - x0
    fv = v - y0
    data = level.data.astype(np.float64, copy=False)
    f00 = data[:, y0, x0]
    f10 = data[:, y0, x1]
    f01 = data[:, y1, x0]
    f11 = data[:, y1, x1]
    du = (1 - fv) * (f10 - f00) + fv * (f11 - f01)
    dv = (1 - fu) * (f01 - f00) + fu * (f11 - f10)
    return np.stack([du, dv], axis=-1), at_kink


# ---------------------------------------------------------------------------
# Multi-view aggregation


def _resolve_scales(image_scale, camera_count: int) -> np.ndarray:
    if image_scale is None:
        return np.ones((camera_count, 2), dtype=np.float64)
    arr = np.asarray(image_scale, dtype=np.float64)
    if arr.shape == (2,):
        arr = np.tile(arr, (camera_count, 1))
    if arr.shape != (camera_count, 2):
        raise FeatureError(
            f"image_scale must be (2,) or ({camera_count}, 2), got {arr.shape}"
        )
    return arr


def sample_multiview_many(
    pyr: FeaturePyramid,
    rig: CameraRig,
    points: np.ndarray,
    image_scale=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Visibility-normalized mean of bilinear samples across cameras and levels.

    Each point is projected into every camera; per level the image-plane
    position is scaled by the per-camera resize factor and divided by the
    level stride.  Samples outside a level (or behind a camera) carry a zero
    mask.  The returned feature is the masked sum divided by the mask total,
    accumulated camera-major then level in a fixed order.

    Returns:
        (features, counts): features (N, C) float64 (zero rows where no
        sample was visible) and counts (N,) of visible (camera, level) pairs.
    """
    if pyr.camera_count != len(rig):
        raise FeatureError(
            f"pyramid has {pyr.camera_count} cameras but rig has {len(rig)}"
        )
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    scales = _resolve_scales(image_scale, len(rig))
    n = len(pts)
    total = np.zeros((n, pyr.channels), dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    for ci, cam in enumerate(rig):
        pixels, depths = project_points(pts, cam)
        in_front = depths > 0
        scaled = pixels * scales[ci]
        for level in pyr.levels(ci):
            feats, inside = bilinear_sample_many(level, scaled / level.stride)
            mask = inside & in_front
            feats[~mask] = 0.0
            total += feats
            counts += mask
    valid = counts > 0
    features = np.zeros_like(total)
    features[valid] = total[valid] / counts[valid, None]
    return features, counts


def sample_multiview(pyr: FeaturePyramid, rig: CameraRig, p, image_scale=None) -> SampleResult:
    """Single-point variant of :func:`sample_multiview_many`."""
    feats, counts = sample_multiview_many(
        pyr, rig, np.asarray(p, dtype=np.float64).reshape(1, 3), image_scale
    )
    count = int(counts[0])
    return SampleResult(feature=feats[0], visible_count=count, valid=count > 0)


# ---------------------------------------------------------------------------
# Binary tensor files ("GDT3": magic, u32 version, u32 ndim, ndim x u64 dims,
# then little-endian f32 data in row-major order)


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TENSOR_MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise TensorFormatError(f"{path}: truncated header")
        version, ndim = struct.unpack("<II", header)
        if version != TENSOR_VERSION:
            raise TensorFormatError(f"{path}: unsupported version {version}")
        dims_raw = fh.read(8 * ndim)
        if len(dims_raw) != 8 * ndim:
            raise TensorFormatError(f"{path}: truncated dims")
        dims = struct.unpack(f"<{ndim}Q", dims_raw)
        count = int(np.prod(dims)) if ndim else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise TensorFormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_pyramid(directory, pyr: FeaturePyramid, manifest_name: str = "pyramid.json") -> str:
    """Write one tensor file per (camera, level) plus a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    cameras = []
    for ci in range(pyr.camera_count):
        entries = []
        for li, level in enumerate(pyr.levels(ci)):
            fname = f"cam{ci:02d}_level{li}.gdt3"
            write_tensor(os.path.join(directory, fname), level.data)
            entries.append({"file": fname, "stride": level.stride})
        cameras.append({"levels": entries})
    manifest = {"version": TENSOR_VERSION, "cameras": cameras}
    manifest_path = os.path.join(directory, manifest_name)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_pyramid(manifest_path) -> FeaturePyramid:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    cams = []
    for cam_entry in manifest["cameras"]:
        levels = []
        for lv in cam_entry["levels"]:
            data = read_tensor(os.path.join(base, lv["file"]))
            levels.append(FeatureLevel(data=data, stride=int(lv["stride"])))
        cams.append(levels)
    return FeaturePyramid(cams)
