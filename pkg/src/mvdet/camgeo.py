"""Multi-camera pinhole geometry: projection, visibility, boxes, region labels.

Conventions used throughout the package:

* Ego frame: x forward, y left, z up; meters; right-handed.
* Camera frame: x right, y down, z forward (optical axis).
* Image frame: u right, v down, pixels; integer coordinates sit at pixel
  centers.
* Extrinsics map ego to camera: ``p_cam = rotation @ p_ego + translation``.
* Visibility uses half-open pixel bounds ``[0, width) x [0, height)`` and
  strictly positive depth, so behind-camera points are never visible.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "GeometryError",
    "CameraIntrinsics",
    "CameraExtrinsics",
    "CameraModel",
    "CameraRig",
    "Box3D",
    "DetectionResult",
    "SceneBounds",
    "RegionLabel",
    "project_point",
    "project_points",
    "back_project",
    "is_visible",
    "visible_mask",
    "visible_cameras",
    "visible_counts",
    "box_corners",
    "classify_region",
    "classify_regions",
    "pixel_size",
    "rig_to_dict",
    "rig_from_dict",
    "save_rig",
    "load_rig",
]

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Camera or box parameters violate their invariants."""


def _as_array(values, shape, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise GeometryError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} contains non-finite values")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = (float(yaw) + math.pi) % math.tau - math.pi
    if wrapped == -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"image size must be positive, got ({self.width}, {self.height})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def scaled(self, r: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by factor ``r`` (half-even size rounding)."""
        if r <= 0:
            raise GeometryError(f"scale factor must be positive, got {r}")
        return CameraIntrinsics(
            fx=self.fx * r,
            fy=self.fy * r,
            cx=self.cx * r,
            cy=self.cy * r,
            width=max(1, round(self.width * r)),
            height=max(1, round(self.height * r)),
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    """Ego-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _as_array(self.rotation, (3, 3), "rotation")
        trans = _as_array(self.translation, (3,), "translation")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=_ORTHO_TOL):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)


@dataclass(frozen=True)
class CameraModel:
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    id: str


@dataclass(frozen=True)
class CameraRig:
    """Ordered collection of cameras with pairwise distinct ids."""

    cameras: tuple[CameraModel, ...]

    def __post_init__(self):
        cams = tuple(self.cameras)
        if len(cams) < 1:
            raise GeometryError("a rig needs at least one camera")
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"camera ids are not unique: {ids}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, idx: int) -> CameraModel:
        return self.cameras[idx]


@dataclass(frozen=True)
class Box3D:
    """Yaw-rotated 3D box in the ego frame.

    ``size`` is (w, l, h); at zero yaw w spans x, l spans y, h spans z.
    Yaw rotates the box counterclockwise about +z and is normalized to
    (-pi, pi] on construction.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    class_id: int = 0
    attribute_id: int = 0

    def __post_init__(self):
        center = _as_array(self.center, (3,), "center")
        size = _as_array(self.size, (3,), "size")
        velocity = _as_array(self.velocity, (2,), "velocity")
        if not np.all(size > 0):
            raise GeometryError(f"box size must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "velocity", velocity)
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "attribute_id", int(self.attribute_id))


@dataclass(frozen=True)
class DetectionResult:
    """A scored 3D box prediction."""

    box: Box3D
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise GeometryError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned box with positive extent on every axis."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = _as_array(self.lo, (3,), "lo")
        hi = _as_array(self.hi, (3,), "hi")
        if not np.all(hi > lo):
            raise GeometryError(f"bounds must have positive extent, got lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=-1)


class RegionLabel(enum.Enum):
    """Where a box falls relative to the rig's camera coverage."""

    OVERLAPPING = "overlapping"
    NON_OVERLAPPING = "non_overlapping"
    INVISIBLE = "invisible"


# ---------------------------------------------------------------------------
# Projection


def project_points(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Project ego-frame points into one camera.

    Args:
        points: (N, 3) ego-frame points in meters.
        cam: target camera.

    Returns:
        (pixels, depths) with pixels (N, 2) and depths (N,).  Pixels are NaN
        where depth <= 0 (behind the camera).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rot = cam.extrinsics.rotation
    trans = cam.extrinsics.translation
    # Elementwise transform keeps results bit-identical for any batch size
    # (BLAS matmul kernels round differently depending on shape).
    cam_pts = (
        pts[:, 0, None] * rot[:, 0]
        + pts[:, 1, None] * rot[:, 1]
        + pts[:, 2, None] * rot[:, 2]
        + trans
    )
    depths = cam_pts[:, 2]
    intr = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam_pts[:, 0] / depths + intr.cx
        v = intr.fy * cam_pts[:, 1] / depths + intr.cy
    pixels = np.stack([u, v], axis=-1)
    pixels[depths <= 0] = np.nan
    return pixels, depths


def project_point(p, cam: CameraModel) -> tuple[np.ndarray, float]:
    """Single-point variant of :func:`project_points`.

    Returns (pixel, depth); pixel is NaN when depth <= 0.
    """
    pixels, depths = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)
    return pixels[0], float(depths[0])


def back_project(pixel, depth: float, cam: CameraModel) -> np.ndarray:
    """Invert projection at a known positive depth; returns the ego-frame point."""
    if depth <= 0:
        raise GeometryError(f"back-projection requires positive depth, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    intr = cam.intrinsics
    cam_pt = np.array(
        [(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth]
    )
    return cam.extrinsics.rotation.T @ (cam_pt - cam.extrinsics.translation)


def visible_mask(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Boolean (N,) mask of points with positive depth projecting inside the image."""
    pixels, depths = project_points(points, cam)
    intr = cam.intrinsics
    with np.errstate(invalid="ignore"):
        inside = (
            (pixels[:, 0] >= 0)
            & (pixels[:, 0] < intr.width)
            & (pixels[:, 1] >= 0)
            & (pixels[:, 1] < intr.height)
        )
    return (depths > 0) & inside


def is_visible(p, cam: CameraModel) -> bool:
    return bool(visible_mask(np.asarray(p, dtype=np.float64).reshape(1, 3), cam)[0])


def visible_counts(points: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Number of rig cameras in which each point is visible; (N,) ints."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    counts = np.zeros(len(pts), dtype=np.int64)
    for cam in rig:
        counts += visible_mask(pts, cam)
    return counts


def visible_cameras(p, rig: CameraRig) -> set[int]:
    """Indices of rig cameras in which the point is visible."""
    pts = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return {i for i, cam in enumerate(rig) if visible_mask(pts, cam)[0]}


# ---------------------------------------------------------------------------
# Boxes

# Binary sign order makes corner i and corner 7-i opposite about the center.
_CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [-1, -1, 1],
        [-1, 1, -1],
        [-1, 1, 1],
        [1, -1, -1],
        [1, -1, 1],
        [1, 1, -1],
        [1, 1, 1],
    ],
    dtype=np.float64,
)


def box_corners(b: Box3D) -> np.ndarray:
    """The 8 corners of the box, (8, 3), in the ego frame."""
    half = b.size / 2.0
    offsets = _CORNER_SIGNS * half
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return b.center + offsets @ rot.T


def classify_regions(boxes: Sequence[Box3D], rig: CameraRig) -> list[RegionLabel]:
    """Region label per box, vectorized across boxes.

    A box is OVERLAPPING when its centroid or any corner is visible in two
    or more cameras, NON_OVERLAPPING when the most-covered of those points
    is visible in exactly one camera, and INVISIBLE otherwise.  The label is
    invariant under permutation of the rig's camera order.
    """
    if not boxes:
        return []
    probes = np.empty((len(boxes), 9, 3), dtype=np.float64)
    for i, b in enumerate(boxes):
        probes[i, 0] = b.center
        probes[i, 1:] = box_corners(b)
    counts = visible_counts(probes.reshape(-1, 3), rig).reshape(len(boxes), 9)
    best = counts.max(axis=1)
    labels = []
    for value in best:
        if value >= 2:
            labels.append(RegionLabel.OVERLAPPING)
        elif value == 1:
            labels.append(RegionLabel.NON_OVERLAPPING)
        else:
            labels.append(RegionLabel.INVISIBLE)
    return labels


def classify_region(b: Box3D, rig: CameraRig) -> RegionLabel:
    return classify_regions([b], rig)[0]


def pixel_size(intr: CameraIntrinsics) -> float:
    """Pixel size sqrt(1/fx^2 + 1/fy^2); converts metric depth to pixel-level depth."""
    if intr.fx <= 0 or intr.fy <= 0:
        raise GeometryError(f"focal lengths must be positive, got ({intr.fx}, {intr.fy})")
    return math.sqrt(1.0 / intr.fx**2 + 1.0 / intr.fy**2)


# ---------------------------------------------------------------------------
# Calibration JSON


def rig_to_dict(rig: CameraRig) -> dict:
    return {
        "cameras": [
            {
                "id": cam.id,
                "fx": cam.intrinsics.fx,
                "fy": cam.intrinsics.fy,
                "cx": cam.intrinsics.cx,
                "cy": cam.intrinsics.cy,
                "width": cam.intrinsics.width,
                "height": cam.intrinsics.height,
                "rotation": [float(x) for x in cam.extrinsics.rotation.reshape(-1)],
                "translation": [float(x) for x in cam.extrinsics.translation],
            }
            for cam in rig
        ]
    }


def rig_from_dict(data: dict) -> CameraRig:
    try:
        entries = data["cameras"]
    except (KeyError, TypeError) as exc:
        raise GeometryError("calibration data must contain a 'cameras' list") from exc
    cameras = []
    for entry in entries:
        intr = CameraIntrinsics(
            fx=float(entry["fx"]),
            fy=float(entry["fy"]),
            cx=float(entry["cx"]),
            cy=float(entry["cy"]),
            width=int(entry["width"]),
            height=int(entry["height"]),
        )
        extr = CameraExtrinsics(
            rotation=np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(entry["translation"], dtype=np.float64),
        )
        cameras.append(CameraModel(intrinsics=intr, extrinsics=extr, id=str(entry["id"])))
    return CameraRig(cameras=tuple(cameras))


def save_rig(path, rig: CameraRig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rig_to_dict(rig), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rig(path) -> CameraRig:
    with open(path, "r", encoding="utf-8") as fh:
        return rig_from_dict(json.load(fh))
