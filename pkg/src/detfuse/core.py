"""Domain types shared across the pipeline, plus frame validation.

Working frame convention: all 3D quantities live in the LiDAR frame
(x forward, y left, z up); camera-frame data is converted at I/O
boundaries. Yaw is stored in [0, 2*pi), rotating the box length axis
about +z. All types are immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    EmptyCalibration,
    NonFiniteField,
    ScoreOutOfRange,
    ValidationError,
)

TAU = 2.0 * math.pi


def normalize_yaw(theta: float) -> float:
    """Map any finite angle into [0, 2*pi)."""
    wrapped = math.fmod(theta, TAU)
    if wrapped < 0.0:
        wrapped += TAU
    return 0.0 if wrapped >= TAU else wrapped


def _require_finite(value: float, what: str) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise NonFiniteField(f"{what} is not finite: {value!r}")
    return v


def _readonly_array(values, shape: tuple, what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValidationError(f"{what} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteField(f"{what} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Point:
    """A single LiDAR return: position in meters plus reflectance in [0, 1]."""

    x: float
    y: float
    z: float
    reflectance: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "reflectance"):
            _require_finite(getattr(self, name), f"Point.{name}")
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValidationError(
                f"Point.reflectance must be in [0, 1], got {self.reflectance}"
            )


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of LiDAR points, stored as an (N, 4) float array."""

    xyzr: np.ndarray
    frame_id: str = ""

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.xyzr, dtype=np.float64))
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValidationError(f"PointCloud array must be (N, 4), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
            raise NonFiniteField(f"PointCloud point[{bad}] is not finite")
        if arr.shape[0] and (arr[:, 3].min() < 0.0 or arr[:, 3].max() > 1.0):
            bad = int(np.flatnonzero((arr[:, 3] < 0) | (arr[:, 3] > 1))[0])
            raise ValidationError(
                f"PointCloud point[{bad}] reflectance outside [0, 1]"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "xyzr", arr)

    @classmethod
    def from_points(cls, points: Iterable[Point], frame_id: str = "") -> "PointCloud":
        rows = [(p.x, p.y, p.z, p.reflectance) for p in points]
        return cls(np.array(rows, dtype=np.float64).reshape(len(rows), 4), frame_id)

    @property
    def xyz(self) -> np.ndarray:
        return self.xyzr[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.xyzr[:, 3]

    def __len__(self) -> int:
        return self.xyzr.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PointCloud)
            and self.frame_id == other.frame_id
            and self.xyzr.shape == other.xyzr.shape
            and bool(np.array_equal(self.xyzr, other.xyzr))
        )


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center (m), dims length/height/width (m), yaw (rad).

    Yaw is normalized into [0, 2*pi) at construction; non-finite values and
    non-positive dimensions are rejected.
    """

    x: float
    y: float
    z: float
    l: float
    h: float
    w: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "z", "l", "h", "w", "yaw"):
            _require_finite(getattr(self, name), f"Box3D.{name}")
        if self.l <= 0 or self.h <= 0 or self.w <= 0:
            raise ValidationError(
                f"Box3D dims must be positive, got l={self.l} h={self.h} w={self.w}"
            )
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def dims(self) -> tuple[float, float, float]:
        return (self.l, self.h, self.w)

    def volume(self) -> float:
        return self.l * self.h * self.w

    def translated(self, dx: float, dy: float, dz: float) -> "Box3D":
        return replace(self, x=self.x + dx, y=self.y + dy, z=self.z + dz)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box in pixels; may extend beyond image bounds."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            _require_finite(getattr(self, name), f"Box2D.{name}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(
                f"Box2D must satisfy x_min < x_max and y_min < y_max, got "
                f"({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> tuple[tuple[float, float], tuple[float, float]]:
        """Top-left and bottom-right corners."""
        return ((self.x_min, self.y_min), (self.x_max, self.y_max))


@dataclass(frozen=True, eq=False)
class Mask:
    """Binary raster aligned to a detection's box extent.

    Cell (i, j) of the (rows, cols) grid covers the sub-rectangle of the box
    at row i, column j; `contains` maps a pixel inside the box to its cell.
    """

    raster: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.raster, dtype=bool))
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"Mask raster must be 2D non-empty, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "raster", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raster.shape

    def contains(self, u, v, box: Box2D):
        """Vectorized test: is pixel (u, v) inside the mask, relative to box."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        rows, cols = self.raster.shape
        j = np.floor((u - box.x_min) / box.width * cols).astype(np.int64)
        i = np.floor((v - box.y_min) / box.height * rows).astype(np.int64)
        inside = (i >= 0) & (i < rows) & (j >= 0) & (j < cols)
        out = np.zeros(np.broadcast(u, v).shape, dtype=bool)
        ii = np.clip(i, 0, rows - 1)
        jj = np.clip(j, 0, cols - 1)
        out[...] = inside & self.raster[ii, jj]
        return out

    def encode(self) -> str:
        """Run-length encode the row-major raster: 'rows x cols : bit : runs'."""
        flat = self.raster.ravel().astype(np.int8)
        first = int(flat[0])
        changes = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], changes, [flat.size]))
        runs = np.diff(bounds)
        rows, cols = self.raster.shape
        return f"{rows}x{cols}:{first}:" + ",".join(str(int(r)) for r in runs)

    @classmethod
    def decode(cls, text: str) -> "Mask":
        shape_part, bit_part, runs_part = text.split(":")
        rows, cols = (int(t) for t in shape_part.split("x"))
        bit = bool(int(bit_part))
        runs = [int(t) for t in runs_part.split(",")] if runs_part else []
        flat = np.empty(rows * cols, dtype=bool)
        pos = 0
        value = bit
        for run in runs:
            flat[pos : pos + run] = value
            pos += run
            value = not value
        if pos != rows * cols:
            raise ValidationError(f"Mask RLE covers {pos} cells, expected {rows * cols}")
        return cls(flat.reshape(rows, cols))

    def __eq__(self, other) -> bool:
        return isinstance(other, Mask) and bool(np.array_equal(self.raster, other.raster))


@dataclass(frozen=True)
class ClassLabel:
    """A semantic class with its prior probability and prior box dimensions."""

    id: int
    name: str
    dim_prior: tuple[float, float, float]
    prior: float

    def __post_init__(self):
        if any(d <= 0 for d in self.dim_prior):
            raise ValidationError(f"ClassLabel {self.name}: dim_prior must be > 0")
        if not 0.0 < self.prior <= 1.0:
            raise ValidationError(f"ClassLabel {self.name}: prior must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class LabelSet:
    """The registered class set; priors must sum to 1."""

    labels: tuple[ClassLabel, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if not self.labels:
            raise ValidationError("LabelSet must contain at least one class")
        ids = [c.id for c in self.labels]
        if len(set(ids)) != len(ids):
            raise ValidationError("LabelSet ids must be unique")
        total = sum(c.prior for c in self.labels)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"LabelSet priors must sum to 1, got {total!r}")
        object.__setattr__(self, "_by_id", {c.id: c for c in self.labels})
        object.__setattr__(self, "_by_name", {c.name: c for c in self.labels})

    @classmethod
    def uniform(cls, names_dims: Sequence[tuple[str, tuple[float, float, float]]]) -> "LabelSet":
        n = len(names_dims)
        return cls(
            tuple(
                ClassLabel(i, name, dims, 1.0 / n)
                for i, (name, dims) in enumerate(names_dims)
            )
        )

    @classmethod
    def default(cls) -> "LabelSet":
        return cls.uniform(
            [
                ("car", (4.2, 1.6, 1.9)),
                ("pedestrian", (0.8, 1.75, 0.6)),
                ("cyclist", (1.76, 1.75, 0.6)),
            ]
        )

    def by_id(self, label_id: int) -> ClassLabel:
        return self._by_id[label_id]

    def by_name(self, name: str) -> ClassLabel:
        return self._by_name[name]

    def __contains__(self, label: ClassLabel) -> bool:
        return self._by_id.get(label.id) == label

    def __iter__(self):
        return iter(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSet) and self.labels == other.labels


def _check_score(score: float, what: str) -> float:
    s = float(score)
    if not math.isfinite(s):
        raise NonFiniteField(f"{what} score is not finite")
    if not 0.0 <= s <= 1.0:
        raise ScoreOutOfRange(f"{what}: score {s} outside [0, 1]")
    return s


@dataclass(frozen=True)
class Detection3D:
    """One LiDAR-branch detection."""

    box: Box3D
    score: float
    label: ClassLabel

    def __post_init__(self):
        _check_score(self.score, "Detection3D")


@dataclass(frozen=True, eq=False)
class Detection2D:
    """One RGB-branch detection, optionally with an instance mask."""

    box: Box2D
    score: float
    label: ClassLabel
    mask: Optional[Mask] = None

    def __post_init__(self):
        _check_score(self.score, "Detection2D")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Detection2D)
            and self.box == other.box
            and self.score == other.score
            and self.label == other.label
            and self.mask == other.mask
        )


@dataclass(frozen=True, eq=False)
class CameraModel:
    """A pinhole camera: 3x4 projection matrix plus image size in pixels.

    The projection matrix maps homogeneous points in the reference camera
    frame to homogeneous pixels. Intrinsics are optional and only needed
    for stereo epipolar work.
    """

    P: np.ndarray
    width: int
    height: int
    K: Optional[np.ndarray] = None

    def __post_init__(self):
        P = _readonly_array(self.P, (3, 4), "CameraModel.P")
        if np.linalg.matrix_rank(P) != 3:
            raise ValidationError("CameraModel.P must have rank 3")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("CameraModel image size must be positive")
        object.__setattr__(self, "P", P)
        if self.K is not None:
            object.__setattr__(self, "K", _readonly_array(self.K, (3, 3), "CameraModel.K"))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CameraModel)
            and bool(np.array_equal(self.P, other.P))
            and (self.width, self.height) == (other.width, other.height)
            and (
                (self.K is None and other.K is None)
                or (self.K is not None and other.K is not None and bool(np.array_equal(self.K, other.K)))
            )
        )


@dataclass(frozen=True, eq=False)
class StereoPair:
    """A rectified or general stereo pair between two cameras of the rig.

    (R, t) transform left-camera coordinates into right-camera coordinates:
    X_r = R @ X_l + t. For a rectified pair with baseline b the transform is
    R = I, t = (-b, 0, 0).
    """

    left: int
    right: int
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = _readonly_array(self.R, (3, 3), "StereoPair.R")
        t = _readonly_array(self.t, (3,), "StereoPair.t")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValidationError("StereoPair.R must be a rotation (orthonormal, det +1)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.t))


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """LiDAR-to-camera transform plus the camera rig."""

    lidar_to_cam: np.ndarray
    cameras: tuple[CameraModel, ...]
    stereo_pairs: tuple[StereoPair, ...] = ()

    def __post_init__(self):
        T = _readonly_array(self.lidar_to_cam, (4, 4), "CalibrationSet.lidar_to_cam")
        if abs(np.linalg.det(T)) < 1e-12:
            raise ValidationError("CalibrationSet.lidar_to_cam must be invertible")
        object.__setattr__(self, "lidar_to_cam", T)
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "stereo_pairs", tuple(self.stereo_pairs))
        n = len(self.cameras)
        for pair in self.stereo_pairs:
            if not (0 <= pair.left < n and 0 <= pair.right < n) or pair.left == pair.right:
                raise ValidationError(
                    f"StereoPair indices ({pair.left}, {pair.right}) invalid for {n} cameras"
                )

    @property
    def num_views(self) -> int:
        return len(self.cameras)


@dataclass(frozen=True, eq=False)
class FrameInput:
    """Everything the pipeline needs for one synchronized frame."""

    cloud: PointCloud
    calib: CalibrationSet
    dets3d: tuple[Detection3D, ...]
    dets2d_per_view: tuple[tuple[Detection2D, ...], ...]
    labels: LabelSet = field(default_factory=LabelSet.default)

    def __post_init__(self):
        object.__setattr__(self, "dets3d", tuple(self.dets3d))
        object.__setattr__(
            self, "dets2d_per_view", tuple(tuple(v) for v in self.dets2d_per_view)
        )
        if len(self.dets2d_per_view) != self.calib.num_views:
            raise ValidationError(
                f"dets2d_per_view has {len(self.dets2d_per_view)} lists for "
                f"{self.calib.num_views} cameras"
            )


FRUSTUM_MODES = ("bbox", "mask", "bbox+mask")


@dataclass(frozen=True)
class PipelineConfig:
    """Tunable thresholds and switches for the fusion pipeline.

    Defaults: the frustum point floor is 10 points and the match gate 0.5
    follows the projected-overlap acceptance used throughout; the low 3D and
    high 2D score thresholds reflect an NMS-free LiDAR branch paired with a
    conservatively filtered RGB branch.
    """

    tau_z: float = 0.3            # BEV IoU threshold for clustering
    tau_b: float = 0.5            # image IoU threshold for cluster/2D matches
    tau_d: float = 0.5            # projection IoU threshold for recovery
    enlargement: float = 1.1      # 2D box scale factor before frustum cropping
    p_min: int = 10               # minimum points per frustum proposal
    frustum_mode: str = "bbox"    # bbox | mask | bbox+mask
    min_score_3d: float = 0.05
    min_score_2d: float = 0.7
    stereo_enabled: bool = False
    final_nms: Optional[float] = None   # BEV IoU threshold, None = off
    epipolar_gate_px: float = 20.0      # max summed corner-to-line distance
    clique_cap_factor: int = 10         # clique count cap = factor * node count
    behind_camera_depth: float = 0.1    # meters; min projective depth
    ground_band: float = 0.15           # meters; localizer ground-removal band
    range_bin: float = 0.5              # meters; localizer depth histogram bin
    prior_blend: float = 0.5            # localizer dims: weight on observed extent
    mask_boost: float = 2.0             # localizer weight boost for in-mask points
    localizer: str = "geometric"

    def __post_init__(self):
        for name in ("tau_z", "tau_b", "tau_d", "min_score_3d", "min_score_2d"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"PipelineConfig.{name} must be in [0, 1], got {v}")
        if self.enlargement < 1.0:
            raise ValidationError("PipelineConfig.enlargement must be >= 1")
        if self.p_min < 1:
            raise ValidationError("PipelineConfig.p_min must be a positive integer")
        if self.frustum_mode not in FRUSTUM_MODES:
            raise ValidationError(
                f"PipelineConfig.frustum_mode must be one of {FRUSTUM_MODES}"
            )
        if self.final_nms is not None and not 0.0 <= self.final_nms <= 1.0:
            raise ValidationError("PipelineConfig.final_nms must be in [0, 1] or None")
        if not 0.0 <= self.prior_blend <= 1.0:
            raise ValidationError("PipelineConfig.prior_blend must be in [0, 1]")


def validate_frame(frame: FrameInput, config: PipelineConfig | None = None) -> FrameInput:
    """Check every frame invariant and apply the score pre-filters.

    Returns a new frame with detections below the configured minimum scores
    removed (yaw is already normalized by Box3D construction). Idempotent.
    Raises NonFiniteField / ScoreOutOfRange / EmptyCalibration naming the
    offending record.
    """
    config = config or PipelineConfig()
    if frame.calib.num_views == 0:
        raise EmptyCalibration("frame has no cameras")

    kept3d = []
    for i, det in enumerate(frame.dets3d):
        if not 0.0 <= det.score <= 1.0:
            raise ScoreOutOfRange(f"dets3d[{i}]: score {det.score} outside [0, 1]")
        if det.label not in frame.labels:
            raise ValidationError(f"dets3d[{i}]: label {det.label.name!r} not registered")
        if det.score >= config.min_score_3d:
            kept3d.append(det)

    kept2d = []
    for view, dets in enumerate(frame.dets2d_per_view):
        kept_view = []
        for j, det in enumerate(dets):
            if not 0.0 <= det.score <= 1.0:
                raise ScoreOutOfRange(
                    f"dets2d_per_view[{view}][{j}]: score {det.score} outside [0, 1]"
                )
            if det.label not in frame.labels:
                raise ValidationError(
                    f"dets2d_per_view[{view}][{j}]: label {det.label.name!r} not registered"
                )
            if det.score >= config.min_score_2d:
                kept_view.append(det)
        kept2d.append(tuple(kept_view))

    return FrameInput(
        cloud=frame.cloud,
        calib=frame.calib,
        dets3d=tuple(kept3d),
        dets2d_per_view=tuple(kept2d),
        labels=frame.labels,
    )
