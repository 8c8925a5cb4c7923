"""Projective and metric geometry: projection, IoU kernels, epipolar tools.

Conventions: boxes live in the LiDAR frame (z up, BEV = x/y plane). The
LiDAR-to-camera transform T and a camera projection P compose into the
corner projection pixel = P @ T @ corner. Box corners are ordered bottom
face then top face, each counter-clockwise starting from the
(+length, +width) corner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..core import Box2D, Box3D, CameraModel, Detection3D, PointCloud
from ..errors import DegenerateBaseline, ValidationError, ZeroLine
from .backend import KERNEL_BACKEND, kernels, load_backend

__all__ = [
    "KERNEL_BACKEND",
    "FundamentalMatrix",
    "Line2D",
    "ProjectedBox",
    "bev_params",
    "box3d_corners",
    "box3d_params",
    "epipolar_line",
    "fundamental_matrix",
    "iou_2d",
    "iou_2d_matrix",
    "iou_3d",
    "iou_3d_matrix",
    "iou_bev",
    "iou_bev_matrix",
    "load_backend",
    "point_line_distance",
    "project_box3d",
    "project_boxes",
    "project_points",
    "transform_points",
]

# Corner offsets in box axes: bottom face CCW, then top face CCW.
_CORNER_SIGNS = np.array(
    [
        [+1, +1, -1],
        [-1, +1, -1],
        [-1, -1, -1],
        [+1, -1, -1],
        [+1, +1, +1],
        [-1, +1, +1],
        [-1, -1, +1],
        [+1, -1, +1],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class ProjectedBox:
    """Image-plane footprint of a 3D box: enclosing AABB plus nearest depth."""

    box2d: Box2D
    min_depth: float
    source_index: int = -1


@dataclass(frozen=True)
class Line2D:
    """Image line a*u + b*v + c = 0 with (a, b) normalized to unit length."""

    a: float
    b: float
    c: float

    def __post_init__(self):
        norm = math.hypot(self.a, self.b)
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError(f"Line2D coefficients not normalized: |(a,b)| = {norm}")


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    """Rank-2 fundamental matrix mapping left pixels to right epipolar lines."""

    F: np.ndarray

    def __post_init__(self):
        F = np.array(self.F, dtype=np.float64)
        if F.shape != (3, 3):
            raise ValidationError(f"FundamentalMatrix must be 3x3, got {F.shape}")
        sv = np.linalg.svd(F, compute_uv=False)
        if sv[2] > 1e-6 * sv[0]:
            raise ValidationError("FundamentalMatrix must be rank 2")
        F.flags.writeable = False
        object.__setattr__(self, "F", F)


def transform_points(points, T: np.ndarray) -> np.ndarray:
    """Apply a 4x4 homogeneous transform to (N, 3) positions (or a PointCloud)."""
    if isinstance(points, PointCloud):
        points = points.xyz
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(T, dtype=np.float64)
    out = xyz @ T[:3, :3].T + T[:3, 3]
    w = xyz @ T[3, :3] + T[3, 3]
    return out / w[:, None]


def box3d_params(boxes: Sequence) -> np.ndarray:
    """Stack boxes (or 3D detections) into an (N, 7) parameter array."""
    rows = np.empty((len(boxes), 7), dtype=np.float64)
    for i, b in enumerate(boxes):
        if isinstance(b, Detection3D):
            b = b.box
        rows[i] = (b.x, b.y, b.z, b.l, b.h, b.w, b.yaw)
    return rows


def bev_params(boxes: Sequence) -> np.ndarray:
    """Stack boxes (or 3D detections) into an (N, 5) BEV parameter array."""
    p = box3d_params(boxes)
    return p[:, (0, 1, 3, 5, 6)]


def corners_from_params(params: np.ndarray) -> np.ndarray:
    """Corners (N, 8, 3) of an (N, 7) box parameter array."""
    params = np.asarray(params, dtype=np.float64).reshape(-1, 7)
    half = 0.5 * params[:, None, (3, 5, 4)] * _CORNER_SIGNS[None, :, :]
    cos_y = np.cos(params[:, 6])
    sin_y = np.sin(params[:, 6])
    x = half[:, :, 0] * cos_y[:, None] - half[:, :, 1] * sin_y[:, None]
    y = half[:, :, 0] * sin_y[:, None] + half[:, :, 1] * cos_y[:, None]
    out = np.empty((params.shape[0], 8, 3), dtype=np.float64)
    out[:, :, 0] = params[:, None, 0] + x
    out[:, :, 1] = params[:, None, 1] + y
    out[:, :, 2] = params[:, None, 2] + half[:, :, 2]
    return out


def box3d_corners(box: Box3D) -> np.ndarray:
    """The 8 corners of a box, shape (8, 3), in the documented order."""
    return corners_from_params(
        np.array([[box.x, box.y, box.z, box.l, box.h, box.w, box.yaw]])
    )[0]


def project_points(xyz: np.ndarray, T: np.ndarray, cam: CameraModel):
    """Project (N, 3) LiDAR-frame points; returns pixel (N, 2) and depth (N,)."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    M = np.asarray(cam.P, dtype=np.float64) @ np.asarray(T, dtype=np.float64)
    uvw = xyz @ M[:, :3].T + M[:, 3]
    depth = uvw[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = uvw[:, :2] / depth[:, None]
    return pix, depth


def project_boxes(params: np.ndarray, T: np.ndarray, cam: CameraModel,
                  min_depth: float = 0.1):
    """Project (N, 7) boxes into one camera.

    Returns (aabb (N, 4), depth (N,), valid (N,)): enclosing AABBs of the 8
    projected corners, minimum corner depth, and a mask that is False where
    any corner depth falls at or below `min_depth` (behind-camera).
    """
    params = np.asarray(params, dtype=np.float64).reshape(-1, 7)
    n = params.shape[0]
    corners = corners_from_params(params).reshape(-1, 3)
    pix, depth = project_points(corners, T, cam)
    pix = pix.reshape(n, 8, 2)
    depth = depth.reshape(n, 8)
    valid = depth.min(axis=1) > min_depth
    aabb = np.empty((n, 4), dtype=np.float64)
    aabb[:, 0] = pix[:, :, 0].min(axis=1)
    aabb[:, 1] = pix[:, :, 1].min(axis=1)
    aabb[:, 2] = pix[:, :, 0].max(axis=1)
    aabb[:, 3] = pix[:, :, 1].max(axis=1)
    return aabb, depth.min(axis=1), valid


def project_box3d(box: Box3D, T: np.ndarray, cam: CameraModel,
                  min_depth: float = 0.1) -> Optional[ProjectedBox]:
    """Project one box; None when any corner is at or behind `min_depth`."""
    aabb, depth, valid = project_boxes(
        np.array([[box.x, box.y, box.z, box.l, box.h, box.w, box.yaw]]), T, cam,
        min_depth,
    )
    if not valid[0]:
        return None
    return ProjectedBox(Box2D(*aabb[0]), float(depth[0]))


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Axis-aligned IoU of two image boxes."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def iou_2d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise axis-aligned IoU between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inter > 0.0, inter / union, 0.0)
    return out


def _bev_tuple(box: Box3D):
    return (box.x, box.y, box.l, box.w, box.yaw)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two yaw-rotated footprint rectangles in the ground plane."""
    return float(kernels.rotated_iou(_bev_tuple(a), _bev_tuple(b)))


def iou_bev_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.iou_bev_matrix(a, b)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection area times vertical overlap."""
    pa = np.array([[a.x, a.y, a.z, a.l, a.h, a.w, a.yaw]])
    pb = np.array([[b.x, b.y, b.z, b.l, b.h, b.w, b.yaw]])
    return float(kernels.iou_3d_matrix(pa, pb)[0, 0])


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.iou_3d_matrix(a, b)


def _skew(t: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]]
    )


def fundamental_matrix(K_l: np.ndarray, K_r: np.ndarray, R: np.ndarray,
                       t: np.ndarray) -> FundamentalMatrix:
    """Fundamental matrix of a stereo pair from intrinsics and relative pose.

    (R, t) transform left-camera coordinates to right-camera coordinates
    (X_r = R X_l + t), so F = K_r^-T [t]x R K_l^-1 satisfies c_r' F c_l = 0
    and maps a left pixel to its epipolar line in the right image. For a
    rectified pair (R = I, t along x, K_l = K_r) every epipolar line is
    horizontal. The result is scaled to unit Frobenius norm.
    """
    t = np.asarray(t, dtype=np.float64).reshape(3)
    if np.linalg.norm(t) < 1e-9:
        raise DegenerateBaseline(f"stereo baseline |t| = {np.linalg.norm(t):g} m")
    K_l = np.asarray(K_l, dtype=np.float64).reshape(3, 3)
    K_r = np.asarray(K_r, dtype=np.float64).reshape(3, 3)
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    E = _skew(t) @ R
    F = np.linalg.inv(K_r).T @ E @ np.linalg.inv(K_l)
    return FundamentalMatrix(F / np.linalg.norm(F))


def epipolar_line(F: FundamentalMatrix, pixel) -> Line2D:
    """Epipolar line in the other view for a pixel (u, v)."""
    u, v = float(pixel[0]), float(pixel[1])
    line = F.F @ np.array([u, v, 1.0])
    norm = math.hypot(line[0], line[1])
    if norm < 1e-12:
        raise ZeroLine(f"epipolar line of pixel ({u}, {v}) is numerically null")
    return Line2D(line[0] / norm, line[1] / norm, line[2] / norm)


def point_line_distance(line: Line2D, pixel) -> float:
    """Euclidean pixel distance from a point to a normalized line."""
    return abs(line.a * float(pixel[0]) + line.b * float(pixel[1]) + line.c)
