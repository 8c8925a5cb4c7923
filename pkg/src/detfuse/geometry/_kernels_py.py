"""Pure-Python rotated-box overlap kernels (fallback backend).

Same contract as the compiled extension `_kernels`: BEV boxes are rows
(cx, cy, l, w, yaw), 3D boxes are rows (cx, cy, cz, l, h, w, yaw).
Intersection areas come from Sutherland-Hodgman clipping of one footprint
rectangle against the other followed by the shoelace formula; areas below
1e-12 m^2 count as no overlap. A circumscribed-circle prefilter skips
pairs that cannot intersect.
"""

from __future__ import annotations

import math

import numpy as np

AREA_EPS = 1e-12

BACKEND = "python"


def rect_corners(cx: float, cy: float, l: float, w: float, yaw: float) -> list:
    """Counter-clockwise footprint corners of a yawed rectangle."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = 0.5 * l, 0.5 * w
    out = []
    for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return out


def _polygon_area(poly) -> float:
    area = 0.0
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        area += x1 * y2 - x2 * y1
    return 0.5 * area


def _clip(subject, c1, c2):
    """Clip a polygon by the half-plane left of the directed edge c1 -> c2."""
    ex, ey = c2[0] - c1[0], c2[1] - c1[1]
    out = []
    n = len(subject)
    for i in range(n):
        sx, sy = subject[i - 1]
        px, py = subject[i]
        d_prev = ex * (sy - c1[1]) - ey * (sx - c1[0])
        d_cur = ex * (py - c1[1]) - ey * (px - c1[0])
        if d_cur >= 0.0:
            if d_prev < 0.0:
                t = d_prev / (d_prev - d_cur)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
            out.append((px, py))
        elif d_prev >= 0.0:
            t = d_prev / (d_prev - d_cur)
            out.append((sx + t * (px - sx), sy + t * (py - sy)))
    return out


def rotated_intersection_area(a, b) -> float:
    """Intersection area of two (cx, cy, l, w, yaw) footprint rectangles."""
    poly = rect_corners(a[0], a[1], a[2], a[3], a[4])
    clip_poly = rect_corners(b[0], b[1], b[2], b[3], b[4])
    for i in range(4):
        poly = _clip(poly, clip_poly[i], clip_poly[(i + 1) % 4])
        if len(poly) < 3:
            return 0.0
    area = abs(_polygon_area(poly))
    return 0.0 if area < AREA_EPS else area


def rotated_iou(a, b) -> float:
    inter = rotated_intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return min(1.0, inter / union) if union > 0.0 else 0.0


def _radii(params: np.ndarray) -> np.ndarray:
    return 0.5 * np.hypot(params[:, 2], params[:, 3])


def iou_bev_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between two (N, 5) and (M, 5) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return out
    dx = a[:, 0:1] - b[None, :, 0]
    dy = a[:, 1:2] - b[None, :, 1]
    near = np.hypot(dx, dy) <= _radii(a)[:, None] + _radii(b)[None, :]
    for i, j in zip(*np.nonzero(near)):
        out[i, j] = rotated_iou(a[i], b[j])
    return out


def bev_overlap_edges(params: np.ndarray, tau: float) -> np.ndarray:
    """Index pairs (i, j), i < j, whose footprint IoU strictly exceeds tau."""
    params = np.asarray(params, dtype=np.float64)
    n = params.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    radii = _radii(params)
    dx = params[:, 0:1] - params[None, :, 0]
    dy = params[:, 1:2] - params[None, :, 1]
    near = np.hypot(dx, dy) <= radii[:, None] + radii[None, :]
    near &= np.triu(np.ones((n, n), dtype=bool), k=1)
    edges = []
    for i, j in zip(*np.nonzero(near)):
        if rotated_iou(params[i], params[j]) > tau:
            edges.append((i, j))
    return np.array(edges, dtype=np.int64).reshape(len(edges), 2)


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU between two (N, 7) and (M, 7) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return out
    radii_a = 0.5 * np.hypot(a[:, 3], a[:, 5])
    radii_b = 0.5 * np.hypot(b[:, 3], b[:, 5])
    dx = a[:, 0:1] - b[None, :, 0]
    dy = a[:, 1:2] - b[None, :, 1]
    near = np.hypot(dx, dy) <= radii_a[:, None] + radii_b[None, :]
    for i, j in zip(*np.nonzero(near)):
        z_lo = max(a[i, 2] - 0.5 * a[i, 4], b[j, 2] - 0.5 * b[j, 4])
        z_hi = min(a[i, 2] + 0.5 * a[i, 4], b[j, 2] + 0.5 * b[j, 4])
        dz = z_hi - z_lo
        if dz <= 0.0:
            continue
        pa = (a[i, 0], a[i, 1], a[i, 3], a[i, 5], a[i, 6])
        pb = (b[j, 0], b[j, 1], b[j, 3], b[j, 5], b[j, 6])
        inter = rotated_intersection_area(pa, pb) * dz
        if inter <= 0.0:
            continue
        vol_a = a[i, 3] * a[i, 4] * a[i, 5]
        vol_b = b[j, 3] * b[j, 4] * b[j, 5]
        out[i, j] = min(1.0, inter / (vol_a + vol_b - inter))
    return out
