# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled rotated-box overlap kernels (hot path).

Mirrors `_kernels_py` exactly: Sutherland-Hodgman clipping + shoelace area
with a circumscribed-circle prefilter. Box layouts: BEV (cx, cy, l, w, yaw),
3D (cx, cy, cz, l, h, w, yaw).
"""

from libc.math cimport cos, sin, hypot, fabs

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double AREA_EPS = 1e-12

BACKEND = "compiled"


cdef void _rect_corners(double cx, double cy, double l, double w, double yaw,
                        double* xs, double* ys) noexcept nogil:
    cdef double c = cos(yaw)
    cdef double s = sin(yaw)
    cdef double hl = 0.5 * l
    cdef double hw = 0.5 * w
    xs[0] = cx + c * hl - s * hw;  ys[0] = cy + s * hl + c * hw
    xs[1] = cx - c * hl - s * hw;  ys[1] = cy - s * hl + c * hw
    xs[2] = cx - c * hl + s * hw;  ys[2] = cy - s * hl - c * hw
    xs[3] = cx + c * hl + s * hw;  ys[3] = cy + s * hl - c * hw


cdef double _intersection_area(double ax, double ay, double al, double aw, double ayaw,
                               double bx, double by, double bl, double bw, double byaw) noexcept nogil:
    # Clipping a quad by 4 half-planes yields at most 8 vertices.
    cdef double sx[16]
    cdef double sy[16]
    cdef double ox[16]
    cdef double oy[16]
    cdef double cxs[4]
    cdef double cys[4]
    cdef int n, m, i, k, k2
    cdef double ex, ey, d_prev, d_cur, px, py, qx, qy, t, area

    _rect_corners(ax, ay, al, aw, ayaw, sx, sy)
    _rect_corners(bx, by, bl, bw, byaw, cxs, cys)
    n = 4

    for k in range(4):
        k2 = (k + 1) & 3
        ex = cxs[k2] - cxs[k]
        ey = cys[k2] - cys[k]
        m = 0
        for i in range(n):
            if i == 0:
                px = sx[n - 1]; py = sy[n - 1]
            else:
                px = sx[i - 1]; py = sy[i - 1]
            qx = sx[i]; qy = sy[i]
            d_prev = ex * (py - cys[k]) - ey * (px - cxs[k])
            d_cur = ex * (qy - cys[k]) - ey * (qx - cxs[k])
            if d_cur >= 0.0:
                if d_prev < 0.0:
                    t = d_prev / (d_prev - d_cur)
                    ox[m] = px + t * (qx - px); oy[m] = py + t * (qy - py)
                    m += 1
                ox[m] = qx; oy[m] = qy
                m += 1
            elif d_prev >= 0.0:
                t = d_prev / (d_prev - d_cur)
                ox[m] = px + t * (qx - px); oy[m] = py + t * (qy - py)
                m += 1
        n = m
        if n < 3:
            return 0.0
        for i in range(n):
            sx[i] = ox[i]; sy[i] = oy[i]

    area = 0.0
    for i in range(n):
        k = i + 1
        if k == n:
            k = 0
        area += sx[i] * sy[k] - sx[k] * sy[i]
    area = 0.5 * fabs(area)
    if area < AREA_EPS:
        return 0.0
    return area


cdef inline double _pair_iou(const double* a, const double* b) noexcept nogil:
    cdef double inter = _intersection_area(a[0], a[1], a[2], a[3], a[4],
                                           b[0], b[1], b[2], b[3], b[4])
    cdef double union_, iou
    if inter == 0.0:
        return 0.0
    union_ = a[2] * a[3] + b[2] * b[3] - inter
    if union_ <= 0.0:
        return 0.0
    iou = inter / union_
    return 1.0 if iou > 1.0 else iou


def rotated_intersection_area(a, b):
    """Intersection area of two (cx, cy, l, w, yaw) footprint rectangles."""
    cdef double pa[5]
    cdef double pb[5]
    cdef int i
    for i in range(5):
        pa[i] = a[i]
        pb[i] = b[i]
    return _intersection_area(pa[0], pa[1], pa[2], pa[3], pa[4],
                              pb[0], pb[1], pb[2], pb[3], pb[4])


def rotated_iou(a, b):
    cdef double pa[5]
    cdef double pb[5]
    cdef int i
    for i in range(5):
        pa[i] = a[i]
        pb[i] = b[i]
    return _pair_iou(pa, pb)


def iou_bev_matrix(a, b):
    """Pairwise BEV IoU between two (N, 5) and (M, 5) box arrays."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t m = B.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double ra, rb
    with nogil:
        for i in range(n):
            ra = 0.5 * hypot(A[i, 2], A[i, 3])
            for j in range(m):
                rb = 0.5 * hypot(B[j, 2], B[j, 3])
                if hypot(A[i, 0] - B[j, 0], A[i, 1] - B[j, 1]) <= ra + rb:
                    out[i, j] = _pair_iou(&A[i, 0], &B[j, 0])
    return out


def bev_overlap_edges(params, double tau):
    """Index pairs (i, j), i < j, whose footprint IoU strictly exceeds tau."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.ascontiguousarray(params, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef list edges = []
    cdef Py_ssize_t i, j
    cdef double ra, rb
    for i in range(n):
        ra = 0.5 * hypot(A[i, 2], A[i, 3])
        for j in range(i + 1, n):
            rb = 0.5 * hypot(A[j, 2], A[j, 3])
            if hypot(A[i, 0] - A[j, 0], A[i, 1] - A[j, 1]) <= ra + rb:
                if _pair_iou(&A[i, 0], &A[j, 0]) > tau:
                    edges.append((i, j))
    return np.array(edges, dtype=np.int64).reshape(len(edges), 2)


def iou_3d_matrix(a, b):
    """Pairwise 3D IoU between two (N, 7) and (M, 7) box arrays."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] B = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t m = B.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double ra, rb, z_lo, z_hi, dz, inter, vol_a, vol_b
    with nogil:
        for i in range(n):
            ra = 0.5 * hypot(A[i, 3], A[i, 5])
            vol_a = A[i, 3] * A[i, 4] * A[i, 5]
            for j in range(m):
                rb = 0.5 * hypot(B[j, 3], B[j, 5])
                if hypot(A[i, 0] - B[j, 0], A[i, 1] - B[j, 1]) > ra + rb:
                    continue
                z_lo = A[i, 2] - 0.5 * A[i, 4]
                if B[j, 2] - 0.5 * B[j, 4] > z_lo:
                    z_lo = B[j, 2] - 0.5 * B[j, 4]
                z_hi = A[i, 2] + 0.5 * A[i, 4]
                if B[j, 2] + 0.5 * B[j, 4] < z_hi:
                    z_hi = B[j, 2] + 0.5 * B[j, 4]
                dz = z_hi - z_lo
                if dz <= 0.0:
                    continue
                inter = _intersection_area(A[i, 0], A[i, 1], A[i, 3], A[i, 5], A[i, 6],
                                           B[j, 0], B[j, 1], B[j, 3], B[j, 5], B[j, 6]) * dz
                if inter <= 0.0:
                    continue
                vol_b = B[j, 3] * B[j, 4] * B[j, 5]
                out[i, j] = inter / (vol_a + vol_b - inter)
                if out[i, j] > 1.0:
                    out[i, j] = 1.0
    return out
