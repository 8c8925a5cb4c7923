import math

import numpy as np
import pytest

from detfuse.core import (
    Box3D,
    CalibrationSet,
    CameraModel,
    Detection3D,
    LabelSet,
    PointCloud,
    StereoPair,
)


@pytest.fixture
def labels():
    return LabelSet.default()


@pytest.fixture
def car(labels):
    return labels.by_name("car")


def make_detection(x, y, score=0.9, label=None, l=4.0, h=1.6, w=1.9, yaw=0.0, z=0.0):
    if label is None:
        label = LabelSet.default().by_name("car")
    return Detection3D(Box3D(x, y, z, l, h, w, yaw), score, label)


def canonical_camera(width=2.0, height=2.0):
    """P = [I | 0]: pixel = (x/z, y/z), depth = z."""
    P = np.hstack([np.eye(3), np.zeros((3, 1))])
    return CameraModel(P, width, height, np.eye(3))


def pinhole_camera(focal=1000.0, width=1600, height=900):
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    P = K @ np.hstack([np.eye(3), np.zeros((3, 1))])
    return CameraModel(P, width, height, K)


def identity_calib(cameras, stereo_pairs=()):
    """Calibration whose working frame is the camera frame itself."""
    return CalibrationSet(np.eye(4), tuple(cameras), tuple(stereo_pairs))


def stereo_calib(baseline=0.54, focal=1000.0, width=1600, height=900):
    K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
    P_l = K @ np.hstack([np.eye(3), np.zeros((3, 1))])
    t = np.array([-baseline, 0.0, 0.0])
    P_r = K @ np.hstack([np.eye(3), t[:, None]])
    cams = (
        CameraModel(P_l, width, height, K),
        CameraModel(P_r, width, height, K),
    )
    return identity_calib(cams, (StereoPair(0, 1, np.eye(3), t),))


def empty_cloud():
    return PointCloud(np.zeros((0, 4)))


def _footprint_corners(box: Box3D):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.l / 2, box.w / 2
    pts = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return pts @ np.array([[c, s], [-s, c]]) + [box.x, box.y]


def _inside_footprint(box: Box3D, pts):
    d = pts - [box.x, box.y]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = d[:, 0] * c + d[:, 1] * s
    v = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)


def mc_iou_bev(a: Box3D, b: Box3D, samples=1_000_000, seed=0):
    """Monte-Carlo BEV IoU oracle, independent of any clipping code.

    Footprint areas are exact (l*w); only the intersection area is
    estimated, by stratified-jittered sampling over the intersection of the
    two footprint AABBs (one jittered sample per grid cell keeps the error
    boundary-limited, far below the plain-uniform-sampling noise floor).
    """
    rng = np.random.default_rng(seed)
    ca, cb = _footprint_corners(a), _footprint_corners(b)
    lo = np.maximum(ca.min(axis=0), cb.min(axis=0))
    hi = np.minimum(ca.max(axis=0), cb.max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    m = int(math.sqrt(samples))
    cell = (hi - lo) / m
    ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    pts = lo + (np.column_stack([ii.ravel(), jj.ravel()])
                + rng.uniform(size=(m * m, 2))) * cell
    hits = _inside_footprint(a, pts) & _inside_footprint(b, pts)
    inter = hits.mean() * float(np.prod(hi - lo))
    area_a = a.l * a.w
    area_b = b.l * b.w
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def mc_iou_3d(a: Box3D, b: Box3D, samples=1_000_000, seed=0):
    """Monte-Carlo volumetric IoU oracle (stratified, exact box volumes)."""
    rng = np.random.default_rng(seed)
    ca, cb = _footprint_corners(a), _footprint_corners(b)
    lo2 = np.maximum(ca.min(axis=0), cb.min(axis=0))
    hi2 = np.minimum(ca.max(axis=0), cb.max(axis=0))
    z_lo = max(a.z - a.h / 2, b.z - b.h / 2)
    z_hi = min(a.z + a.h / 2, b.z + b.h / 2)
    if np.any(hi2 <= lo2) or z_hi <= z_lo:
        return 0.0
    lo = np.array([lo2[0], lo2[1], z_lo])
    hi = np.array([hi2[0], hi2[1], z_hi])
    m = round(samples ** (1 / 3))
    cell = (hi - lo) / m
    ii, jj, kk = np.meshgrid(*[np.arange(m)] * 3, indexing="ij")
    grid = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
    pts = lo + (grid + rng.uniform(size=(m**3, 3))) * cell

    def inside(box, pts):
        return _inside_footprint(box, pts[:, :2]) & (
            np.abs(pts[:, 2] - box.z) <= box.h / 2
        )

    hits = inside(a, pts) & inside(b, pts)
    inter = hits.mean() * float(np.prod(hi - lo))
    union = a.volume() + b.volume() - inter
    return inter / union if union > 0 else 0.0


def random_box(rng, span=10.0):
    return Box3D(
        rng.uniform(-span, span),
        rng.uniform(-span, span),
        rng.uniform(-2.0, 2.0),
        rng.uniform(0.5, 5.0),
        rng.uniform(0.5, 3.0),
        rng.uniform(0.5, 5.0),
        rng.uniform(0.0, 2.0 * math.pi),
    )
