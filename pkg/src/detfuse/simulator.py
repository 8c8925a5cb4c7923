"""Deterministic synthetic scenes standing in for trained detectors.

Scenes place non-overlapping boxes on a ground plane in front of a camera
rig, sample LiDAR-like surface points with 1/range^2 density falloff and a
coarse angular depth buffer for occlusion, and corrupt the ground truth
into detector-style 3D and 2D outputs with controlled false-negative /
false-positive / jitter / duplication rates.

Randomness is counter-based: every entity draws from a Philox stream keyed
by (seed, entity id), so adding one object never reshuffles the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    Box2D,
    Box3D,
    CalibrationSet,
    CameraModel,
    ClassLabel,
    Detection2D,
    Detection3D,
    FrameInput,
    LabelSet,
    Mask,
    PointCloud,
    StereoPair,
    normalize_yaw,
)
from .errors import PlacementFailure
from .evaluation import GroundTruthBox, GroundTruthFrame
from .geometry import box3d_params, iou_2d, project_boxes

_MASK64 = (1 << 64) - 1


def _splitmix_step(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix_key(*values) -> int:
    h = 0
    for v in values:
        if isinstance(v, str):
            for b in v.encode("utf-8"):
                h = _splitmix_step(h ^ b)
        else:
            h = _splitmix_step(h ^ (int(v) & _MASK64))
    return h


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator keyed by (seed, entity id)."""
    return np.random.Generator(np.random.Philox(key=_mix_key(seed, *keys)))


@dataclass(frozen=True)
class ScoreModel:
    """Confidence score distribution: clamped normal or uniform."""

    kind: str = "normal"   # normal(mean=a, sigma=b) | uniform(low=a, high=b)
    a: float = 0.85
    b: float = 0.1

    def sample(self, rng: np.random.Generator, n: Optional[int] = None):
        if self.kind == "normal":
            values = rng.normal(self.a, self.b, size=n)
        elif self.kind == "uniform":
            values = rng.uniform(self.a, self.b, size=n)
        else:
            raise ValueError(f"unknown score model kind {self.kind!r}")
        return np.clip(values, 0.01, 0.999)


@dataclass(frozen=True)
class CameraRigSpec:
    """Synthetic camera rig: single forward camera, stereo pair, or a ring."""

    kind: str = "mono"          # mono | stereo | multi
    num_cameras: int = 1        # used by kind="multi"
    baseline: float = 0.54      # meters, kind="stereo"
    width: int = 1600
    height: int = 900
    focal: float = 1000.0
    yaw_step_deg: float = 60.0  # angular spacing of the multi-camera ring

    def __post_init__(self):
        if self.kind not in ("mono", "stereo", "multi"):
            raise ValueError(f"unknown rig kind {self.kind!r}")
        if self.kind == "stereo" and self.baseline <= 0:
            raise ValueError("stereo rig needs a positive baseline")


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the synthetic scene generator."""

    objects_min: int = 4
    objects_max: int = 10
    class_mix: tuple = (("car", 0.5), ("pedestrian", 0.25), ("cyclist", 0.25))
    range_min: float = 8.0
    range_max: float = 45.0
    azimuth_max_deg: float = 32.0
    dim_sigma: float = 0.08          # fractional sigma around the class prior dims
    density: float = 20000.0         # surface points * m^2 at 1 m range (64-beam-like)
    ground_points: int = 3000
    clutter_points: int = 200
    ground_z: float = -1.7           # ground plane height in the sensor frame
    placement_margin: float = 0.7    # BEV clearance between object footprints
    rig: CameraRigSpec = field(default_factory=CameraRigSpec)
    labels: LabelSet = field(default_factory=LabelSet.default)


@dataclass(frozen=True)
class DetectorNoiseSpec:
    """Failure model applied to ground truth to emulate detector outputs."""

    fn_rate_3d: float = 0.3
    fp_rate_3d: float = 0.3
    center_sigma: float = 0.15       # meters
    dim_sigma_3d: float = 0.05       # fractional
    yaw_sigma: float = 0.05          # radians
    duplicates: int = 5              # jittered copies per detected object
    score_tp_3d: ScoreModel = field(default_factory=ScoreModel)
    score_fp_3d: ScoreModel = field(default_factory=lambda: ScoreModel("normal", 0.4, 0.15))
    confusion_3d: float = 0.0        # probability a 3D label flips to another class
    fn_rate_2d: float = 0.05
    fp_rate_2d: float = 0.05
    corner_sigma: float = 2.0        # pixels
    score_tp_2d: ScoreModel = field(default_factory=ScoreModel)
    score_fp_2d: ScoreModel = field(default_factory=lambda: ScoreModel("normal", 0.4, 0.15))
    confusion_2d: float = 0.0
    masks: bool = False              # attach inscribed-ellipse instance masks

    def confusion_row(self, labels: LabelSet, true_id: int, rate: float):
        """Row of the implied confusion matrix for one true class."""
        k = len(labels)
        row = np.full(k, rate / (k - 1) if k > 1 else 0.0)
        idx = [c.id for c in labels].index(true_id)
        row[idx] = 1.0 - rate if k > 1 else 1.0
        return row


# LiDAR frame: x forward, y left, z up. Camera frame: x right, y down,
# z forward. The rig reference camera is colocated with the sensor.
_LIDAR_TO_CAM = np.array(
    [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)


def _intrinsics(rig: CameraRigSpec) -> np.ndarray:
    return np.array(
        [
            [rig.focal, 0.0, rig.width / 2.0],
            [0.0, rig.focal, rig.height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )


def build_calibration(rig: CameraRigSpec) -> CalibrationSet:
    """Camera models and stereo registration for a rig spec."""
    K = _intrinsics(rig)
    if rig.kind == "mono":
        cams = [CameraModel(K @ np.hstack([np.eye(3), np.zeros((3, 1))]),
                            rig.width, rig.height, K)]
        pairs = ()
    elif rig.kind == "stereo":
        b = rig.baseline
        P_l = K @ np.hstack([np.eye(3), np.zeros((3, 1))])
        t_rl = np.array([-b, 0.0, 0.0])
        P_r = K @ np.hstack([np.eye(3), t_rl[:, None]])
        cams = [
            CameraModel(P_l, rig.width, rig.height, K),
            CameraModel(P_r, rig.width, rig.height, K),
        ]
        pairs = (StereoPair(0, 1, np.eye(3), t_rl),)
    else:
        cams = []
        for k in range(rig.num_cameras):
            angle = math.radians(rig.yaw_step_deg) * k
            # Rotation about the camera vertical (y) axis turns the optical
            # axis across the ring.
            c, s = math.cos(angle), math.sin(angle)
            R = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
            cams.append(
                CameraModel(K @ np.hstack([R, np.zeros((3, 1))]),
                            rig.width, rig.height, K)
            )
        pairs = ()
    return CalibrationSet(_LIDAR_TO_CAM, tuple(cams), pairs)


def _sample_class(rng, spec: SceneSpec) -> ClassLabel:
    names = [name for name, _ in spec.class_mix]
    probs = np.array([p for _, p in spec.class_mix], dtype=np.float64)
    probs /= probs.sum()
    return spec.labels.by_name(names[int(rng.choice(len(names), p=probs))])


def _footprint_radius(box: Box3D) -> float:
    return 0.5 * math.hypot(box.l, box.w)


def _sample_pose(rng, spec: SceneSpec):
    az = math.radians(spec.azimuth_max_deg) * rng.uniform(-1.0, 1.0)
    r = rng.uniform(spec.range_min, spec.range_max)
    return r * math.cos(az), r * math.sin(az)


def generate_scene(spec: SceneSpec, seed: int):
    """Build one scene: (GroundTruthFrame, PointCloud, CalibrationSet).

    Object footprints never overlap in BEV (rejection sampled with a
    clearance margin); surface points cover sensor-facing side faces and
    the top face with Poisson counts proportional to density * area / r^2.
    """
    calib = build_calibration(spec.rig)
    rng_scene = rng_for(seed, "scene")
    count = int(rng_scene.integers(spec.objects_min, spec.objects_max + 1))

    boxes: list = []
    annotations = []
    for i in range(count):
        rng_obj = rng_for(seed, "object", i)
        label = _sample_class(rng_obj, spec)
        dims = np.array(label.dim_prior) * (
            1.0 + rng_obj.normal(0.0, spec.dim_sigma, size=3)
        )
        dims = np.maximum(dims, 0.3)
        yaw = rng_obj.uniform(0.0, 2.0 * math.pi)
        placed = None
        for _ in range(200):
            x, y = _sample_pose(rng_obj, spec)
            candidate = Box3D(
                x, y, spec.ground_z + dims[1] / 2.0,
                float(dims[0]), float(dims[1]), float(dims[2]), yaw,
            )
            ok = all(
                math.hypot(candidate.x - b.x, candidate.y - b.y)
                > _footprint_radius(candidate) + _footprint_radius(b) + spec.placement_margin
                for b in boxes
            )
            if ok:
                placed = candidate
                break
        if placed is None:
            raise PlacementFailure(
                f"could not place object {i} after 200 attempts (seed {seed})"
            )
        boxes.append(placed)
        annotations.append(GroundTruthBox(placed, label))

    cloud = _sample_cloud(spec, seed, boxes)
    return GroundTruthFrame(tuple(annotations)), cloud, calib


def _box_faces(box: Box3D):
    """Side and top faces as (center, u_axis, v_axis, half_u, half_v, normal)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    center = np.array([box.x, box.y, box.z])
    hl, hh, hw = box.l / 2.0, box.h / 2.0, box.w / 2.0
    faces = [
        (center + fwd * hl, left, up, hw, hh, fwd),      # front
        (center - fwd * hl, left, up, hw, hh, -fwd),     # rear
        (center + left * hw, fwd, up, hl, hh, left),     # left side
        (center - left * hw, fwd, up, hl, hh, -left),    # right side
        (center + up * hh, fwd, left, hl, hw, up),       # top
    ]
    return faces


def _sample_cloud(spec: SceneSpec, seed: int, boxes: Sequence[Box3D]) -> PointCloud:
    bin_deg = 1.0
    n_bins = int(360 / bin_deg)
    buffer = np.full(n_bins, np.inf)

    def bin_of(x, y):
        # Bin 0 sits at azimuth -180 deg so the wrap seam lies behind the
        # sensor, far from the placement wedge.
        az = np.degrees(np.arctan2(y, x)) + 180.0
        return np.clip((az / bin_deg).astype(np.int64), 0, n_bins - 1)

    corner_info = []
    for box in boxes:
        corners = np.array(
            [
                [box.x + math.cos(box.yaw) * dx - math.sin(box.yaw) * dy,
                 box.y + math.sin(box.yaw) * dx + math.cos(box.yaw) * dy]
                for dx, dy in (
                    (box.l / 2, box.w / 2), (-box.l / 2, box.w / 2),
                    (-box.l / 2, -box.w / 2), (box.l / 2, -box.w / 2),
                )
            ]
        )
        ranges = np.hypot(corners[:, 0], corners[:, 1])
        bins = bin_of(corners[:, 0], corners[:, 1])
        lo, hi = int(bins.min()), int(bins.max())
        r_min = float(ranges.min())
        span = np.arange(lo, hi + 1)
        buffer[span] = np.minimum(buffer[span], r_min)
        corner_info.append(r_min)

    chunks = []
    for i, box in enumerate(boxes):
        rng_pts = rng_for(seed, "points", i)
        diag = math.hypot(box.l, box.w)
        obj_range = math.hypot(box.x, box.y)
        pts = []
        for f, (center, u, v, hu, hv, normal) in enumerate(_box_faces(box)):
            facing = float(normal @ center)
            if facing >= 0.0 and f != 4:
                continue  # side face looks away from the sensor
            if f == 4 and center[2] >= 0.0:
                continue  # top face above sensor height is invisible
            area = 4.0 * hu * hv
            mean = spec.density * area / max(obj_range, 1.0) ** 2
            n = int(rng_pts.poisson(mean))
            if n == 0:
                continue
            a = rng_pts.uniform(-hu, hu, size=n)
            b = rng_pts.uniform(-hv, hv, size=n)
            pts.append(center + a[:, None] * u + b[:, None] * v)
        if not pts:
            continue
        xyz = np.vstack(pts)
        rng_vis = rng_for(seed, "refl", i)
        r_pt = np.hypot(xyz[:, 0], xyz[:, 1])
        keep = r_pt <= buffer[bin_of(xyz[:, 0], xyz[:, 1])] + diag + 0.5
        xyz = xyz[keep]
        refl = rng_vis.uniform(0.1, 0.9, size=xyz.shape[0])
        chunks.append(np.column_stack([xyz, refl]))

    rng_ground = rng_for(seed, "ground")
    if spec.ground_points:
        az = np.radians(rng_ground.uniform(-60.0, 60.0, size=spec.ground_points))
        r = rng_ground.uniform(2.0, spec.range_max + 15.0, size=spec.ground_points)
        gx, gy = r * np.cos(az), r * np.sin(az)
        gz = np.full_like(gx, spec.ground_z)
        refl = rng_ground.uniform(0.05, 0.4, size=spec.ground_points)
        chunks.append(np.column_stack([gx, gy, gz, refl]))

    rng_clutter = rng_for(seed, "clutter")
    if spec.clutter_points:
        az = np.radians(rng_clutter.uniform(-60.0, 60.0, size=spec.clutter_points))
        r = rng_clutter.uniform(2.0, spec.range_max + 15.0, size=spec.clutter_points)
        cx, cy = r * np.cos(az), r * np.sin(az)
        cz = rng_clutter.uniform(spec.ground_z, spec.ground_z + 2.5,
                                 size=spec.clutter_points)
        keep = r <= buffer[bin_of(cx, cy)] + 0.5
        refl = rng_clutter.uniform(0.1, 0.9, size=spec.clutter_points)
        chunk = np.column_stack([cx, cy, cz, refl])[keep]
        chunks.append(chunk)

    if chunks:
        xyzr = np.vstack(chunks)
    else:
        xyzr = np.zeros((0, 4))
    return PointCloud(xyzr, frame_id=f"{seed:06d}")


def corrupt_3d(
    gt: GroundTruthFrame,
    noise: DetectorNoiseSpec,
    seed: int,
    labels: LabelSet,
    spec: Optional[SceneSpec] = None,
):
    """Emulate an NMS-free LiDAR detector on ground truth.

    Each kept object emits `duplicates` jittered copies sharing one
    (possibly confused) class; exactly round(fp_rate * |GT|) spurious boxes
    are added in free space. Returns (detections, provenance) where
    provenance maps each detection to its GT index or None.
    """
    spec = spec or SceneSpec(labels=labels)
    dets: list = []
    provenance: list = []
    label_list = list(labels)
    for i, ann in enumerate(gt.boxes):
        rng = rng_for(seed, "det3d", i)
        if rng.uniform() < noise.fn_rate_3d:
            continue
        row = noise.confusion_row(labels, ann.label.id, noise.confusion_3d)
        label = label_list[int(rng.choice(len(label_list), p=row))]
        scores = noise.score_tp_3d.sample(rng, noise.duplicates)
        for d in range(noise.duplicates):
            box = ann.box
            jitter = rng.normal(0.0, noise.center_sigma, size=3)
            dims = np.array([box.l, box.h, box.w]) * (
                1.0 + rng.normal(0.0, noise.dim_sigma_3d, size=3)
            )
            dims = np.maximum(dims, 0.1)
            dets.append(
                Detection3D(
                    Box3D(
                        box.x + jitter[0],
                        box.y + jitter[1],
                        box.z + 0.5 * jitter[2],
                        float(dims[0]), float(dims[1]), float(dims[2]),
                        normalize_yaw(box.yaw + rng.normal(0.0, noise.yaw_sigma)),
                    ),
                    float(scores[d]),
                    label,
                )
            )
            provenance.append(i)

    n_fp = int(round(noise.fp_rate_3d * len(gt.boxes)))
    gt_xy = [(b.box.x, b.box.y, _footprint_radius(b.box)) for b in gt.boxes]
    for k in range(n_fp):
        rng = rng_for(seed, "fp3d", k)
        label = label_list[int(rng.integers(len(label_list)))]
        dims = np.maximum(
            np.array(label.dim_prior) * (1.0 + rng.normal(0.0, 0.1, size=3)), 0.3
        )
        for _ in range(100):
            x, y = _sample_pose(rng, spec)
            radius = 0.5 * math.hypot(dims[0], dims[2])
            if all(
                math.hypot(x - gx, y - gy) > radius + gr + 0.2
                for gx, gy, gr in gt_xy
            ):
                break
        dets.append(
            Detection3D(
                Box3D(
                    x, y, spec.ground_z + dims[1] / 2.0,
                    float(dims[0]), float(dims[1]), float(dims[2]),
                    rng.uniform(0.0, 2.0 * math.pi),
                ),
                float(noise.score_fp_3d.sample(rng)),
                label,
            )
        )
        provenance.append(None)
    return dets, provenance


def _inscribed_ellipse_mask(resolution: int = 32) -> Mask:
    ii, jj = np.mgrid[0:resolution, 0:resolution]
    cy = cx = (resolution - 1) / 2.0
    ry = rx = resolution / 2.0
    inside = ((ii - cy) / ry) ** 2 + ((jj - cx) / rx) ** 2 <= 1.0
    return Mask(inside)


_ELLIPSE_MASK = _inscribed_ellipse_mask()


def corrupt_2d(
    gt: GroundTruthFrame,
    calib: CalibrationSet,
    noise: DetectorNoiseSpec,
    seed: int,
    labels: LabelSet,
):
    """Emulate a 2D detector per view from projected ground truth.

    Boxes fully behind a camera or off its image are not emitted; visible
    ones are corner-jittered, dropped at fn_rate, and joined by background
    false positives. Returns (dets2d_per_view, provenance_per_view).
    """
    label_list = list(labels)
    params = box3d_params([b.box for b in gt.boxes]) if gt.boxes else np.zeros((0, 7))
    per_view = []
    prov_view = []
    for view, cam in enumerate(calib.cameras):
        aabb, _, valid = project_boxes(params, calib.lidar_to_cam, cam)
        dets: list = []
        prov: list = []
        visible = []
        for i, ann in enumerate(gt.boxes):
            if not valid[i]:
                continue
            x0, y0, x1, y1 = aabb[i]
            if x1 <= 0 or x0 >= cam.width or y1 <= 0 or y0 >= cam.height:
                continue
            visible.append((i, ann, aabb[i]))
        for i, ann, (x0, y0, x1, y1) in visible:
            rng = rng_for(seed, "det2d", view, i)
            if rng.uniform() < noise.fn_rate_2d:
                continue
            jitter = rng.normal(0.0, noise.corner_sigma, size=4)
            nx0, ny0 = x0 + jitter[0], y0 + jitter[1]
            nx1, ny1 = x1 + jitter[2], y1 + jitter[3]
            if nx1 <= nx0 + 2.0:
                cx = 0.5 * (nx0 + nx1)
                nx0, nx1 = cx - 1.0, cx + 1.0
            if ny1 <= ny0 + 2.0:
                cy = 0.5 * (ny0 + ny1)
                ny0, ny1 = cy - 1.0, cy + 1.0
            row = noise.confusion_row(labels, ann.label.id, noise.confusion_2d)
            label = label_list[int(rng.choice(len(label_list), p=row))]
            dets.append(
                Detection2D(
                    Box2D(nx0, ny0, nx1, ny1),
                    float(noise.score_tp_2d.sample(rng)),
                    label,
                    _ELLIPSE_MASK if noise.masks else None,
                )
            )
            prov.append(i)

        n_fp = int(round(noise.fp_rate_2d * len(visible)))
        gt_boxes = [Box2D(*aabb[i]) for i, _, _ in visible]
        for k in range(n_fp):
            rng = rng_for(seed, "fp2d", view, k)
            placed = None
            for _ in range(40):
                w = rng.uniform(25.0, 140.0)
                h = rng.uniform(25.0, 120.0)
                cx = rng.uniform(w / 2, cam.width - w / 2)
                cy = rng.uniform(h / 2, cam.height - h / 2)
                cand = Box2D(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                if all(iou_2d(cand, g) < 0.1 for g in gt_boxes):
                    placed = cand
                    break
            if placed is None:
                continue
            label = label_list[int(rng.integers(len(label_list)))]
            dets.append(
                Detection2D(
                    placed,
                    float(noise.score_fp_2d.sample(rng)),
                    label,
                    _ELLIPSE_MASK if noise.masks else None,
                )
            )
            prov.append(None)
        per_view.append(tuple(dets))
        prov_view.append(tuple(prov))
    return per_view, prov_view


@dataclass(frozen=True)
class SimulatedFrame:
    """One synthetic frame: ground truth, sensor data, corrupted detections."""

    seed: int
    gt: GroundTruthFrame
    cloud: PointCloud
    calib: CalibrationSet
    dets3d: tuple
    provenance3d: tuple
    dets2d_per_view: tuple
    provenance2d: tuple
    labels: LabelSet

    def frame_input(self) -> FrameInput:
        return FrameInput(
            cloud=self.cloud,
            calib=self.calib,
            dets3d=self.dets3d,
            dets2d_per_view=self.dets2d_per_view,
            labels=self.labels,
        )


def simulate_frame(
    spec: SceneSpec, noise: DetectorNoiseSpec, seed: int
) -> SimulatedFrame:
    """Generate one scene and corrupt it into detector outputs."""
    gt, cloud, calib = generate_scene(spec, seed)
    dets3d, prov3d = corrupt_3d(gt, noise, seed, spec.labels, spec)
    dets2d, prov2d = corrupt_2d(gt, calib, noise, seed, spec.labels)
    return SimulatedFrame(
        seed=seed,
        gt=gt,
        cloud=cloud,
        calib=calib,
        dets3d=tuple(dets3d),
        provenance3d=tuple(prov3d),
        dets2d_per_view=tuple(tuple(v) for v in dets2d),
        provenance2d=tuple(tuple(v) for v in prov2d),
        labels=spec.labels,
    )
