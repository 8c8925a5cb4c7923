"""Cascade fusion: turn unmatched 2D detections into new 3D detections.

Each unmatched 2D box (or epipolar-paired stereo box pair) selects the
LiDAR points inside its viewing frustum, a pluggable localizer fits a 3D
box to those points, and the result is confirmed only if its projection
overlaps the source 2D box strongly enough. Confirmed detections inherit
the RGB class and a confidence down-weighted by that projection overlap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    Box2D,
    Box3D,
    CalibrationSet,
    Detection2D,
    Detection3D,
    FrameInput,
    PipelineConfig,
    PointCloud,
)
from .errors import MissingMask, ValidationError
from .geometry import (
    fundamental_matrix,
    epipolar_line,
    iou_2d,
    point_line_distance,
    project_box3d,
    project_points,
)
from .matching import MatchSet, solve_assignment

logger = logging.getLogger(__name__)

# A localizer maps (frustum, prior dims) to (box, score) or None (no object).
Localizer = Callable[["FrustumProposal", Optional[tuple]], Optional[tuple]]


@dataclass(frozen=True, eq=False)
class FrustumProposal:
    """LiDAR points selected by one 2D detection (or a stereo pair of them).

    `xyzr` holds the selected points, `weights` the per-point Gaussian mask
    value (product over views for stereo), `mask_flags` the instance-mask
    indicator channel, and `point_indices` the rows of the source cloud.
    """

    sources: tuple[tuple[int, int], ...]
    enlarged_boxes: tuple[Box2D, ...]
    xyzr: np.ndarray
    weights: np.ndarray
    mask_flags: np.ndarray
    point_indices: np.ndarray

    def __post_init__(self):
        for name in ("xyzr", "weights", "mask_flags", "point_indices"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def xyz(self) -> np.ndarray:
        return self.xyzr[:, :3]

    def __len__(self) -> int:
        return self.xyzr.shape[0]


@dataclass(frozen=True)
class RecoveredDetection:
    """A confirmed recovery: new 3D detection plus its RGB provenance."""

    det3d: Detection3D
    sources: tuple[tuple[int, int], ...]
    projection_ious: tuple[float, ...]
    localizer_score: float


def enlarge_box2d(box: Box2D, factor: float, image_size: tuple) -> Box2D:
    """Scale a box about its fixed center, then clamp to the image bounds."""
    cx, cy = box.center
    half_w = 0.5 * box.width * factor
    half_h = 0.5 * box.height * factor
    width, height = image_size
    return Box2D(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(float(width), cx + half_w),
        min(float(height), cy + half_h),
    )


def gaussian_mask(pixel, center, size):
    """Gaussian attention weight of a projected point relative to its 2D box.

    exp(-(x-x0)^2 / (2 w^2) - (y-y0)^2 / (2 h^2)) with (x0, y0) the box
    center and (w, h) the full box width and height. Accepts arrays.
    """
    x = np.asarray(pixel[0], dtype=np.float64)
    y = np.asarray(pixel[1], dtype=np.float64)
    x0, y0 = center
    w, h = size
    return np.exp(-((x - x0) ** 2) / (2.0 * w * w) - ((y - y0) ** 2) / (2.0 * h * h))


def _view_selection(
    cloud: PointCloud,
    calib: CalibrationSet,
    view: int,
    det2d: Detection2D,
    config: PipelineConfig,
    projection_cache: Optional[dict] = None,
):
    """Per-view point membership, Gaussian weights, mask flags, enlarged box.

    `projection_cache` maps view index to the cloud's (pixels, depths) so a
    frame's cloud is projected once per view across all its frustums.
    """
    cam = calib.cameras[view]
    box = det2d.box
    enlarged = enlarge_box2d(box, config.enlargement, (cam.width, cam.height))
    if projection_cache is not None and view in projection_cache:
        pix, depth = projection_cache[view]
    else:
        pix, depth = project_points(cloud.xyz, calib.lidar_to_cam, cam)
        if projection_cache is not None:
            projection_cache[view] = (pix, depth)
    front = depth > config.behind_camera_depth
    u, v = pix[:, 0], pix[:, 1]
    in_box = (
        front
        & (u >= enlarged.x_min) & (u <= enlarged.x_max)
        & (v >= enlarged.y_min) & (v <= enlarged.y_max)
    )

    mode = config.frustum_mode
    if mode in ("mask", "bbox+mask"):
        if det2d.mask is None:
            raise MissingMask(f"frustum mode {mode!r} requires an instance mask")
        # Every proposal point must sit inside the (image-clamped) enlarged
        # box, so the mask test intersects with the box test.
        in_mask = in_box & det2d.mask.contains(u, v, box)
    else:
        in_mask = in_box

    selected = in_mask if mode == "mask" else in_box
    flags = in_mask if mode == "bbox+mask" else np.ones(len(cloud), dtype=bool)
    weights = gaussian_mask((u, v), box.center, (box.width, box.height))
    return selected, weights, flags, enlarged


def _build_proposal(cloud, sources, boxes, selected, weights, flags):
    idx = np.flatnonzero(selected)
    return FrustumProposal(
        sources=tuple(sources),
        enlarged_boxes=tuple(boxes),
        xyzr=cloud.xyzr[idx],
        weights=np.clip(weights[idx], 0.0, 1.0),
        mask_flags=flags[idx].astype(bool),
        point_indices=idx,
    )


def extract_frustum(
    cloud: PointCloud,
    calib: CalibrationSet,
    view: int,
    det2d: Detection2D,
    config: PipelineConfig,
    det2d_index: int = -1,
    projection_cache: Optional[dict] = None,
) -> Optional[FrustumProposal]:
    """Frustum proposal of one 2D detection; None when too sparse (< p_min)."""
    selected, weights, flags, enlarged = _view_selection(
        cloud, calib, view, det2d, config, projection_cache
    )
    if int(selected.sum()) < config.p_min:
        return None
    return _build_proposal(
        cloud, [(view, det2d_index)], [enlarged], selected, weights, flags
    )


def intersect_frustums(
    cloud: PointCloud,
    calib: CalibrationSet,
    left_view: int,
    left_det: Detection2D,
    right_view: int,
    right_det: Detection2D,
    config: PipelineConfig,
    left_index: int = -1,
    right_index: int = -1,
    projection_cache: Optional[dict] = None,
) -> Optional[FrustumProposal]:
    """Points inside both single-view frustums of an epipolar-matched pair.

    Gaussian weights multiply across the two views; mask flags are the
    conjunction. None when the intersection is too sparse.
    """
    sel_l, w_l, f_l, box_l = _view_selection(
        cloud, calib, left_view, left_det, config, projection_cache
    )
    sel_r, w_r, f_r, box_r = _view_selection(
        cloud, calib, right_view, right_det, config, projection_cache
    )
    selected = sel_l & sel_r
    if int(selected.sum()) < config.p_min:
        return None
    return _build_proposal(
        cloud,
        [(left_view, left_index), (right_view, right_index)],
        [box_l, box_r],
        selected,
        w_l * w_r,
        f_l & f_r,
    )


def epipolar_assign(
    unmatched_left: Sequence[Detection2D],
    unmatched_right: Sequence[Detection2D],
    F,
    gate_px: float = 20.0,
) -> list:
    """Pair left/right boxes by summed corner-to-epipolar-line distance.

    The cost of a candidate pair is the distance from the right box's
    top-left and bottom-right corners to the epipolar lines of the left
    box's same corners. A minimum-cost maximum-cardinality assignment is
    solved and pairs costing more than `gate_px` in total are dropped.
    """
    if not unmatched_left or not unmatched_right:
        return []
    cost = np.zeros((len(unmatched_left), len(unmatched_right)))
    lines = [
        tuple(epipolar_line(F, corner) for corner in det.box.corners())
        for det in unmatched_left
    ]
    for j, det_r in enumerate(unmatched_right):
        c1, c2 = det_r.box.corners()
        for i, (l1, l2) in enumerate(lines):
            cost[i, j] = point_line_distance(l1, c1) + point_line_distance(l2, c2)
    result = solve_assignment(cost, maximize=False)
    return [(i, j) for i, j in result.pairs if cost[i, j] <= gate_px]


def localize_geometric(
    frustum: FrustumProposal,
    prior_dims: Optional[tuple],
    *,
    p_min: int = 10,
    ground_band: float = 0.15,
    range_bin: float = 0.5,
    prior_blend: float = 0.5,
    mask_boost: float = 2.0,
) -> Optional[tuple]:
    """Deterministic baseline localizer: fit a box to the frustum points.

    Steps: drop the ground band near the 5th height percentile; keep the
    contiguous depth slab around the weighted range mode (weights are the
    Gaussian mask, doubled for in-mask points); take yaw from the principal
    axis of the BEV scatter; blend min/max extents with the class prior
    dims. The score is the fraction of frustum points kept. Returns None
    when fewer than p_min points survive.
    """
    total = len(frustum)
    if total < p_min:
        return None
    xyz = frustum.xyz
    weights = frustum.weights * np.where(frustum.mask_flags, mask_boost, 1.0)

    z5 = np.percentile(xyz[:, 2], 5.0)
    above = xyz[:, 2] > z5 + ground_band
    if int(above.sum()) < p_min:
        return None
    pts = xyz[above]
    wts = weights[above]

    centroid = np.average(pts[:, :2], axis=0, weights=wts)
    norm = float(np.hypot(centroid[0], centroid[1]))
    axis = centroid / norm if norm > 1e-9 else np.array([1.0, 0.0])
    ranges = pts[:, :2] @ axis
    bins = np.floor((ranges - ranges.min()) / range_bin).astype(np.int64)
    hist = np.bincount(bins, weights=wts)
    mode = int(hist.argmax())
    lo = mode
    while lo > 0 and hist[lo - 1] > 0.0:
        lo -= 1
    hi = mode
    while hi + 1 < hist.size and hist[hi + 1] > 0.0:
        hi += 1
    slab = (bins >= lo) & (bins <= hi)
    if int(slab.sum()) < p_min:
        return None
    pts = pts[slab]
    wts = wts[slab]

    mean_xy = np.average(pts[:, :2], axis=0, weights=wts)
    centered = pts[:, :2] - mean_xy
    cov = (wts[:, None] * centered).T @ centered / wts.sum()
    eigvals, eigvecs = np.linalg.eigh(cov)
    principal = eigvecs[:, int(eigvals.argmax())]
    yaw = math.atan2(principal[1], principal[0])

    u = np.array([math.cos(yaw), math.sin(yaw)])
    v = np.array([-u[1], u[0]])
    su = pts[:, :2] @ u
    sv = pts[:, :2] @ v
    l_obs = float(su.max() - su.min())
    w_obs = float(sv.max() - sv.min())
    h_obs = float(pts[:, 2].max() - pts[:, 2].min())
    if prior_dims is not None:
        pl, ph, pw = prior_dims
        l = prior_blend * l_obs + (1.0 - prior_blend) * pl
        h = prior_blend * h_obs + (1.0 - prior_blend) * ph
        w = prior_blend * w_obs + (1.0 - prior_blend) * pw
    else:
        l, h, w = l_obs, h_obs, w_obs
    l, h, w = (max(d, 0.1) for d in (l, h, w))

    cu = 0.5 * float(su.max() + su.min())
    cv = 0.5 * float(sv.max() + sv.min())
    cx, cy = cu * u + cv * v
    # Anchor vertically at the observed top: the top edge is visible whenever
    # any face is, while the bottom is eroded by ground removal.
    cz = float(pts[:, 2].max()) - 0.5 * h
    score = slab.sum() / total if total else 0.0
    box = Box3D(float(cx), float(cy), cz, l, h, w, yaw)
    return box, float(min(1.0, max(0.0, score)))


@dataclass(frozen=True)
class GeometricLocalizer:
    """Config-bound wrapper making `localize_geometric` a Localizer."""

    p_min: int = 10
    ground_band: float = 0.15
    range_bin: float = 0.5
    prior_blend: float = 0.5
    mask_boost: float = 2.0

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "GeometricLocalizer":
        return cls(
            p_min=config.p_min,
            ground_band=config.ground_band,
            range_bin=config.range_bin,
            prior_blend=config.prior_blend,
            mask_boost=config.mask_boost,
        )

    def __call__(self, frustum: FrustumProposal, prior_dims: Optional[tuple]):
        return localize_geometric(
            frustum,
            prior_dims,
            p_min=self.p_min,
            ground_band=self.ground_band,
            range_bin=self.range_bin,
            prior_blend=self.prior_blend,
            mask_boost=self.mask_boost,
        )


LOCALIZERS: dict = {"geometric": GeometricLocalizer.from_config}


def get_localizer(config: PipelineConfig) -> Localizer:
    """Look up the configured localizer in the registry."""
    try:
        factory = LOCALIZERS[config.localizer]
    except KeyError:
        raise KeyError(
            f"unknown localizer {config.localizer!r}; registered: {sorted(LOCALIZERS)}"
        ) from None
    return factory(config)


def confirm_recovery(
    box3d: Box3D,
    localizer_score: float,
    sources: Sequence[tuple],
    calib: CalibrationSet,
    tau_d: float,
    min_depth: float = 0.1,
) -> Optional[RecoveredDetection]:
    """Gate a localized box by its projection overlap with the source 2D box.

    `sources` holds one or two (view, det2d_index, Detection2D) triples.
    Single view: score = s2d * IoU, confirmed iff IoU > tau_d (strict).
    Stereo: score = s_best * IoU_l * IoU_r with s_best the more confident 2D
    score, confirmed iff min(IoU_l, IoU_r) >= tau_d. The recovered detection
    inherits the (most confident) RGB class.
    """
    ious = []
    for view, _, det in sources:
        proj = project_box3d(box3d, calib.lidar_to_cam, calib.cameras[view], min_depth)
        ious.append(0.0 if proj is None else iou_2d(proj.box2d, det.box))

    if len(sources) == 1:
        if not ious[0] > tau_d:
            return None
        det = sources[0][2]
        score = det.score * ious[0]
        label = det.label
    else:
        if min(ious) < tau_d:
            return None
        best = max(sources, key=lambda s: s[2].score)[2]
        score = best.score
        for iou in ious:
            score *= iou
        label = best.label

    return RecoveredDetection(
        det3d=Detection3D(box3d, min(1.0, max(0.0, score)), label),
        sources=tuple((view, idx) for view, idx, _ in sources),
        projection_ious=tuple(ious),
        localizer_score=float(localizer_score),
    )


def _stereo_views(calib: CalibrationSet):
    for pair in calib.stereo_pairs:
        K_l = calib.cameras[pair.left].K
        K_r = calib.cameras[pair.right].K
        if K_l is None or K_r is None:
            raise ValidationError(
                f"stereo pair ({pair.left}, {pair.right}) needs camera intrinsics K"
            )
        yield pair, fundamental_matrix(K_l, K_r, pair.R, pair.t)


def recover(
    match_set: MatchSet,
    frame: FrameInput,
    localizer: Localizer,
    config: PipelineConfig,
) -> list:
    """Run detection recovery over the unmatched 2D detections of a frame.

    Single/multi view: one frustum per unmatched detection per view. Stereo:
    unmatched left/right sets are paired by epipolar distance first, each
    pair yields one intersected frustum, and boxes left unpaired are treated
    as RGB false positives. Per-item failures are logged and skipped.
    """
    out = []
    cloud, calib = frame.cloud, frame.calib
    cache: dict = {}

    def _run(frustum, prior_dims, sources):
        if frustum is None:
            return
        located = localizer(frustum, prior_dims)
        if located is None:
            return
        box, loc_score = located
        confirmed = confirm_recovery(
            box, loc_score, sources, calib, config.tau_d, config.behind_camera_depth
        )
        if confirmed is not None:
            out.append(confirmed)

    if config.stereo_enabled and calib.stereo_pairs:
        for pair, F in _stereo_views(calib):
            left_ids = match_set.unmatched_2d[pair.left]
            right_ids = match_set.unmatched_2d[pair.right]
            lefts = [frame.dets2d_per_view[pair.left][i] for i in left_ids]
            rights = [frame.dets2d_per_view[pair.right][i] for i in right_ids]
            for li, ri in epipolar_assign(lefts, rights, F, config.epipolar_gate_px):
                det_l, det_r = lefts[li], rights[ri]
                try:
                    frustum = intersect_frustums(
                        cloud, calib, pair.left, det_l, pair.right, det_r, config,
                        left_ids[li], right_ids[ri], cache,
                    )
                except (MissingMask, ValidationError) as exc:
                    logger.warning("skipping stereo frustum %s/%s: %s",
                                   left_ids[li], right_ids[ri], exc)
                    continue
                best = det_l if det_l.score >= det_r.score else det_r
                _run(
                    frustum,
                    best.label.dim_prior,
                    [
                        (pair.left, left_ids[li], det_l),
                        (pair.right, right_ids[ri], det_r),
                    ],
                )
        return out

    for view, unmatched in enumerate(match_set.unmatched_2d):
        for idx in unmatched:
            det = frame.dets2d_per_view[view][idx]
            try:
                frustum = extract_frustum(cloud, calib, view, det, config, idx, cache)
            except (MissingMask, ValidationError) as exc:
                logger.warning("skipping frustum view=%d det=%d: %s", view, idx, exc)
                continue
            _run(frustum, det.label.dim_prior, [(view, idx, det)])
    return out
