"""Late fusion: assign projected 3D clusters to 2D detections per view.

The cluster/2D score is the maximum axis-aligned IoU between any member's
projected footprint and the 2D box. A maximum-cardinality optimal
assignment is solved per view, pairs at or below tau_b are dropped, and
each surviving cluster is collapsed to its highest-scoring member
(cluster-wise NMS). In the multi-view and stereo settings a cluster is
confirmed when it is matched in at least one view.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import Cluster
from .core import Box2D, CalibrationSet, Detection2D, Detection3D
from .geometry import ProjectedBox, box3d_params, iou_2d, iou_2d_matrix, project_boxes


@dataclass(frozen=True)
class AssignmentResult:
    """Solution of a rectangular linear sum assignment."""

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


@dataclass(frozen=True)
class ViewLink:
    """One confirmed cluster/2D association in a single view."""

    view: int
    det2d_index: int
    iou: float


@dataclass(frozen=True)
class MatchedDetection:
    """A kept 3D detection with its RGB associations (at most one per view)."""

    det3d_index: int
    links: tuple[ViewLink, ...]

    def __post_init__(self):
        if not self.links:
            raise ValueError("MatchedDetection requires at least one view link")
        views = [l.view for l in self.links]
        if len(set(views)) != len(views):
            raise ValueError("MatchedDetection links must come from distinct views")


@dataclass(frozen=True)
class MatchSet:
    """Outcome of matching one frame: kept, unmatched-2D and discarded-3D."""

    matched: tuple[MatchedDetection, ...]
    unmatched_2d: tuple[tuple[int, ...], ...]
    discarded_3d: tuple[int, ...]

    def __post_init__(self):
        kept = [m.det3d_index for m in self.matched]
        if len(set(kept)) != len(kept):
            raise ValueError("a 3D detection may appear in at most one matched entry")
        if set(kept) & set(self.discarded_3d):
            raise ValueError("matched and discarded 3D sets must be disjoint")


def solve_assignment(score_matrix, maximize: bool = False) -> AssignmentResult:
    """Optimal maximum-cardinality assignment on a rectangular matrix.

    Wraps scipy's Jonker-Volgenant-style solver; an empty matrix yields an
    empty result. Every row and column is used at most once and exactly
    min(rows, cols) pairs are returned.
    """
    m = np.asarray(score_matrix, dtype=np.float64)
    if m.ndim != 2:
        m = m.reshape(0, 0) if m.size == 0 else np.atleast_2d(m)
    if m.size == 0:
        return AssignmentResult((), 0.0)
    if not np.all(np.isfinite(m)):
        raise ValueError("assignment matrix must be finite")
    rows, cols = linear_sum_assignment(m, maximize=maximize)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    return AssignmentResult(pairs, float(m[rows, cols].sum()))


def cluster_image_iou(
    cluster: Cluster,
    projections: Sequence[Optional[ProjectedBox]],
    box2d: Box2D,
) -> float:
    """Max IoU between the cluster members' projections and one 2D box.

    `projections` is aligned with `cluster.members`; members behind the
    camera (None) contribute 0.
    """
    best = 0.0
    for proj in projections:
        if proj is None:
            continue
        best = max(best, iou_2d(proj.box2d, box2d))
    return best


def cluster_nms(cluster: Cluster, dets: Sequence[Detection3D]) -> int:
    """Index of the highest-scoring member; ties go to the lower index."""
    return max(cluster.members, key=lambda i: (dets[i].score, -i))


def _assign_view(
    clusters: Sequence[Cluster],
    dets3d: Sequence[Detection3D],
    dets2d: Sequence[Detection2D],
    calib: CalibrationSet,
    view: int,
    tau_b: float,
    min_depth: float,
):
    """Per-view matching core: surviving (cluster, det2d, iou) plus leftovers."""
    cam = calib.cameras[view]
    n3, n2 = len(dets3d), len(dets2d)
    if not clusters or n2 == 0:
        return [], tuple(range(n2))

    aabb, _, valid = project_boxes(box3d_params(dets3d), calib.lidar_to_cam, cam,
                                   min_depth)
    # Only projections overlapping the image rectangle can take part.
    on_image = (
        valid
        & (aabb[:, 0] < cam.width) & (aabb[:, 2] > 0.0)
        & (aabb[:, 1] < cam.height) & (aabb[:, 3] > 0.0)
    )
    boxes2d = np.array(
        [(d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max) for d in dets2d]
    )
    det_iou = iou_2d_matrix(aabb, boxes2d)
    det_iou[~on_image] = 0.0

    scores = np.zeros((len(clusters), n2))
    for c, cluster in enumerate(clusters):
        scores[c] = det_iou[list(cluster.members)].max(axis=0)

    result = solve_assignment(scores, maximize=True)
    survivors = [
        (c, m, float(scores[c, m])) for c, m in result.pairs if scores[c, m] > tau_b
    ]
    taken = {m for _, m, _ in survivors}
    unmatched = tuple(m for m in range(n2) if m not in taken)
    return survivors, unmatched


def match_single_view(
    clusters: Sequence[Cluster],
    dets3d: Sequence[Detection3D],
    dets2d: Sequence[Detection2D],
    calib: CalibrationSet,
    view: int,
    tau_b: float,
    min_depth: float = 0.1,
) -> MatchSet:
    """Match clusters against the 2D detections of one view.

    Matched clusters collapse to their best member; every other input
    detection lands in discarded_3d, so matched + discarded partition the
    detection index set.
    """
    survivors, unmatched = _assign_view(
        clusters, dets3d, dets2d, calib, view, tau_b, min_depth
    )
    matched = []
    kept = set()
    for c, m, iou in survivors:
        rep = cluster_nms(clusters[c], dets3d)
        matched.append(MatchedDetection(rep, (ViewLink(view, m, iou),)))
        kept.add(rep)
    discarded = tuple(i for i in range(len(dets3d)) if i not in kept)
    per_view = [()] * calib.num_views
    per_view[view] = unmatched
    return MatchSet(
        tuple(sorted(matched, key=lambda e: e.det3d_index)),
        tuple(per_view),
        discarded,
    )


def match_multi_view(
    clusters: Sequence[Cluster],
    dets3d: Sequence[Detection3D],
    dets2d_per_view: Sequence[Sequence[Detection2D]],
    calib: CalibrationSet,
    tau_b: float,
    min_depth: float = 0.1,
) -> MatchSet:
    """Match clusters against every view; confirm on any single-view match.

    A cluster unmatched in all views is discarded entirely; a confirmed
    cluster keeps up to one matched 2D detection per view (stereo semantic
    fusion consumes both).
    """
    links_per_cluster: dict = {}
    unmatched_per_view = []
    for view in range(calib.num_views):
        survivors, unmatched = _assign_view(
            clusters, dets3d, dets2d_per_view[view], calib, view, tau_b, min_depth
        )
        unmatched_per_view.append(unmatched)
        for c, m, iou in survivors:
            links_per_cluster.setdefault(c, []).append(ViewLink(view, m, iou))

    matched = []
    kept = set()
    for c in sorted(links_per_cluster):
        rep = cluster_nms(clusters[c], dets3d)
        matched.append(MatchedDetection(rep, tuple(links_per_cluster[c])))
        kept.add(rep)
    discarded = tuple(i for i in range(len(dets3d)) if i not in kept)
    return MatchSet(
        tuple(sorted(matched, key=lambda e: e.det3d_index)),
        tuple(unmatched_per_view),
        discarded,
    )
