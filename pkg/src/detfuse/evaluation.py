"""Figures of merit: IoU-threshold 3D AP plus translation/scale/orientation
errors and the composite detection score aggregating them.

Matching is greedy in descending confidence and class-respecting; each
ground-truth box is consumed at most once. AP uses 40-point recall
interpolation by default (11-point and all-point are available).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Box3D, ClassLabel, LabelSet
from .geometry import box3d_params, iou_3d_matrix

# Classes measured at the stricter overlap threshold by default.
LARGE_VEHICLE_CLASSES = frozenset({"car", "truck", "bus", "trailer", "van"})


@dataclass(frozen=True)
class GroundTruthBox:
    """One annotated object; the difficulty tag is pass-through metadata."""

    box: Box3D
    label: ClassLabel
    difficulty: Optional[str] = None


@dataclass(frozen=True)
class GroundTruthFrame:
    boxes: tuple[GroundTruthBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class MatchCriterion:
    """TP criterion: 3D IoU >= threshold, or BEV center distance <= threshold.

    `per_class` overrides the default threshold by class name; with kind
    "iou3d" and no explicit threshold, large-vehicle classes default to 0.7
    and everything else to 0.5.
    """

    kind: str = "iou3d"
    threshold: Optional[float] = None
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("iou3d", "center"):
            raise ValueError(f"criterion kind must be iou3d or center, got {self.kind!r}")

    def threshold_for(self, label: ClassLabel) -> float:
        if label.name in self.per_class:
            return self.per_class[label.name]
        if self.threshold is not None:
            return self.threshold
        if self.kind == "center":
            return 2.0
        return 0.7 if label.name in LARGE_VEHICLE_CLASSES else 0.5

    def describe(self) -> str:
        base = self.threshold if self.threshold is not None else "per-class"
        return f"{self.kind}:{base}"


@dataclass(frozen=True)
class FrameLabeling:
    """Per-frame TP/FP labeling produced by match_to_gt."""

    tp: tuple[bool, ...]
    matched_gt: tuple[int, ...]   # GT index per detection, -1 for FP
    num_gt: int


def _bev_center_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def match_to_gt(dets: Sequence, gt: GroundTruthFrame,
                criterion: MatchCriterion = MatchCriterion()) -> FrameLabeling:
    """Label detections TP/FP against one frame's ground truth.

    Detections are visited in descending score (ties: input order); each is
    matched to the best still-free ground-truth box of its own class, and
    counts as TP only if the criterion threshold passes.
    """
    n, m = len(dets), len(gt)
    if n == 0 or m == 0:
        return FrameLabeling((False,) * n, (-1,) * n, m)

    det_params = box3d_params([d.box for d in dets])
    gt_params = box3d_params([g.box for g in gt.boxes])
    if criterion.kind == "iou3d":
        values = iou_3d_matrix(det_params, gt_params)
        higher_better = True
    else:
        values = np.hypot(
            det_params[:, 0:1] - gt_params[None, :, 0],
            det_params[:, 1:2] - gt_params[None, :, 1],
        )
        higher_better = False

    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    taken = [False] * m
    tp = [False] * n
    matched = [-1] * n
    for i in order:
        det = dets[i]
        best_j = -1
        best_val = None
        for j, ann in enumerate(gt.boxes):
            if taken[j] or ann.label.id != det.label.id:
                continue
            val = float(values[i, j])
            if best_val is None or (val > best_val if higher_better else val < best_val):
                best_val, best_j = val, j
        if best_j < 0:
            continue
        thr = criterion.threshold_for(det.label)
        ok = best_val >= thr if higher_better else best_val <= thr
        if ok:
            tp[i] = True
            matched[i] = best_j
            taken[best_j] = True
    return FrameLabeling(tuple(tp), tuple(matched), m)


def precision_recall_curve(scores, tp_flags, num_gt):
    """Cumulative precision/recall in descending score order."""
    scores = np.asarray(scores, dtype=np.float64)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / num_gt if num_gt > 0 else np.zeros_like(tp, dtype=np.float64)
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def average_precision(scores, tp_flags, num_gt, interpolation: str = "40") -> float:
    """Interpolated AP over one class pooled across frames.

    interpolation: "40" (recall points 1/40..1), "11" (0, 0.1, .., 1.0) or
    "all" (area under the precision envelope).
    """
    if num_gt <= 0:
        return 0.0
    if len(scores) == 0:
        return 0.0
    recall, precision = precision_recall_curve(scores, tp_flags, num_gt)
    if interpolation == "40":
        points = np.linspace(1.0 / 40.0, 1.0, 40)
    elif interpolation == "11":
        points = np.linspace(0.0, 1.0, 11)
    elif interpolation == "all":
        env = np.maximum.accumulate(precision[::-1])[::-1]
        prev_r = 0.0
        area = 0.0
        for r, p in zip(recall, env):
            area += (r - prev_r) * p
            prev_r = r
        return float(area)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    interped = [
        float(precision[recall >= r].max()) if np.any(recall >= r) else 0.0
        for r in points
    ]
    return float(np.mean(interped))


def scale_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two boxes after aligning centers and orientations."""
    inter = min(a.l, b.l) * min(a.h, b.h) * min(a.w, b.w)
    return inter / (a.volume() + b.volume() - inter)


def yaw_error(a: float, b: float) -> float:
    """Absolute orientation difference wrapped into [0, pi]."""
    d = abs(a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def tp_errors(pairs: Sequence[tuple]) -> tuple:
    """(mATE, mASE, mAOE) over matched (detected box, ground-truth box) pairs.

    With no pairs each error reports 1.0, the clamp value of the composite
    score.
    """
    if not pairs:
        return (1.0, 1.0, 1.0)
    ate = float(np.mean([_bev_center_distance(d, g) for d, g in pairs]))
    ase = float(np.mean([1.0 - scale_iou(d, g) for d, g in pairs]))
    aoe = float(np.mean([yaw_error(d.yaw, g.yaw) for d, g in pairs]))
    return (ate, ase, aoe)


def nds_star(m_ap: float, m_ate: float, m_ase: float, m_aoe: float) -> float:
    """Composite score: (3 mAP + sum(1 - min(1, err))) / 6."""
    total = 3.0 * m_ap
    for err in (m_ate, m_ase, m_aoe):
        total += 1.0 - min(1.0, err)
    return total / 6.0


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics over a set of frames."""

    per_class_ap: dict
    mean_ap: float
    m_ate: float
    m_ase: float
    m_aoe: float
    nds: float
    pr_curves: dict            # class name -> (recall array, precision array)
    criterion: str
    num_gt: dict               # class name -> ground-truth count
    num_detections: int

    def as_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "per_class_ap": dict(self.per_class_ap),
            "mAP": self.mean_ap,
            "mATE": self.m_ate,
            "mASE": self.m_ase,
            "mAOE": self.m_aoe,
            "NDS*": self.nds,
            "num_gt": dict(self.num_gt),
            "num_detections": self.num_detections,
            "pr_curves": {
                name: [[float(r), float(p)] for r, p in zip(rec, prec)]
                for name, (rec, prec) in self.pr_curves.items()
            },
        }


def evaluate_frames(
    detections_per_frame: Sequence[Sequence],
    gt_per_frame: Sequence[GroundTruthFrame],
    labels: LabelSet,
    criterion: MatchCriterion = MatchCriterion(),
    interpolation: str = "40",
    difficulty: Optional[str] = None,
) -> EvalReport:
    """Pool detections over frames and compute AP, TP errors and the
    composite score. Classes without any ground truth are skipped in mAP.
    An optional difficulty tag restricts the ground truth to that tag."""
    if len(detections_per_frame) != len(gt_per_frame):
        raise ValueError("detections and ground truth must have the same frame count")

    by_class_scores: dict = {c.name: [] for c in labels}
    by_class_tp: dict = {c.name: [] for c in labels}
    num_gt = {c.name: 0 for c in labels}
    matched_pairs = []
    total_dets = 0

    for dets, gt in zip(detections_per_frame, gt_per_frame):
        if difficulty is not None:
            gt = GroundTruthFrame(
                tuple(b for b in gt.boxes if b.difficulty == difficulty)
            )
        labeling = match_to_gt(dets, gt, criterion)
        total_dets += len(dets)
        for ann in gt.boxes:
            num_gt[ann.label.name] += 1
        for i, det in enumerate(dets):
            by_class_scores[det.label.name].append(det.score)
            by_class_tp[det.label.name].append(labeling.tp[i])
            if labeling.tp[i]:
                matched_pairs.append((det.box, gt.boxes[labeling.matched_gt[i]].box))

    per_class_ap = {}
    for cls in labels:
        if num_gt[cls.name] == 0:
            continue
        per_class_ap[cls.name] = average_precision(
            by_class_scores[cls.name], by_class_tp[cls.name], num_gt[cls.name],
            interpolation,
        )
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    m_ate, m_ase, m_aoe = tp_errors(matched_pairs)

    pr_curves = {}
    for cls in labels:
        if num_gt[cls.name] == 0:
            continue
        rec, prec = precision_recall_curve(
            by_class_scores[cls.name], by_class_tp[cls.name], num_gt[cls.name]
        )
        pr_curves[cls.name] = (rec, prec)

    return EvalReport(
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        m_ate=m_ate,
        m_ase=m_ase,
        m_aoe=m_aoe,
        nds=nds_star(mean_ap, m_ate, m_ase, m_aoe),
        pr_curves=pr_curves,
        criterion=criterion.describe(),
        num_gt=num_gt,
        num_detections=total_dets,
    )


def precision_at_threshold(dets, labelings, threshold: float) -> Optional[float]:
    """Pooled precision of detections scoring at least `threshold`.

    `dets` and `labelings` are parallel per-frame sequences. None when no
    detection clears the threshold.
    """
    tp = 0
    total = 0
    for frame_dets, labeling in zip(dets, labelings):
        for i, det in enumerate(frame_dets):
            if det.score >= threshold:
                total += 1
                tp += bool(labeling.tp[i])
    if total == 0:
        return None
    return tp / total


def recall_of(labelings) -> float:
    """Pooled recall over per-frame labelings."""
    tp = sum(sum(l.tp) for l in labelings)
    gt = sum(l.num_gt for l in labelings)
    return tp / gt if gt else 0.0
