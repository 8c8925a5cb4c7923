"""Semantic fusion and end-to-end frame orchestration.

Pipeline order: cluster the NMS-free LiDAR detections, match clusters to
2D detections per view, recover unmatched 2D detections through frustum
localization, then fuse semantics. Semantic fusion always takes the RGB
class; when LiDAR and RGB agree on the class, the confidence becomes a
two-hypothesis Bayes ensemble of both branch scores against the class
prior, otherwise the RGB confidence is kept as-is.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .clustering import cluster_detections
from .core import Box3D, ClassLabel, FrameInput, PipelineConfig, validate_frame
from .geometry import bev_params
from .geometry.backend import kernels
from .matching import MatchSet, cluster_nms, match_multi_view
from .recovery import Localizer, RecoveredDetection, get_localizer, recover

STAGES = ("matching", "recovery", "semantic")


class DegenerateScoreWarning(UserWarning):
    """A fusion input score sat exactly at 0 or 1 and was clamped."""


@dataclass(frozen=True)
class FusedDetection:
    """One final output detection with provenance back to its sources."""

    box: Box3D
    score: float
    label: ClassLabel
    provenance: str                      # matched | recovered | lidar
    det3d_index: int = -1
    sources: tuple[tuple[int, int], ...] = ()   # (view, det2d_index)


@dataclass(frozen=True)
class FusionEntry:
    """One element of the semantic-fusion input set (matched or recovered)."""

    box: Box3D
    score3d: float
    label3d: ClassLabel
    rgb: tuple[tuple[float, ClassLabel], ...]   # 1 or 2 (score, label) pairs
    provenance: str
    det3d_index: int = -1
    sources: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not self.rgb:
            raise ValueError("FusionEntry requires at least one RGB association")


@dataclass
class StageReport:
    """Per-stage wall time (ms) and object counts for one frame."""

    stage_ms: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def timing_rows(self) -> list:
        """Rows for the standard timing table."""
        return [
            ("Bounding Box Matching",
             self.stage_ms.get("clustering", 0.0) + self.stage_ms.get("matching", 0.0)),
            ("Detection Recovery", self.stage_ms.get("recovery", 0.0)),
            ("Semantic Fusion", self.stage_ms.get("semantic_fusion", 0.0)),
        ]


def _clamped(value: float, what: str) -> float:
    if value <= 0.0 or value >= 1.0:
        warnings.warn(
            f"{what} = {value} is degenerate; clamped into (0, 1)",
            DegenerateScoreWarning,
            stacklevel=3,
        )
    return float(min(1.0 - 1e-6, max(1e-6, value)))


def probabilistic_ensemble(s3d: float, scores2d, p_lambda: float) -> float:
    """Fuse branch confidences assuming conditional independence.

    The object hypothesis mass s3d * prod(s2d) / p is normalized against the
    complementary hypothesis (1-s3d) * prod(1-s2d) / (1-p), keeping the
    result inside (0, 1). Scores sitting exactly at 0 or 1 are clamped with
    a DegenerateScoreWarning.
    """
    if np.isscalar(scores2d):
        scores2d = [scores2d]
    s3d = _clamped(s3d, "3D score")
    p = _clamped(p_lambda, "class prior")
    q = s3d / p
    q_bar = (1.0 - s3d) / (1.0 - p)
    for s in scores2d:
        s = _clamped(s, "2D score")
        q *= s
        q_bar *= 1.0 - s
    return q / (q + q_bar)


def semantic_fusion(entries: Sequence[FusionEntry]) -> list:
    """Resolve class labels and fuse scores for matched and recovered entries.

    The output class is always the RGB class (the most confident RGB
    detection's class when two views matched). When that class agrees with
    the LiDAR class the score is the probabilistic ensemble over all RGB
    scores of that class; on disagreement the RGB confidence wins.
    """
    out = []
    for entry in entries:
        best_score, best_label = max(entry.rgb, key=lambda sl: sl[0])
        if best_label == entry.label3d:
            agreeing = [s for s, lab in entry.rgb if lab == best_label]
            score = probabilistic_ensemble(entry.score3d, agreeing, best_label.prior)
        else:
            score = best_score
        out.append(
            FusedDetection(
                box=entry.box,
                score=float(score),
                label=best_label,
                provenance=entry.provenance,
                det3d_index=entry.det3d_index,
                sources=entry.sources,
            )
        )
    return out


def fusion_inputs(
    frame: FrameInput,
    match_set: Optional[MatchSet],
    recovered: Sequence[RecoveredDetection],
) -> list:
    """Assemble the semantic-fusion input set from matching and recovery."""
    entries = []
    if match_set is not None:
        for m in match_set.matched:
            det = frame.dets3d[m.det3d_index]
            rgb = tuple(
                (
                    frame.dets2d_per_view[link.view][link.det2d_index].score,
                    frame.dets2d_per_view[link.view][link.det2d_index].label,
                )
                for link in m.links
            )
            entries.append(
                FusionEntry(
                    box=det.box,
                    score3d=det.score,
                    label3d=det.label,
                    rgb=rgb,
                    provenance="matched",
                    det3d_index=m.det3d_index,
                    sources=tuple((l.view, l.det2d_index) for l in m.links),
                )
            )
    for r in recovered:
        rgb = tuple(
            (
                frame.dets2d_per_view[view][idx].score,
                frame.dets2d_per_view[view][idx].label,
            )
            for view, idx in r.sources
        )
        entries.append(
            FusionEntry(
                box=r.det3d.box,
                score3d=r.det3d.score,
                label3d=r.det3d.label,
                rgb=rgb,
                provenance="recovered",
                sources=r.sources,
            )
        )
    return entries


def _unfused_outputs(frame, match_set, recovered) -> list:
    """Outputs with semantic fusion disabled: LiDAR semantics for matched
    entries, recovery semantics (RGB class, down-weighted score) for
    recovered ones."""
    out = [
        FusedDetection(
            box=frame.dets3d[m.det3d_index].box,
            score=frame.dets3d[m.det3d_index].score,
            label=frame.dets3d[m.det3d_index].label,
            provenance="matched",
            det3d_index=m.det3d_index,
            sources=tuple((l.view, l.det2d_index) for l in m.links),
        )
        for m in match_set.matched
    ]
    out.extend(
        FusedDetection(
            box=r.det3d.box,
            score=r.det3d.score,
            label=r.det3d.label,
            provenance="recovered",
            sources=r.sources,
        )
        for r in recovered
    )
    return out


def _baseline_outputs(frame, clusters) -> list:
    """Duplicate-collapsed LiDAR pass-through (matching stage disabled)."""
    return [
        FusedDetection(
            box=frame.dets3d[rep].box,
            score=frame.dets3d[rep].score,
            label=frame.dets3d[rep].label,
            provenance="lidar",
            det3d_index=rep,
        )
        for rep in (cluster_nms(c, frame.dets3d) for c in clusters)
    ]


def final_bev_nms(detections: Sequence[FusedDetection], iou_threshold: float) -> list:
    """Greedy BEV NMS over the final output (optional dedup stage)."""
    if len(detections) < 2:
        return list(detections)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    params = bev_params([detections[i].box for i in order])
    iou = kernels.iou_bev_matrix(params, params)
    kept: list = []
    for pos in range(len(order)):
        if all(iou[pos, other] <= iou_threshold for other in kept):
            kept.append(pos)
    kept_indices = sorted(order[pos] for pos in kept)
    return [detections[i] for i in kept_indices]


def run_pipeline(
    frame: FrameInput,
    config: Optional[PipelineConfig] = None,
    localizer: Optional[Localizer] = None,
    ablate: frozenset = frozenset(),
):
    """Run clustering, matching, recovery and semantic fusion on one frame.

    `ablate` names stages to disable ("matching", "recovery", "semantic").
    With matching disabled the LiDAR branch passes through duplicate
    collapsing only and every 2D detection counts as unmatched (pure
    cascade recovery). Returns (detections, StageReport).
    """
    config = config or PipelineConfig()
    unknown = set(ablate) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown ablation stages {sorted(unknown)}")
    frame = validate_frame(frame, config)
    report = StageReport()

    t0 = time.perf_counter()
    clusters = cluster_detections(frame.dets3d, config.tau_z, config.clique_cap_factor)
    t1 = time.perf_counter()
    report.stage_ms["clustering"] = (t1 - t0) * 1e3
    report.counts["detections_3d"] = len(frame.dets3d)
    report.counts["clusters"] = len(clusters)

    match_set = None
    baseline = []
    if "matching" not in ablate:
        match_set = match_multi_view(
            clusters, frame.dets3d, frame.dets2d_per_view, frame.calib,
            config.tau_b, config.behind_camera_depth,
        )
    else:
        baseline = _baseline_outputs(frame, clusters)
        match_set = MatchSet(
            matched=(),
            unmatched_2d=tuple(
                tuple(range(len(v))) for v in frame.dets2d_per_view
            ),
            discarded_3d=(),
        )
    t2 = time.perf_counter()
    report.stage_ms["matching"] = (t2 - t1) * 1e3
    report.counts["matched"] = len(match_set.matched)
    report.counts["unmatched_2d"] = sum(len(v) for v in match_set.unmatched_2d)
    report.counts["discarded_3d"] = len(match_set.discarded_3d)

    recovered: list = []
    if "recovery" not in ablate:
        if localizer is None:
            localizer = get_localizer(config)
        recovered = recover(match_set, frame, localizer, config)
    t3 = time.perf_counter()
    report.stage_ms["recovery"] = (t3 - t2) * 1e3
    report.counts["recovered"] = len(recovered)

    if "semantic" not in ablate:
        fused = semantic_fusion(fusion_inputs(frame, match_set, recovered))
    else:
        fused = _unfused_outputs(frame, match_set, recovered)
    output = baseline + fused
    if config.final_nms is not None:
        output = final_bev_nms(output, config.final_nms)
    t4 = time.perf_counter()
    report.stage_ms["semantic_fusion"] = (t4 - t3) * 1e3
    report.counts["output"] = len(output)
    return output, report


ABLATION_CONFIGS = {
    "baseline": frozenset({"matching", "recovery", "semantic"}),
    "matching": frozenset({"recovery", "semantic"}),
    "matching+recovery": frozenset({"semantic"}),
    "full": frozenset(),
}


def run_ablation_grid(
    frame: FrameInput,
    config: Optional[PipelineConfig] = None,
    localizer: Optional[Localizer] = None,
) -> dict:
    """All four stage combinations of one frame, sharing the heavy stages.

    Clustering, matching and recovery run once; the four outputs mirror
    run_pipeline under the corresponding ABLATION_CONFIGS entries.
    """
    config = config or PipelineConfig()
    if localizer is None:
        localizer = get_localizer(config)
    frame = validate_frame(frame, config)
    clusters = cluster_detections(frame.dets3d, config.tau_z, config.clique_cap_factor)
    match_set = match_multi_view(
        clusters, frame.dets3d, frame.dets2d_per_view, frame.calib,
        config.tau_b, config.behind_camera_depth,
    )
    recovered = recover(match_set, frame, localizer, config)
    outputs = {
        "baseline": _baseline_outputs(frame, clusters),
        "matching": _unfused_outputs(frame, match_set, ()),
        "matching+recovery": _unfused_outputs(frame, match_set, recovered),
        "full": semantic_fusion(fusion_inputs(frame, match_set, recovered)),
    }
    if config.final_nms is not None:
        outputs = {k: final_bev_nms(v, config.final_nms) for k, v in outputs.items()}
    return outputs
