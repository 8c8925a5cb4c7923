"""Acceptance suite: one test per release criterion, each printing a
pass/fail line (run with `pytest tests/test_acceptance.py -s` to see them
live). Expected values come from independent oracles: brute-force
enumeration for assignment and cliques, stratified Monte-Carlo for rotated
overlaps, synthetic-geometry ground truth for the epipolar and simulator
checks.
"""

import itertools
import math
import time

import numpy as np
import pytest

from detfuse.core import Box3D, Detection2D, LabelSet, PipelineConfig
from detfuse.clustering import OverlapGraph, maximal_cliques
from detfuse.evaluation import (
    MatchCriterion,
    average_precision,
    match_to_gt,
    nds_star,
)
from detfuse.geometry import (
    KERNEL_BACKEND,
    epipolar_line,
    fundamental_matrix,
    iou_3d,
    iou_bev,
    point_line_distance,
    project_box3d,
    project_points,
)
from detfuse.matching import solve_assignment
from detfuse.pipeline import run_ablation_grid, run_pipeline
from detfuse.recovery import (
    GeometricLocalizer,
    confirm_recovery,
    epipolar_assign,
    extract_frustum,
    gaussian_mask,
)
from detfuse.simulator import (
    CameraRigSpec,
    DetectorNoiseSpec,
    SceneSpec,
    ScoreModel,
    generate_scene,
    simulate_frame,
)

from conftest import mc_iou_3d, mc_iou_bev, random_box

LABELS = LabelSet.default()


def report(criterion: str, ok: bool, detail: str):
    print(f"\n[{criterion}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"{criterion}: {detail}"


# -- criterion 1 -----------------------------------------------------------


def _brute_force_total(matrix, maximize):
    rows, cols = matrix.shape
    best = None
    if rows <= cols:
        for perm in itertools.permutations(range(cols), rows):
            total = sum(matrix[r, c] for r, c in enumerate(perm))
            if best is None or (total > best if maximize else total < best):
                best = total
    else:
        for perm in itertools.permutations(range(rows), cols):
            total = sum(matrix[r, c] for c, r in enumerate(perm))
            if best is None or (total > best if maximize else total < best):
                best = total
    return best


def test_criterion_01_assignment_oracle():
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(1000):
        rows = int(rng.integers(1, 8))
        cols = int(rng.integers(1, 8))
        matrix = rng.uniform(-1.0, 1.0, size=(rows, cols))
        maximize = bool(trial % 2)
        result = solve_assignment(matrix, maximize=maximize)
        assert len(result.pairs) == min(rows, cols)
        assert len({r for r, _ in result.pairs}) == len(result.pairs)
        assert len({c for _, c in result.pairs}) == len(result.pairs)
        worst = max(worst, abs(result.total_cost
                               - _brute_force_total(matrix, maximize)))
    elapsed = time.perf_counter() - start
    report(
        "criterion 1: assignment oracle",
        worst < 1e-9 and elapsed < 5.0,
        f"1000 matrices, worst optimum gap {worst:.2e}, {elapsed:.2f}s",
    )


# -- criterion 2 -----------------------------------------------------------


def _bitmask_maximal_cliques(n, edges):
    adj = [0] * n
    for i, j in edges:
        adj[i] |= 1 << j
        adj[j] |= 1 << i
    out = []
    for subset in range(1, 1 << n):
        members = [v for v in range(n) if subset >> v & 1]
        if any((adj[v] & subset) != subset ^ (1 << v) for v in members):
            continue
        if any(
            u not in members and (adj[u] & subset) == subset
            for u in range(n)
        ):
            continue
        out.append(tuple(members))
    return sorted(out)


def test_criterion_02_clique_oracle():
    rng = np.random.default_rng(2002)
    start = time.perf_counter()
    for _ in range(500):
        n = int(rng.integers(1, 13))
        p = rng.uniform(0.1, 0.7)
        edges = [
            (i, j)
            for i in range(n) for j in range(i + 1, n)
            if rng.uniform() < p
        ]
        got = maximal_cliques(OverlapGraph(n, tuple(edges)), cap_factor=10**6)
        assert got == _bitmask_maximal_cliques(n, edges)
    elapsed = time.perf_counter() - start
    report(
        "criterion 2: clique oracle",
        elapsed < 10.0,
        f"500 graphs (n <= 12) match subset enumeration exactly, {elapsed:.2f}s",
    )


# -- criterion 3 -----------------------------------------------------------


def test_criterion_03_rotated_iou_monte_carlo():
    rng = np.random.default_rng(3003)
    start = time.perf_counter()
    worst_bev = worst_3d = 0.0
    for k in range(200):
        a = random_box(rng, span=3.0)
        if k % 2 == 0:
            b = Box3D(
                a.x + rng.uniform(-2, 2), a.y + rng.uniform(-2, 2),
                a.z + rng.uniform(-0.8, 0.8), rng.uniform(0.5, 5),
                rng.uniform(0.5, 3), rng.uniform(0.5, 5), rng.uniform(0, 6.28),
            )
        else:
            b = random_box(rng, span=3.0)
        worst_bev = max(worst_bev, abs(iou_bev(a, b) - mc_iou_bev(a, b, seed=k)))
        worst_3d = max(worst_3d, abs(iou_3d(a, b) - mc_iou_3d(a, b, seed=k)))
    elapsed = time.perf_counter() - start
    report(
        "criterion 3: rotated IoU vs Monte-Carlo",
        worst_bev < 2e-3 and worst_3d < 2e-3 and elapsed < 60.0,
        f"200 pairs x 1e6 samples: worst BEV {worst_bev:.1e}, "
        f"worst 3D {worst_3d:.1e}, {elapsed:.1f}s",
    )


# -- criterion 4 -----------------------------------------------------------


def test_criterion_04_stereo_epipolar_pairing():
    scene = SceneSpec(
        objects_min=2, objects_max=6,
        rig=CameraRigSpec(kind="stereo", baseline=0.54), labels=LABELS,
    )
    noiseless = DetectorNoiseSpec(
        fn_rate_3d=1.0, fp_rate_3d=0.0,
        fn_rate_2d=0.0, fp_rate_2d=0.0, corner_sigma=0.0,
    )
    mismatches = 0
    pair_count = 0
    worst_cost = 0.0
    worst_residual = 0.0
    for seed in range(100):
        sim = simulate_frame(scene, noiseless, seed)
        stereo = sim.calib.stereo_pairs[0]
        F = fundamental_matrix(
            sim.calib.cameras[0].K, sim.calib.cameras[1].K, stereo.R, stereo.t
        )
        lefts, rights = sim.dets2d_per_view
        prov_l, prov_r = sim.provenance2d
        expected = len(set(prov_l) & set(prov_r))
        pairs = epipolar_assign(list(lefts), list(rights), F, gate_px=20.0)
        if len(pairs) != expected:
            mismatches += 1
        for li, ri in pairs:
            pair_count += 1
            if prov_l[li] != prov_r[ri]:
                mismatches += 1
            cost = 0.0
            for corner_l, corner_r in zip(lefts[li].box.corners(),
                                          rights[ri].box.corners()):
                line = epipolar_line(F, corner_l)
                cost += point_line_distance(line, corner_r)
                residual = abs(
                    np.array([*corner_r, 1.0]) @ F.F @ np.array([*corner_l, 1.0])
                )
                worst_residual = max(worst_residual, residual)
            worst_cost = max(worst_cost, cost)
    report(
        "criterion 4: stereo epipolar pairing",
        mismatches == 0 and worst_cost < 1e-6 and worst_residual < 1e-9,
        f"100 scenes, {pair_count} pairs, {mismatches} mismatches, "
        f"worst cost {worst_cost:.1e} px, worst c'Fc {worst_residual:.1e}",
    )


# -- criterion 5 -----------------------------------------------------------

ABLATION_SCENE = SceneSpec(
    objects_min=3, objects_max=7, density=8000.0,
    ground_points=2000, clutter_points=150, labels=LABELS,
)
# Rates follow the ablation protocol (3D fp/fn 0.3 with 5 duplicates, 2D
# fn/fp 0.05). Spurious 3D scores are uniform so every score threshold has
# false positives to remove, and the 3D branch misclassifies 30% of objects
# so the semantic stage has label errors to repair; without those two the
# strict per-threshold comparisons would be vacuous ties.
ABLATION_NOISE = DetectorNoiseSpec(
    fn_rate_3d=0.3, fp_rate_3d=0.3, duplicates=5,
    fn_rate_2d=0.05, fp_rate_2d=0.05,
    score_fp_3d=ScoreModel("uniform", 0.05, 0.99),
    confusion_3d=0.3,
)
ABLATION_CONFIG_NAMES = ("baseline", "matching", "matching+recovery", "full")


def _ablation_seed_outcome(seed, n_frames=200):
    criterion = MatchCriterion("iou3d", 0.5)
    config = PipelineConfig()
    pooled = {c: {"scores": [], "tp": [], "gt": 0} for c in ABLATION_CONFIG_NAMES}
    for i in range(n_frames):
        sim = simulate_frame(ABLATION_SCENE, ABLATION_NOISE, seed * 100_000 + i)
        grid = run_ablation_grid(sim.frame_input(), config)
        for name in ABLATION_CONFIG_NAMES:
            labeling = match_to_gt(grid[name], sim.gt, criterion)
            pooled[name]["scores"].extend(d.score for d in grid[name])
            pooled[name]["tp"].extend(labeling.tp)
            pooled[name]["gt"] += labeling.num_gt

    stats = {}
    for name, data in pooled.items():
        scores = np.array(data["scores"])
        tp = np.array(data["tp"], dtype=bool)
        stats[name] = {
            "scores": scores,
            "tp": tp,
            "recall": tp.sum() / data["gt"],
            "ap": average_precision(scores, tp, data["gt"]),
        }

    def precision(name, threshold):
        mask = stats[name]["scores"] >= threshold
        if not mask.any():
            return None
        return stats[name]["tp"][mask].sum() / mask.sum()

    thresholds = np.round(np.linspace(0.1, 0.9, 9), 2)
    a = all(
        (precision("matching", t) is not None
         and precision("baseline", t) is not None
         and precision("matching", t) > precision("baseline", t))
        for t in thresholds
    )
    b = stats["matching+recovery"]["recall"] > stats["matching"]["recall"]
    c = all(
        stats["full"]["ap"] > stats[name]["ap"]
        for name in ABLATION_CONFIG_NAMES if name != "full"
    )
    return a, b, c, {name: stats[name]["ap"] for name in ABLATION_CONFIG_NAMES}


def test_criterion_05_ablation_grid():
    passes = {"a": 0, "b": 0, "c": 0, "all": 0}
    sample_aps = None
    for seed in range(100):
        a, b, c, aps = _ablation_seed_outcome(seed)
        passes["a"] += a
        passes["b"] += b
        passes["c"] += c
        passes["all"] += a and b and c
        if sample_aps is None:
            sample_aps = aps
    detail = (
        f"{passes['all']}/100 seeds pass all of: precision (a) {passes['a']}, "
        f"recall (b) {passes['b']}, best-AP (c) {passes['c']}; "
        "sample APs "
        + ", ".join(f"{k}={v:.3f}" for k, v in sample_aps.items())
    )
    report("criterion 5: ablation grid", passes["all"] >= 95, detail)


# -- criterion 6 -----------------------------------------------------------


def test_criterion_06_semantic_fusion_class_accuracy():
    scene = SceneSpec(objects_min=3, objects_max=7, density=8000.0,
                      ground_points=2000, clutter_points=100, labels=LABELS)
    noise = DetectorNoiseSpec(
        fn_rate_3d=0.2, fp_rate_3d=0.2, duplicates=3,
        confusion_3d=0.3,
        fn_rate_2d=0.0, fp_rate_2d=0.0, confusion_2d=0.0,
    )
    fused_total = fused_correct = 0
    rgb_total = rgb_correct = 0
    confused_inputs = 0
    config = PipelineConfig()
    for seed in range(50):
        sim = simulate_frame(scene, noise, seed)
        confused_inputs += sum(
            1 for det, p in zip(sim.dets3d, sim.provenance3d)
            if p is not None and det.label != sim.gt.boxes[p].label
        )
        gt_of_det2d = {}
        for dets, prov in zip(sim.dets2d_per_view, sim.provenance2d):
            for det, gt_idx in zip(dets, prov):
                gt_of_det2d[id(det)] = gt_idx
                if gt_idx is not None:
                    rgb_total += 1
                    rgb_correct += det.label == sim.gt.boxes[gt_idx].label
        # output source indices refer to the score-filtered frame
        from detfuse.core import validate_frame

        frame = validate_frame(sim.frame_input(), config)
        outputs, _ = run_pipeline(frame, config)
        for out in outputs:
            for view, det2d_idx in out.sources:
                det = frame.dets2d_per_view[view][det2d_idx]
                gt_idx = gt_of_det2d[id(det)]
                if gt_idx is None:
                    continue
                fused_total += 1
                fused_correct += out.label == sim.gt.boxes[gt_idx].label
    rgb_acc = rgb_correct / rgb_total
    fused_acc = fused_correct / fused_total
    report(
        "criterion 6: semantic fusion class accuracy",
        fused_acc == rgb_acc and confused_inputs > 0,
        f"fused accuracy {fused_acc:.4f} == RGB branch accuracy {rgb_acc:.4f} "
        f"over {fused_total} fused outputs despite {confused_inputs} "
        "misclassified 3D inputs",
    )


# -- criterion 7 -----------------------------------------------------------


def test_criterion_07_metric_formulas():
    checks = [
        abs(nds_star(1.0, 0.0, 0.0, 0.0) - 1.0) < 1e-9,
        abs(nds_star(0.5, 0.2, 0.3, 0.5) - 0.5833333333333334) < 1e-9,
        abs(average_precision([0.9], [True], 1) - 1.0) < 1e-12,
        abs(gaussian_mask((5.0, 7.0), (5.0, 7.0), (10.0, 4.0)) - 1.0) < 1e-12,
        abs(gaussian_mask((15.0, 7.0), (5.0, 7.0), (10.0, 4.0))
            - math.exp(-0.5)) < 1e-12,
    ]
    report(
        "criterion 7: metric formula checks",
        all(checks),
        "composite-score hand values, one-detection AP, Gaussian closed forms",
    )


# -- criterion 8 -----------------------------------------------------------


def test_criterion_08_frustum_contract():
    scene = SceneSpec(objects_min=2, objects_max=6, labels=LABELS)
    noise = DetectorNoiseSpec(fn_rate_2d=0.0, fp_rate_2d=0.1, masks=True)
    config_bbox = PipelineConfig(frustum_mode="bbox")
    config_mask = PipelineConfig(frustum_mode="mask")
    config_both = PipelineConfig(frustum_mode="bbox+mask")
    proposals = 0
    rejected = 0
    for seed in range(100):
        sim = simulate_frame(scene, noise, seed)
        cam = sim.calib.cameras[0]
        for idx, det in enumerate(sim.dets2d_per_view[0]):
            frustum = extract_frustum(sim.cloud, sim.calib, 0, det, config_bbox, idx)
            masked = extract_frustum(sim.cloud, sim.calib, 0, det, config_mask, idx)
            both = extract_frustum(sim.cloud, sim.calib, 0, det, config_both, idx)
            if frustum is None:
                rejected += 1
            else:
                proposals += 1
                assert len(frustum) >= config_bbox.p_min
                pix, depth = project_points(
                    frustum.xyz, sim.calib.lidar_to_cam, cam
                )
                box = frustum.enlarged_boxes[0]
                assert (depth > config_bbox.behind_camera_depth).all()
                assert (pix[:, 0] >= box.x_min).all()
                assert (pix[:, 0] <= box.x_max).all()
                assert (pix[:, 1] >= box.y_min).all()
                assert (pix[:, 1] <= box.y_max).all()
            bbox_set = set() if frustum is None else set(frustum.point_indices.tolist())
            mask_set = set() if masked is None else set(masked.point_indices.tolist())
            both_set = set() if both is None else set(both.point_indices.tolist())
            if both is not None:
                assert both_set == bbox_set
                flagged = set(both.point_indices[both.mask_flags].tolist())
                if masked is not None:
                    assert mask_set == flagged
                assert flagged <= both_set
            if masked is not None and frustum is not None:
                assert mask_set <= bbox_set
    report(
        "criterion 8: frustum contract",
        proposals > 100,
        f"{proposals} proposals re-projected inside their enlarged boxes "
        f"exactly; {rejected} sparse candidates rejected below 10 points; "
        "mask selections are subsets of bbox selections",
    )


# -- criterion 9 -----------------------------------------------------------


@pytest.mark.skipif(
    KERNEL_BACKEND != "compiled",
    reason="latency budget is pinned to the default compiled kernels; "
    "DETFUSE_PURE_PYTHON is a debugging override",
)
def test_criterion_09_latency_budget():
    scene = SceneSpec(
        objects_min=20, objects_max=20, range_min=8.0, range_max=45.0,
        azimuth_max_deg=30.0, ground_points=15000, clutter_points=500,
        labels=LABELS,
    )
    noise = DetectorNoiseSpec(
        fn_rate_3d=0.0, fp_rate_3d=0.0, duplicates=5,
        fn_rate_2d=0.0, fp_rate_2d=0.5,
        score_fp_2d=ScoreModel("uniform", 0.75, 0.95),
    )
    sim = None
    for seed in range(50):
        candidate = simulate_frame(scene, noise, seed)
        if (len(candidate.dets3d) == 100
                and sum(len(v) for v in candidate.dets2d_per_view) == 30):
            sim = candidate
            break
    assert sim is not None, "no seed produced the 100/30 detection layout"
    frame = sim.frame_input()
    config = PipelineConfig()
    run_pipeline(frame, config)  # warm-up
    match_ms = []
    recovery_ms = []
    for _ in range(9):
        _, rep = run_pipeline(frame, config)
        match_ms.append(
            rep.stage_ms["clustering"] + rep.stage_ms["matching"]
            + rep.stage_ms["semantic_fusion"]
        )
        recovery_ms.append(rep.stage_ms["recovery"])
    match_med = float(np.median(match_ms))
    recovery_med = float(np.median(recovery_ms))
    report(
        "criterion 9: latency budget",
        match_med < 5.0 and recovery_med < 20.0,
        f"100 3D + 30 2D detections, {len(sim.cloud)} points "
        f"({KERNEL_BACKEND} kernels): matching+fusion {match_med:.2f} ms "
        f"(< 5), recovery {recovery_med:.2f} ms (< 20)",
    )


# -- criterion 10 ----------------------------------------------------------


def test_criterion_10_geometric_localizer_sanity():
    config = PipelineConfig()
    localizer = GeometricLocalizer.from_config(config)
    center_errors = []
    yaw_errors = []
    confirmed = 0
    frustums = 0
    seed = 0
    while frustums < 100:
        assert seed < 500, "ran out of seeds collecting 100 frustums"
        scene = SceneSpec(objects_min=1, objects_max=1, clutter_points=0,
                          range_min=5.0, range_max=40.0, labels=LABELS)
        gt, cloud, calib = generate_scene(scene, seed)
        seed += 1
        ann = gt.boxes[0]
        proj = project_box3d(ann.box, calib.lidar_to_cam, calib.cameras[0])
        if proj is None:
            continue
        det2d = Detection2D(proj.box2d, 0.9, ann.label)
        frustum = extract_frustum(cloud, calib, 0, det2d, config)
        if frustum is None:
            continue
        frustums += 1
        located = localizer(frustum, ann.label.dim_prior)
        if located is None:
            continue
        box, score = located
        center_errors.append(
            math.dist((box.x, box.y, box.z), (ann.box.x, ann.box.y, ann.box.z))
        )
        wrapped = abs(box.yaw - ann.box.yaw) % math.pi
        yaw_errors.append(min(wrapped, math.pi - wrapped))
        if confirm_recovery(box, score, [(0, 0, det2d)], calib, 0.5) is not None:
            confirmed += 1
    center_med = float(np.median(center_errors))
    yaw_med = float(np.median(yaw_errors))
    rate = confirmed / frustums
    report(
        "criterion 10: geometric localizer sanity",
        center_med < 0.3 and yaw_med < 0.2 and rate >= 0.8,
        f"100 clutter-free frustums at 5-40 m: median center error "
        f"{center_med:.3f} m (< 0.3), median yaw error {yaw_med:.3f} rad "
        f"(< 0.2 mod pi), confirm rate {rate:.2f} (>= 0.80)",
    )
