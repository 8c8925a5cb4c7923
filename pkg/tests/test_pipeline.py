import numpy as np
import pytest

from detfuse.core import (
    Box3D,
    Detection2D,
    Detection3D,
    FrameInput,
    LabelSet,
    PipelineConfig,
    PointCloud,
)
from detfuse.geometry import project_box3d
from detfuse.pipeline import (
    DegenerateScoreWarning,
    FusionEntry,
    final_bev_nms,
    probabilistic_ensemble,
    run_ablation_grid,
    run_pipeline,
    semantic_fusion,
)

from conftest import identity_calib, pinhole_camera

TWO_CLASSES = LabelSet.uniform([("car", (4.2, 1.6, 1.9)), ("truck", (8.0, 3.0, 2.8))])


class TestProbabilisticEnsemble:
    def test_symmetric_fixed_point(self):
        assert probabilistic_ensemble(0.5, [0.5], 0.5) == pytest.approx(0.5)

    def test_agreeing_high_scores(self):
        assert probabilistic_ensemble(0.9, [0.9], 0.5) == pytest.approx(
            0.81 / (0.81 + 0.01)
        )

    def test_stereo_three_scores(self):
        assert probabilistic_ensemble(0.9, [0.9, 0.9], 0.5) == pytest.approx(
            0.729 / (0.729 + 0.001)
        )

    def test_degenerate_inputs_clamped_with_warning(self):
        with pytest.warns(DegenerateScoreWarning):
            out = probabilistic_ensemble(1.0, [0.9], 0.5)
        assert 0.0 < out < 1.0

    def test_bounds_and_monotonicity(self):
        grid = np.linspace(0.05, 0.95, 10)
        for p in (0.2, 0.5, 0.8):
            prev_row = None
            for s3 in grid:
                row = [probabilistic_ensemble(s3, [s2], p) for s2 in grid]
                assert all(0.0 < v < 1.0 for v in row)
                assert all(b >= a - 1e-12 for a, b in zip(row, row[1:]))
                if prev_row is not None:
                    assert all(b >= a - 1e-12 for a, b in zip(prev_row, row))
                prev_row = row


def _entry(score3d, label3d, rgb, provenance="matched", box=None):
    return FusionEntry(
        box=box or Box3D(0, 0, 0, 1, 1, 1, 0),
        score3d=score3d,
        label3d=label3d,
        rgb=tuple(rgb),
        provenance=provenance,
    )


class TestSemanticFusion:
    def test_class_disagreement_takes_rgb(self, labels):
        ped = labels.by_name("pedestrian")
        cyc = labels.by_name("cyclist")
        out = semantic_fusion([_entry(0.7, ped, [(0.9, cyc)])])
        assert out[0].label == cyc
        assert out[0].score == pytest.approx(0.9)

    def test_agreement_uses_ensemble_with_uniform_prior(self):
        car = TWO_CLASSES.by_name("car")
        out = semantic_fusion([_entry(0.8, car, [(0.8, car)])])
        # two classes, uniform prior 0.5: 0.64 / (0.64 + 0.04)
        assert out[0].score == pytest.approx(0.64 / 0.68, abs=1e-6)
        assert out[0].score == pytest.approx(0.941, abs=5e-4)
        assert out[0].label == car

    def test_stereo_mismatch_after_confidence_pick(self, labels):
        car = labels.by_name("car")
        cyc = labels.by_name("cyclist")
        out = semantic_fusion([_entry(0.9, car, [(0.6, car), (0.8, cyc)])])
        assert out[0].label == cyc
        assert out[0].score == pytest.approx(0.8)

    def test_stereo_agreement_uses_both_scores(self):
        car = TWO_CLASSES.by_name("car")
        out = semantic_fusion([_entry(0.9, car, [(0.9, car), (0.9, car)])])
        assert out[0].score == pytest.approx(0.729 / (0.729 + 0.001), abs=1e-6)


def _camera_frame_input(labels, dets3d, dets2d, cloud=None):
    calib = identity_calib([pinhole_camera()])
    cloud = cloud if cloud is not None else PointCloud(np.zeros((0, 4)))
    return FrameInput(
        cloud=cloud, calib=calib, dets3d=tuple(dets3d),
        dets2d_per_view=(tuple(dets2d),), labels=labels,
    )


class TestRunPipeline:
    def test_no_2d_detections_discards_everything(self, labels):
        car = labels.by_name("car")
        dets3d = [Detection3D(Box3D(0, 0, 12, 2, 2, 2, 0), 0.9, car)]
        frame = _camera_frame_input(labels, dets3d, [])
        out, report = run_pipeline(frame, PipelineConfig())
        assert out == []
        assert report.counts["discarded_3d"] == 1

    def test_recovery_only_frame(self, labels):
        # no LiDAR detections; one 2D box covering a dense box surface
        car = labels.by_name("car")
        box = Box3D(0.0, 0.3, 12.0, 4.2, 1.6, 1.9, 0.15)
        from test_recovery import _surface_points

        surface = _surface_points(box, n=400, seed=11)
        frame = _camera_frame_input(labels, [], [], cloud=PointCloud(surface))
        calib = frame.calib
        proj = project_box3d(box, calib.lidar_to_cam, calib.cameras[0]).box2d
        frame = _camera_frame_input(
            labels, [], [Detection2D(proj, 0.9, car)], cloud=PointCloud(surface)
        )
        out, report = run_pipeline(frame, PipelineConfig())
        assert len(out) == 1
        assert out[0].provenance == "recovered"
        assert out[0].label == car
        assert report.counts["recovered"] == 1

    def test_matched_output_takes_rgb_class(self, labels):
        car = labels.by_name("car")
        cyc = labels.by_name("cyclist")
        box = Box3D(0.0, 0.0, 12.0, 2, 2, 2, 0.0)
        frame = _camera_frame_input(
            labels,
            [Detection3D(box, 0.9, car)],
            [],
        )
        proj = project_box3d(box, frame.calib.lidar_to_cam, frame.calib.cameras[0]).box2d
        frame = _camera_frame_input(
            labels,
            [Detection3D(box, 0.9, car)],
            [Detection2D(proj, 0.95, cyc)],
        )
        out, _ = run_pipeline(frame, PipelineConfig())
        assert len(out) == 1
        assert out[0].label == cyc
        assert out[0].score == pytest.approx(0.95)

    def test_stage_report_rows(self, labels):
        frame = _camera_frame_input(labels, [], [])
        _, report = run_pipeline(frame, PipelineConfig())
        names = [name for name, _ in report.timing_rows()]
        assert names == ["Bounding Box Matching", "Detection Recovery", "Semantic Fusion"]

    def test_unknown_ablation_stage_rejected(self, labels):
        frame = _camera_frame_input(labels, [], [])
        with pytest.raises(ValueError):
            run_pipeline(frame, PipelineConfig(), ablate=frozenset({"everything"}))

    def test_order_invariance_of_output_set(self, labels):
        rng = np.random.default_rng(21)
        car = labels.by_name("car")
        boxes = [Box3D(rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(9, 18),
                       2, 2, 2, rng.uniform(0, 6.28)) for _ in range(6)]
        dets3d = [Detection3D(b, float(rng.uniform(0.3, 0.99)), car) for b in boxes]
        frame0 = _camera_frame_input(labels, dets3d, [])
        calib = frame0.calib
        dets2d = []
        for b in boxes[:4]:
            proj = project_box3d(b, calib.lidar_to_cam, calib.cameras[0])
            if proj is not None:
                dets2d.append(Detection2D(proj.box2d, 0.9, car))
        frame = _camera_frame_input(labels, dets3d, dets2d)
        out1, _ = run_pipeline(frame, PipelineConfig())

        perm = rng.permutation(len(dets3d))
        frame_shuffled = _camera_frame_input(
            labels, [dets3d[i] for i in perm], list(reversed(dets2d))
        )
        out2, _ = run_pipeline(frame_shuffled, PipelineConfig())

        def key(d):
            return (round(d.box.x, 9), round(d.box.y, 9), round(d.score, 9), d.label.id)

        assert sorted(map(key, out1)) == sorted(map(key, out2))


class TestAblationGrid:
    def test_matches_run_pipeline_stage_for_stage(self, labels):
        from detfuse.simulator import DetectorNoiseSpec, SceneSpec, simulate_frame
        from detfuse.pipeline import ABLATION_CONFIGS

        sim = simulate_frame(SceneSpec(labels=labels), DetectorNoiseSpec(), 5)
        config = PipelineConfig()
        grid = run_ablation_grid(sim.frame_input(), config)

        def key(d):
            return (d.provenance, round(d.box.x, 9), round(d.score, 9), d.label.id)

        for name, ablate in ABLATION_CONFIGS.items():
            direct, _ = run_pipeline(sim.frame_input(), config, ablate=ablate)
            assert sorted(map(key, direct)) == sorted(map(key, grid[name])), name

    def test_precision_effect_on_clean_projections(self, labels):
        # noiseless TPs project exactly onto their GT 2D boxes while 3D FPs
        # land in free image space: matching keeps every TP cluster and
        # discards every FP
        from detfuse.evaluation import MatchCriterion, match_to_gt
        from detfuse.simulator import (
            DetectorNoiseSpec,
            SceneSpec,
            ScoreModel,
            simulate_frame,
        )

        noise = DetectorNoiseSpec(
            fn_rate_3d=0.0, fp_rate_3d=0.5, duplicates=1,
            center_sigma=0.0, dim_sigma_3d=0.0, yaw_sigma=0.0,
            fn_rate_2d=0.0, fp_rate_2d=0.0, corner_sigma=0.0,
            # every 2D TP must survive the min_score_2d input filter for the
            # all-TPs-kept premise to apply
            score_tp_2d=ScoreModel("uniform", 0.75, 0.95),
        )
        criterion = MatchCriterion("iou3d", 0.5)
        for seed in range(6):
            sim = simulate_frame(SceneSpec(labels=labels), noise, seed)
            grid = run_ablation_grid(sim.frame_input())
            n_gt_detected = sum(1 for p in sim.provenance3d if p is not None)
            matched = grid["matching"]
            assert len(matched) == n_gt_detected
            labeling = match_to_gt(matched, sim.gt, criterion)
            assert all(labeling.tp)

    def test_recovered_scores_never_exceed_their_2d_source(self, labels):
        from detfuse.simulator import DetectorNoiseSpec, SceneSpec, simulate_frame
        from detfuse.core import validate_frame

        noise = DetectorNoiseSpec(fn_rate_3d=0.6, fp_rate_3d=0.1)
        config = PipelineConfig()
        checked = 0
        for seed in range(10):
            sim = simulate_frame(SceneSpec(labels=labels), noise, seed)
            frame = validate_frame(sim.frame_input(), config)
            out, _ = run_pipeline(frame, config, ablate=frozenset({"semantic"}))
            for det in out:
                if det.provenance != "recovered":
                    continue
                source_scores = [
                    frame.dets2d_per_view[view][idx].score
                    for view, idx in det.sources
                ]
                assert det.score <= max(source_scores) + 1e-12
                checked += 1
        assert checked > 0

    def test_recovery_never_reduces_true_positives(self, labels):
        from detfuse.evaluation import MatchCriterion, match_to_gt
        from detfuse.simulator import DetectorNoiseSpec, SceneSpec, simulate_frame

        criterion = MatchCriterion("iou3d", 0.5)
        for seed in range(8):
            sim = simulate_frame(
                SceneSpec(labels=labels),
                DetectorNoiseSpec(fn_rate_3d=0.4), seed,
            )
            grid = run_ablation_grid(sim.frame_input())
            for thr in np.linspace(0.1, 0.9, 9):
                tp_match = sum(
                    match_to_gt([d for d in grid["matching"] if d.score >= thr],
                                sim.gt, criterion).tp
                )
                tp_with_recovery = sum(
                    match_to_gt([d for d in grid["matching+recovery"] if d.score >= thr],
                                sim.gt, criterion).tp
                )
                assert tp_with_recovery >= tp_match


class TestFinalNms:
    def test_suppresses_overlapping_lower_scores(self, labels):
        car = labels.by_name("car")
        from detfuse.pipeline import FusedDetection

        a = FusedDetection(Box3D(0, 0, 0, 4, 2, 2, 0), 0.9, car, "matched")
        b = FusedDetection(Box3D(0.3, 0, 0, 4, 2, 2, 0), 0.7, car, "recovered")
        c = FusedDetection(Box3D(20, 0, 0, 4, 2, 2, 0), 0.5, car, "matched")
        kept = final_bev_nms([a, b, c], 0.5)
        assert [k.score for k in kept] == [0.9, 0.5]
