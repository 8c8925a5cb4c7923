"""Command-line entry point: simulate, fuse, eval and sweep workflows.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
Diagnostics go to stderr; results go to files and stdout.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io as dio
from .core import CalibrationSet, Detection3D, FrameInput, LabelSet, PipelineConfig
from .errors import DetfuseError
from .evaluation import MatchCriterion, evaluate_frames
from .pipeline import STAGES, run_pipeline
from .simulator import simulate_frame

logger = logging.getLogger("detfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_seeds(text: str) -> list:
    if ".." in text:
        a, b = text.split("..")
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ValueError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


def _parse_criterion(text: str) -> MatchCriterion:
    kind, _, threshold = text.partition(":")
    return MatchCriterion(kind, float(threshold) if threshold else None)


def _parse_range(text: str) -> list:
    a, b, step = (float(v) for v in text.split(":"))
    if step <= 0:
        raise ValueError("sweep step must be positive")
    values = np.arange(a, b + step * 1e-9, step)
    return [round(float(v), 10) for v in values]


def _build_parser() -> _Parser:
    parser = _Parser(prog="detfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate synthetic frame bundles")
    p_sim.add_argument("--spec", type=Path, default=None,
                       help="simulator spec file (defaults apply when omitted)")
    p_sim.add_argument("--seeds", required=True,
                       help="seed or inclusive range, e.g. 7 or 0..99")
    p_sim.add_argument("--out", type=Path, required=True)

    p_fuse = sub.add_parser("fuse", help="run the fusion pipeline over frames")
    p_fuse.add_argument("--frames", type=Path, required=True)
    p_fuse.add_argument("--config", type=Path, default=None)
    p_fuse.add_argument("--mode", choices=("mono", "multi", "stereo"), default="mono")
    p_fuse.add_argument("--out", type=Path, required=True)
    p_fuse.add_argument("--ablate", default="",
                        help=f"comma-separated stages to disable: {','.join(STAGES)}")
    p_fuse.add_argument("--jobs", type=int, default=1)
    for name in ("tau-z", "tau-b", "tau-d", "enlargement"):
        p_fuse.add_argument(f"--{name}", type=float, default=None)
    p_fuse.add_argument("--p-min", type=int, default=None)
    p_fuse.add_argument("--frustum-mode", choices=("bbox", "mask", "bbox+mask"),
                        default=None)
    p_fuse.add_argument("--final-nms", default=None)

    p_eval = sub.add_parser("eval", help="score detections against ground truth")
    p_eval.add_argument("--dets", type=Path, required=True)
    p_eval.add_argument("--gt", type=Path, required=True)
    p_eval.add_argument("--criterion", default="iou3d",
                        help="iou3d[:thr] or center[:dist]")
    p_eval.add_argument("--interpolation", choices=("40", "11", "all"), default="40")
    p_eval.add_argument("--out", type=Path, required=True)

    p_sweep = sub.add_parser("sweep", help="re-run fuse+eval over a parameter range")
    p_sweep.add_argument("--param", required=True,
                         choices=("tau_z", "tau_b", "tau_d", "e", "enlargement"))
    p_sweep.add_argument("--range", required=True, dest="value_range",
                         help="a:b:step, inclusive")
    p_sweep.add_argument("--frames", type=Path, required=True)
    p_sweep.add_argument("--config", type=Path, default=None)
    p_sweep.add_argument("--mode", choices=("mono", "multi", "stereo"), default="mono")
    p_sweep.add_argument("--criterion", default="iou3d")
    p_sweep.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_simulate(args) -> int:
    if args.spec is not None:
        scene, noise = dio.read_sim_spec(args.spec)
    else:
        from .simulator import DetectorNoiseSpec, SceneSpec

        scene, noise = SceneSpec(), DetectorNoiseSpec()
    args.out.mkdir(parents=True, exist_ok=True)
    dio.write_sim_spec(scene, noise, args.out / "sim_spec.txt")
    for seed in _parse_seeds(args.seeds):
        sim = simulate_frame(scene, noise, seed)
        dio.write_frame_bundle(args.out, sim)
    print(f"wrote {len(_parse_seeds(args.seeds))} frames to {args.out}")
    return 0


def _restrict_mode(frame: FrameInput, mode: str) -> FrameInput:
    if mode == "mono" and frame.calib.num_views > 1:
        calib = CalibrationSet(frame.calib.lidar_to_cam, frame.calib.cameras[:1], ())
        return FrameInput(frame.cloud, calib, frame.dets3d,
                          frame.dets2d_per_view[:1], frame.labels)
    return frame


def _fuse_one(task):
    root, frame_id, config, mode, ablate = task
    frame, _ = dio.read_frame_bundle(root, frame_id)
    frame = _restrict_mode(frame, mode)
    fused, report = run_pipeline(frame, config, ablate=ablate)
    dets = [Detection3D(f.box, f.score, f.label) for f in fused]
    return frame_id, dets, report.stage_ms


def _fuse_config(args) -> PipelineConfig:
    overrides = {
        "tau_z": args.tau_z,
        "tau_b": args.tau_b,
        "tau_d": args.tau_d,
        "enlargement": args.enlargement,
        "p_min": args.p_min,
        "frustum_mode": args.frustum_mode,
        "final_nms": args.final_nms,
    }
    config = dio.read_pipeline_config(args.config, overrides)
    if args.mode == "stereo":
        config = dataclasses.replace(config, stereo_enabled=True)
    return config


def _cmd_fuse(args) -> int:
    ablate = frozenset(s for s in args.ablate.split(",") if s)
    unknown = ablate - set(STAGES)
    if unknown:
        raise DetfuseError(f"unknown ablation stages: {sorted(unknown)}")
    config = _fuse_config(args)
    frame_ids = dio.list_frames(args.frames)
    if not frame_ids:
        raise DetfuseError(f"no frames found under {args.frames}")

    out_dir = args.out
    (out_dir / "fused").mkdir(parents=True, exist_ok=True)
    dio.write_pipeline_config(config, out_dir / "config.txt")

    tasks = [(args.frames, fid, config, args.mode, ablate) for fid in frame_ids]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_fuse_one, tasks))
    else:
        results = [_fuse_one(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    totals: dict = {}
    for frame_id, dets, stage_ms in results:
        dio.write_detections_3d(out_dir / "fused" / f"{frame_id}.txt", dets, frame_id)
        for stage, ms in stage_ms.items():
            totals[stage] = totals.get(stage, 0.0) + ms

    n = len(results)
    rows = [
        ("Bounding Box Matching",
         totals.get("clustering", 0.0) + totals.get("matching", 0.0)),
        ("Detection Recovery", totals.get("recovery", 0.0)),
        ("Semantic Fusion", totals.get("semantic_fusion", 0.0)),
    ]
    lines = [f"# timing over {n} frames", f"{'Module':<24s} {'Mean ms':>10s} {'Total ms':>10s}"]
    for name, total in rows:
        lines.append(f"{name:<24s} {total / n:>10.3f} {total:>10.1f}")
    (out_dir / "timing.txt").write_text("\n".join(lines) + "\n")
    print(f"fused {n} frames -> {out_dir}")
    return 0


def _resolve_det_files(dets_root: Path) -> dict:
    candidates = dets_root / "fused" if (dets_root / "fused").is_dir() else dets_root
    return {p.stem: p for p in sorted(candidates.glob("*.txt"))
            if p.name not in ("timing.txt", "config.txt", "labels.txt", "sim_spec.txt")}


def _resolve_gt(gt_root: Path, frame_id: str) -> Path:
    bundled = gt_root / "frames" / frame_id / "gt.txt"
    return bundled if bundled.exists() else gt_root / f"{frame_id}.txt"


def _find_labels(*roots) -> LabelSet:
    for root in roots:
        for candidate in (root / "labels.txt", root.parent / "labels.txt"):
            if candidate.exists():
                return dio.read_label_set(candidate)
    return LabelSet.default()


def _cmd_eval(args) -> int:
    labels = _find_labels(args.dets, args.gt)
    det_files = _resolve_det_files(args.dets)
    if not det_files:
        raise DetfuseError(f"no detection files under {args.dets}")
    dets_per_frame = []
    gt_per_frame = []
    for frame_id, det_path in det_files.items():
        gt_path = _resolve_gt(args.gt, frame_id)
        if not gt_path.exists():
            raise DetfuseError(f"no ground truth for frame {frame_id} under {args.gt}")
        dets_per_frame.append(dio.read_detections_3d(det_path, labels))
        gt_per_frame.append(dio.read_ground_truth(gt_path, labels))
    report = evaluate_frames(
        dets_per_frame, gt_per_frame, labels,
        _parse_criterion(args.criterion), args.interpolation,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    dio.write_report(report, args.out)
    print(args.out.read_text(), end="")
    return 0


def _cmd_sweep(args) -> int:
    param = "enlargement" if args.param == "e" else args.param
    values = _parse_range(args.value_range)
    labels = _find_labels(args.frames, args.frames)
    criterion = _parse_criterion(args.criterion)
    frame_ids = dio.list_frames(args.frames)
    if not frame_ids:
        raise DetfuseError(f"no frames found under {args.frames}")
    loaded = []
    for fid in frame_ids:
        frame, gt = dio.read_frame_bundle(args.frames, fid, labels)
        if gt is None:
            raise DetfuseError(f"frame {fid} has no ground truth; sweep needs gt")
        loaded.append((_restrict_mode(frame, args.mode), gt))

    rows = []
    for value in values:
        overrides = {param: value}
        if args.mode == "stereo":
            overrides["stereo_enabled"] = True
        config = dio.read_pipeline_config(args.config, overrides)
        dets_per_frame = [run_pipeline(frame, config)[0] for frame, _ in loaded]
        report = evaluate_frames(
            dets_per_frame, [gt for _, gt in loaded], labels, criterion
        )
        rows.append((value, report.mean_ap, report.nds, report.m_ate,
                     report.m_ase, report.m_aoe))
        logger.info("sweep %s=%s -> mAP %.4f", param, value, report.mean_ap)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([param, "mAP", "NDS_star", "mATE", "mASE", "mAOE"])
        for row in rows:
            writer.writerow([f"{v:.6f}" for v in row])
    print(f"sweep of {param} over {len(values)} values -> {args.out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "fuse":
            return _cmd_fuse(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        parser.error(f"unknown command {args.command!r}")
    except SystemExit as exc:
        return int(exc.code or 0)
    except (DetfuseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        logger.exception("internal error: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
