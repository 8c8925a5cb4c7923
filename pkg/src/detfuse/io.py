"""Bit-exact readers and writers for every on-disk artifact.

Formats (all text files are UTF-8, one record per line, floats written
with 6 decimals so writers are byte-deterministic):

* point clouds: little-endian float32 (x, y, z, reflectance) quadruples
  (KITTI `.bin` convention);
* calibration: KITTI-style key/value text (`P0:`, `R0_rect:`,
  `Tr_velo_to_cam:`), extended with `K_<i>:`, `IMG_SIZE_<i>:` and
  `STEREO:` lines for rigs KITTI files cannot express;
* detections / ground truth: line-oriented records
  `frame modality view <box fields> score class [extra]` where 3D boxes are
  `x y z l h w yaw` (m, rad), 2D boxes `x_min y_min x_max y_max` (px) with
  an optional run-length mask, GT rows carry a difficulty tag;
* evaluation reports: aligned text table plus a JSON sibling;
* pipeline / simulator configs: flat `key = value` documents.

Readers reject malformed input with errors naming the file and record.
"""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path
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
    PipelineConfig,
    PointCloud,
    StereoPair,
)
from .errors import (
    BadDimension,
    MissingKey,
    NonFiniteValue,
    SchemaViolation,
    TruncatedFile,
    ValidationError,
)
from .evaluation import EvalReport, GroundTruthBox, GroundTruthFrame
from .simulator import CameraRigSpec, DetectorNoiseSpec, SceneSpec, ScoreModel

DETECTIONS_HEADER = (
    "# detfuse detections v1 | frame modality view box... score class extra"
    " | units: m, rad, px"
)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# ---------------------------------------------------------------------------
# point clouds


def read_point_cloud(path, frame_id: str = "") -> PointCloud:
    """Parse little-endian float32 (x, y, z, r) quadruples."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16 != 0:
        raise TruncatedFile(f"{path}: {len(raw)} bytes is not a multiple of 16")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        record = int(np.flatnonzero(~finite)[0])
        raise NonFiniteValue(f"{path}: non-finite value at byte offset {record * 16}")
    return PointCloud(data, frame_id=frame_id or path.stem)


def write_point_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud.xyzr.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# calibration


def _parse_floats(path, key: str, text: str, count: int) -> np.ndarray:
    values = text.split()
    if len(values) != count:
        raise BadDimension(f"{path}: key {key} has {len(values)} values, expected {count}")
    try:
        return np.array([float(v) for v in values])
    except ValueError as exc:
        raise BadDimension(f"{path}: key {key}: {exc}") from None


def read_calibration(path, image_size: tuple = (1242, 375)) -> CalibrationSet:
    """Parse KITTI-style calibration, including this package's extensions.

    Plain KITTI files carry no image sizes, so `image_size` supplies them
    (default: the common KITTI resolution); for plain files the camera list
    is the color pair (P2, P3) registered as a stereo pair. Extended files
    list cameras P0..P{n-1} with explicit sizes, intrinsics and stereo
    pairs.
    """
    path = Path(path)
    entries = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise SchemaViolation(f"{path}: malformed calibration line {line!r}")
        key, _, rest = line.partition(":")
        entries.setdefault(key.strip(), []).append(rest.strip())

    if "Tr_velo_to_cam" not in entries:
        raise MissingKey(f"{path}: missing key Tr_velo_to_cam")
    if "R0_rect" not in entries:
        raise MissingKey(f"{path}: missing key R0_rect")
    tr = _parse_floats(path, "Tr_velo_to_cam", entries["Tr_velo_to_cam"][0], 12)
    r0 = _parse_floats(path, "R0_rect", entries["R0_rect"][0], 9)
    T_tr = np.eye(4)
    T_tr[:3, :] = tr.reshape(3, 4)
    T_r0 = np.eye(4)
    T_r0[:3, :3] = r0.reshape(3, 3)
    T = T_r0 @ T_tr

    extended = any(k.startswith(("IMG_SIZE_", "K_", "STEREO")) for k in entries)
    if extended:
        indices = sorted(
            int(k[1:]) for k in entries if k.startswith("P") and k[1:].isdigit()
        )
    else:
        indices = [i for i in (2, 3) if f"P{i}" in entries]
        if not indices:
            indices = [i for i in (0, 1) if f"P{i}" in entries]
    if not indices:
        raise MissingKey(f"{path}: no projection matrices present")

    cameras = []
    for pos, i in enumerate(indices):
        P = _parse_floats(path, f"P{i}", entries[f"P{i}"][0], 12).reshape(3, 4)
        if f"IMG_SIZE_{i}" in entries:
            w, h = (int(float(v)) for v in entries[f"IMG_SIZE_{i}"][0].split())
        else:
            w, h = image_size
        if f"K_{i}" in entries:
            K = _parse_floats(path, f"K_{i}", entries[f"K_{i}"][0], 9).reshape(3, 3)
        else:
            K = P[:, :3]
        cameras.append(CameraModel(P, w, h, K))

    pairs = []
    if extended:
        for text in entries.get("STEREO", []):
            li, ri = (int(float(v)) for v in text.split())
            pairs.append(_register_stereo(cameras, li, ri))
    elif len(indices) == 2 and indices == [2, 3]:
        pairs.append(_register_stereo(cameras, 0, 1))
    return CalibrationSet(T, tuple(cameras), tuple(pairs))


def _register_stereo(cameras: Sequence[CameraModel], left: int, right: int) -> StereoPair:
    """Derive the relative pose of a rectified pair from its P matrices."""
    P_l, P_r = cameras[left].P, cameras[right].P
    K_l = cameras[left].K if cameras[left].K is not None else P_l[:, :3]
    K_r = cameras[right].K if cameras[right].K is not None else P_r[:, :3]
    t_l = np.linalg.solve(K_l, P_l[:, 3])
    t_r = np.linalg.solve(K_r, P_r[:, 3])
    return StereoPair(left, right, np.eye(3), t_r - t_l)


def write_calibration(path, calib: CalibrationSet) -> None:
    """Emit the extended calibration format (readable by read_calibration)."""
    lines = []
    for i, cam in enumerate(calib.cameras):
        lines.append(f"P{i}: " + " ".join(_fmt(v) for v in cam.P.ravel()))
    for i, cam in enumerate(calib.cameras):
        lines.append(f"IMG_SIZE_{i}: {cam.width} {cam.height}")
        if cam.K is not None:
            lines.append(f"K_{i}: " + " ".join(_fmt(v) for v in cam.K.ravel()))
    T = calib.lidar_to_cam
    lines.append("R0_rect: " + " ".join(_fmt(v) for v in np.eye(3).ravel()))
    lines.append("Tr_velo_to_cam: " + " ".join(_fmt(v) for v in T[:3, :].ravel()))
    for pair in calib.stereo_pairs:
        lines.append(f"STEREO: {pair.left} {pair.right}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# labels


def write_label_set(path, labels: LabelSet) -> None:
    # Priors must survive the round trip bit-exactly (they sum to 1 within
    # 1e-9), so label files carry full float precision.
    lines = ["# id name l h w prior"]
    for c in labels:
        l, h, w = c.dim_prior
        lines.append(f"{c.id} {c.name} {l!r} {h!r} {w!r} {c.prior!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_set(path) -> LabelSet:
    path = Path(path)
    labels = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise SchemaViolation(f"{path}: record {n}: expected 6 fields")
        labels.append(
            ClassLabel(
                int(parts[0]), parts[1],
                (float(parts[2]), float(parts[3]), float(parts[4])),
                float(parts[5]),
            )
        )
    try:
        return LabelSet(tuple(labels))
    except ValidationError as exc:
        raise SchemaViolation(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# detections and ground truth


def _write_records(path, lines: Sequence[str]) -> None:
    Path(path).write_text("\n".join([DETECTIONS_HEADER, *lines]) + "\n" if lines
                          else DETECTIONS_HEADER + "\n")


def write_detections_3d(path, dets: Sequence[Detection3D], frame_id: str) -> None:
    lines = []
    for d in dets:
        b = d.box
        fields = [frame_id, "3d", "-", _fmt(b.x), _fmt(b.y), _fmt(b.z),
                  _fmt(b.l), _fmt(b.h), _fmt(b.w), _fmt(b.yaw),
                  _fmt(d.score), d.label.name, "-"]
        lines.append(" ".join(fields))
    _write_records(path, lines)


def write_detections_2d(path, dets_per_view: Sequence[Sequence[Detection2D]],
                        frame_id: str) -> None:
    lines = []
    for view, dets in enumerate(dets_per_view):
        for d in dets:
            b = d.box
            mask = d.mask.encode() if d.mask is not None else "-"
            fields = [frame_id, "2d", str(view),
                      _fmt(b.x_min), _fmt(b.y_min), _fmt(b.x_max), _fmt(b.y_max),
                      _fmt(d.score), d.label.name, mask]
            lines.append(" ".join(fields))
    _write_records(path, lines)


def write_ground_truth(path, gt: GroundTruthFrame, frame_id: str) -> None:
    lines = []
    for ann in gt.boxes:
        b = ann.box
        fields = [frame_id, "gt", "-", _fmt(b.x), _fmt(b.y), _fmt(b.z),
                  _fmt(b.l), _fmt(b.h), _fmt(b.w), _fmt(b.yaw),
                  "-", ann.label.name, ann.difficulty or "-"]
        lines.append(" ".join(fields))
    _write_records(path, lines)


def _records(path):
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        yield n, stripped.split()


def _label_by_name(labels: LabelSet, name: str, path, n: int) -> ClassLabel:
    try:
        return labels.by_name(name)
    except KeyError:
        raise SchemaViolation(f"{path}: record {n}: unknown class {name!r}") from None


def read_detections_3d(path, labels: LabelSet) -> list:
    out = []
    for n, parts in _records(path):
        if len(parts) != 13 or parts[1] != "3d":
            raise SchemaViolation(f"{path}: record {n}: expected 13-field 3d record")
        try:
            box = Box3D(*(float(v) for v in parts[3:10]))
            det = Detection3D(box, float(parts[10]), _label_by_name(labels, parts[11], path, n))
        except (ValidationError, ValueError) as exc:
            raise SchemaViolation(f"{path}: record {n}: {exc}") from None
        out.append(det)
    return out


def read_detections_2d(path, labels: LabelSet, num_views: Optional[int] = None) -> list:
    per_view: dict = {}
    max_view = -1
    for n, parts in _records(path):
        if len(parts) != 10 or parts[1] != "2d":
            raise SchemaViolation(f"{path}: record {n}: expected 10-field 2d record")
        try:
            view = int(parts[2])
            box = Box2D(*(float(v) for v in parts[3:7]))
            mask = Mask.decode(parts[9]) if parts[9] != "-" else None
            det = Detection2D(box, float(parts[7]),
                              _label_by_name(labels, parts[8], path, n), mask)
        except (ValidationError, ValueError) as exc:
            raise SchemaViolation(f"{path}: record {n}: {exc}") from None
        if view < 0 or (num_views is not None and view >= num_views):
            raise SchemaViolation(
                f"{path}: record {n}: view {view} outside the {num_views}-camera rig"
            )
        per_view.setdefault(view, []).append(det)
        max_view = max(max_view, view)
    count = num_views if num_views is not None else max_view + 1
    return [per_view.get(v, []) for v in range(count)]


def read_ground_truth(path, labels: LabelSet) -> GroundTruthFrame:
    boxes = []
    for n, parts in _records(path):
        if len(parts) != 13 or parts[1] != "gt":
            raise SchemaViolation(f"{path}: record {n}: expected 13-field gt record")
        try:
            box = Box3D(*(float(v) for v in parts[3:10]))
        except (ValidationError, ValueError) as exc:
            raise SchemaViolation(f"{path}: record {n}: {exc}") from None
        difficulty = parts[12] if parts[12] != "-" else None
        boxes.append(GroundTruthBox(box, _label_by_name(labels, parts[11], path, n),
                                    difficulty))
    return GroundTruthFrame(tuple(boxes))


def read_kitti_labels(path, labels: LabelSet, calib: CalibrationSet) -> GroundTruthFrame:
    """Import ground truth from a KITTI label file (GT only).

    KITTI rows are in camera coordinates with the location at the bottom
    face center; they are converted into the LiDAR frame through the
    inverse calibration transform. Classes missing from the label set
    (e.g. DontCare) are skipped.
    """
    path = Path(path)
    T_inv = np.linalg.inv(calib.lidar_to_cam)
    boxes = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise SchemaViolation(f"{path}: record {n}: expected >= 15 fields")
        name = parts[0].lower()
        try:
            label = labels.by_name(name)
        except KeyError:
            continue
        h, w, l = (float(v) for v in parts[8:11])
        x, y, z = (float(v) for v in parts[11:14])
        ry = float(parts[14])
        center_cam = np.array([x, y - h / 2.0, z, 1.0])
        center = T_inv @ center_cam
        heading_cam = np.array([math.cos(ry), 0.0, -math.sin(ry)])
        heading = T_inv[:3, :3] @ heading_cam
        yaw = math.atan2(heading[1], heading[0])
        boxes.append(GroundTruthBox(Box3D(center[0], center[1], center[2],
                                          l, h, w, yaw), label))
    return GroundTruthFrame(tuple(boxes))


# ---------------------------------------------------------------------------
# evaluation reports


def write_report(report: EvalReport, path) -> None:
    """Write the metrics table to `path` and machine-readable JSON alongside."""
    path = Path(path)
    lines = [
        f"criterion: {report.criterion}",
        f"{'class':<14s} {'AP':>8s} {'#gt':>6s}",
    ]
    for name, ap in sorted(report.per_class_ap.items()):
        lines.append(f"{name:<14s} {ap:8.4f} {report.num_gt.get(name, 0):6d}")
    lines.append("")
    lines.append(f"{'mAP':<6s} {report.mean_ap:8.4f}")
    lines.append(f"{'mATE':<6s} {report.m_ate:8.4f}")
    lines.append(f"{'mASE':<6s} {report.m_ase:8.4f}")
    lines.append(f"{'mAOE':<6s} {report.m_aoe:8.4f}")
    lines.append(f"{'NDS*':<6s} {report.nds:8.4f}")
    path.write_text("\n".join(lines) + "\n")
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# flat key = value configs


def _parse_kv(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise SchemaViolation(f"{path}: line {n}: expected key = value")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, typ):
    if typ is bool:
        if value.lower() in ("1", "true", "on", "yes"):
            return True
        if value.lower() in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def read_pipeline_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Build a PipelineConfig from a flat key = value file plus overrides."""
    raw = _parse_kv(path) if path is not None else {}
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items() if v is not None})
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise SchemaViolation(f"unknown pipeline config key {key!r}")
        if key == "final_nms":
            kwargs[key] = None if value.lower() in ("off", "none") else float(value)
        elif key in ("p_min", "clique_cap_factor"):
            kwargs[key] = int(value)
        elif key in ("stereo_enabled",):
            kwargs[key] = _coerce(value, bool)
        elif key in ("frustum_mode", "localizer"):
            kwargs[key] = value
        else:
            kwargs[key] = float(value)
    return PipelineConfig(**kwargs)


def write_pipeline_config(config: PipelineConfig, path) -> None:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        value = getattr(config, f.name)
        if value is None:
            value = "off"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_score_model(value: str) -> ScoreModel:
    kind, a, b = value.split(":")
    return ScoreModel(kind, float(a), float(b))


def read_sim_spec(path) -> tuple:
    """Parse a simulator spec file into (SceneSpec, DetectorNoiseSpec).

    Keys use `scene.`, `rig.` and `noise.` prefixes mirroring the dataclass
    fields, e.g. `scene.objects_max = 8`, `rig.kind = stereo`,
    `noise.score_fp_3d = uniform:0.05:0.99`. `scene.class_mix` is
    `name:weight` pairs separated by commas; `classes` redefines the label
    set as `name:l:h:w` entries (uniform priors).
    """
    raw = _parse_kv(path)
    scene_kwargs: dict = {}
    rig_kwargs: dict = {}
    noise_kwargs: dict = {}

    if "classes" in raw:
        entries = []
        for item in raw.pop("classes").split(","):
            name, l, h, w = item.strip().split(":")
            entries.append((name, (float(l), float(h), float(w))))
        scene_kwargs["labels"] = LabelSet.uniform(entries)

    scene_fields = {f.name: f.type for f in dataclasses.fields(SceneSpec)}
    rig_fields = {f.name: f.type for f in dataclasses.fields(CameraRigSpec)}
    noise_fields = {f.name: f.type for f in dataclasses.fields(DetectorNoiseSpec)}

    for key, value in raw.items():
        prefix, _, name = key.partition(".")
        if prefix == "scene" and name == "class_mix":
            mix = []
            for item in value.split(","):
                cls, weight = item.strip().split(":")
                mix.append((cls, float(weight)))
            scene_kwargs["class_mix"] = tuple(mix)
        elif prefix == "scene" and name in scene_fields:
            typ = {"objects_min": int, "objects_max": int, "ground_points": int,
                   "clutter_points": int}.get(name, float)
            scene_kwargs[name] = typ(value)
        elif prefix == "rig" and name in rig_fields:
            typ = {"kind": str, "num_cameras": int, "width": int, "height": int}.get(
                name, float
            )
            rig_kwargs[name] = typ(value)
        elif prefix == "noise" and name in noise_fields:
            if name.startswith("score_"):
                noise_kwargs[name] = _parse_score_model(value)
            elif name in ("duplicates",):
                noise_kwargs[name] = int(value)
            elif name in ("masks",):
                noise_kwargs[name] = _coerce(value, bool)
            else:
                noise_kwargs[name] = float(value)
        else:
            raise SchemaViolation(f"unknown simulator spec key {key!r}")

    if rig_kwargs:
        scene_kwargs["rig"] = CameraRigSpec(**rig_kwargs)
    return SceneSpec(**scene_kwargs), DetectorNoiseSpec(**noise_kwargs)


def write_sim_spec(scene: SceneSpec, noise: DetectorNoiseSpec, path) -> None:
    """Echo the effective simulator spec (readable by read_sim_spec)."""
    lines = ["classes = " + ", ".join(
        f"{c.name}:{c.dim_prior[0]}:{c.dim_prior[1]}:{c.dim_prior[2]}"
        for c in scene.labels
    )]
    for f in dataclasses.fields(SceneSpec):
        if f.name in ("rig", "labels"):
            continue
        value = getattr(scene, f.name)
        if f.name == "class_mix":
            value = ", ".join(f"{name}:{weight}" for name, weight in value)
        lines.append(f"scene.{f.name} = {value}")
    for f in dataclasses.fields(CameraRigSpec):
        lines.append(f"rig.{f.name} = {getattr(scene.rig, f.name)}")
    for f in dataclasses.fields(DetectorNoiseSpec):
        value = getattr(noise, f.name)
        if isinstance(value, ScoreModel):
            value = f"{value.kind}:{value.a}:{value.b}"
        lines.append(f"noise.{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# frame bundles


def list_frames(root) -> list:
    frames_dir = Path(root) / "frames"
    if not frames_dir.is_dir():
        return []
    return sorted(p.name for p in frames_dir.iterdir() if p.is_dir())


def frame_dir(root, frame_id: str) -> Path:
    return Path(root) / "frames" / frame_id


def write_frame_bundle(root, sim) -> Path:
    """Persist one simulated frame under root/frames/<id>/."""
    frame_id = f"{sim.seed:06d}"
    out = frame_dir(root, frame_id)
    out.mkdir(parents=True, exist_ok=True)
    write_point_cloud(out / "cloud.bin", sim.cloud)
    write_calibration(out / "calib.txt", sim.calib)
    write_ground_truth(out / "gt.txt", sim.gt, frame_id)
    write_detections_3d(out / "dets3d.txt", sim.dets3d, frame_id)
    write_detections_2d(out / "dets2d.txt", sim.dets2d_per_view, frame_id)
    labels_path = Path(root) / "labels.txt"
    if not labels_path.exists():
        write_label_set(labels_path, sim.labels)
    return out


def read_frame_bundle(root, frame_id: str, labels: Optional[LabelSet] = None):
    """Load one frame: (FrameInput, GroundTruthFrame or None)."""
    folder = frame_dir(root, frame_id)
    if labels is None:
        labels_path = Path(root) / "labels.txt"
        labels = read_label_set(labels_path) if labels_path.exists() else LabelSet.default()
    calib = read_calibration(folder / "calib.txt")
    cloud = read_point_cloud(folder / "cloud.bin", frame_id)
    dets3d = read_detections_3d(folder / "dets3d.txt", labels)
    dets2d = read_detections_2d(folder / "dets2d.txt", labels, calib.num_views)
    gt_path = folder / "gt.txt"
    gt = read_ground_truth(gt_path, labels) if gt_path.exists() else None
    frame = FrameInput(
        cloud=cloud,
        calib=calib,
        dets3d=tuple(dets3d),
        dets2d_per_view=tuple(tuple(v) for v in dets2d),
        labels=labels,
    )
    return frame, gt
