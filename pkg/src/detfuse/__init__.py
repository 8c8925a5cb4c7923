"""LiDAR/RGB detection fusion (late matching + frustum recovery) with a scene simulator and eval harness."""

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
    Point,
    PointCloud,
    StereoPair,
    validate_frame,
)
from .evaluation import EvalReport, GroundTruthBox, GroundTruthFrame, MatchCriterion, evaluate_frames
from .pipeline import FusedDetection, StageReport, run_ablation_grid, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "Box2D",
    "Box3D",
    "CalibrationSet",
    "CameraModel",
    "ClassLabel",
    "Detection2D",
    "Detection3D",
    "EvalReport",
    "FrameInput",
    "FusedDetection",
    "GroundTruthBox",
    "GroundTruthFrame",
    "LabelSet",
    "Mask",
    "MatchCriterion",
    "PipelineConfig",
    "Point",
    "PointCloud",
    "StageReport",
    "StereoPair",
    "evaluate_frames",
    "run_ablation_grid",
    "run_pipeline",
    "validate_frame",
    "__version__",
]
