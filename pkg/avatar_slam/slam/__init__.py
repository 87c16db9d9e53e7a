from .config import (
    BundleRates,
    GaussianRates,
    KeyframeConfig,
    LearningRates,
    LossWeights,
    MappingWeights,
    PoseRates,
    PRESETS,
    SlamConfig,
    TrackingWeights,
)
from .initialization import InitResult, init_first_frame, ransac_scale_shift, refine_keypoint_pose
from .keyframes import camera_distance, covisibility, keyframe_decision, update_window
from .mapping import Mapper, MapSnapshot, StepResult
from .novel_view import NovelViewResult, average_scores, evaluate_keyframes, evaluate_novel_views, fit_test_pose
from .pipeline import PipelineResult, run_pipeline, run_pipeline_async
from .state import FrameState, GaussianMap, Keyframe, PoseVariables, render_frame
from .tracking import FrameDiagnostics, TrackResult, constant_velocity, track_frame

__all__ = [
    "BundleRates",
    "FrameDiagnostics",
    "FrameState",
    "GaussianMap",
    "GaussianRates",
    "InitResult",
    "Keyframe",
    "KeyframeConfig",
    "LearningRates",
    "LossWeights",
    "MapSnapshot",
    "Mapper",
    "MappingWeights",
    "NovelViewResult",
    "PRESETS",
    "PipelineResult",
    "PoseRates",
    "PoseVariables",
    "SlamConfig",
    "StepResult",
    "TrackResult",
    "TrackingWeights",
    "average_scores",
    "camera_distance",
    "constant_velocity",
    "covisibility",
    "evaluate_keyframes",
    "evaluate_novel_views",
    "fit_test_pose",
    "init_first_frame",
    "keyframe_decision",
    "ransac_scale_shift",
    "refine_keypoint_pose",
    "render_frame",
    "run_pipeline",
    "run_pipeline_async",
    "track_frame",
    "update_window",
]
