"""Monocular SLAM over a static Gaussian scene and an articulated Gaussian avatar."""

from .body import BodyModel, PoseState
from .errors import (
    ContractViolation,
    DatasetError,
    DegenerateInputError,
    DivergenceError,
    InitializationError,
    TrackingError,
    TruncatedFile,
    VersionMismatch,
)
from .evaluation import ate_rmse, mpjpe_family, psnr_ssim, summarize_run
from .matchers import expect
from .slam import PipelineResult, SlamConfig, run_pipeline, run_pipeline_async
from .synth import SyntheticSequence, WorldSpec, generate_sequence, load_dataset, serialize_dataset
from .trace import KeyframeEvent, LossStep, RunEvent, RunTrace, get_current_trace, set_current_trace

__all__ = [
    "BodyModel",
    "PoseState",
    "ContractViolation",
    "DatasetError",
    "DegenerateInputError",
    "DivergenceError",
    "InitializationError",
    "TrackingError",
    "TruncatedFile",
    "VersionMismatch",
    "ate_rmse",
    "mpjpe_family",
    "psnr_ssim",
    "summarize_run",
    "expect",
    "PipelineResult",
    "SlamConfig",
    "run_pipeline",
    "run_pipeline_async",
    "SyntheticSequence",
    "WorldSpec",
    "generate_sequence",
    "load_dataset",
    "serialize_dataset",
    "KeyframeEvent",
    "LossStep",
    "RunEvent",
    "RunTrace",
    "get_current_trace",
    "set_current_trace",
]
