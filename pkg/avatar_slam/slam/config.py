"""Pipeline configuration: loss weights, keyframe thresholds, learning rates and budgets."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional

from ..config import from_dict, to_dict
from ..errors import ContractViolation
from ..field import HashFieldConfig
from ..splat import DensifyConfig

CAMERA_MODES = ("track", "fixed")
REFINEMENT_MODES = ("final", "distributed", "none")


@dataclass
class TrackingWeights:
    rgb: float = 1.0
    flow: float = 1.0
    disp: float = 0.001
    sil: float = 0.1
    kp: float = 0.0001


@dataclass
class MappingWeights:
    rgb: float = 1.0
    sil: float = 1.0
    depth: float = 0.001
    lbs: float = 100.0
    center: float = 10.0
    deform: float = 0.001


@dataclass
class LossWeights:
    tracking: TrackingWeights = field(default_factory=TrackingWeights)
    mapping: MappingWeights = field(default_factory=MappingWeights)

    def __post_init__(self):
        for group in (self.tracking, self.mapping):
            for f in fields(group):
                if getattr(group, f.name) < 0:
                    raise ContractViolation(f"loss weight {f.name} must be nonnegative")


@dataclass
class KeyframeConfig:
    min_interval: float = 0.1  # seconds
    camera_motion: float = 0.05  # meters
    joint_motion: float = 0.1  # meters, mean over joints
    covisibility: float = 0.9
    window_size: int = 10
    removal_overlap: float = 0.3

    def __post_init__(self):
        if self.min_interval < 0 or self.camera_motion <= 0 or self.joint_motion <= 0:
            raise ContractViolation("keyframe thresholds must be positive")
        if not 0 < self.covisibility < 1 or not 0 < self.removal_overlap < 1:
            raise ContractViolation("covisibility and removal overlap must lie in (0, 1)")
        if self.window_size < 2:
            raise ContractViolation("the keyframe window must hold at least two keyframes")


@dataclass
class PoseRates:
    camera_rotation: float = 3e-3
    camera_translation: float = 1e-3
    root: float = 1e-2
    local_pose: float = 1e-3


@dataclass
class BundleRates(PoseRates):
    """Keyframe pose refinement inside mapping runs at reduced rates."""

    camera_rotation: float = 1.5e-3
    camera_translation: float = 5e-4
    root: float = 1e-4
    local_pose: float = 1e-5


@dataclass
class GaussianRates:
    position: float = 1.6e-4
    rotation: float = 1e-3
    scale: float = 5e-3
    opacity: float = 5e-2
    color: float = 2.5e-3
    lbs: float = 1e-3


@dataclass
class LearningRates:
    tracking: PoseRates = field(default_factory=PoseRates)
    mapping: BundleRates = field(default_factory=BundleRates)
    gaussians: GaussianRates = field(default_factory=GaussianRates)
    deformation: float = 1e-4
    init_keypoints: float = 1e-3
    novel_view: float = 1e-3


@dataclass
class SlamConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    rates: LearningRates = field(default_factory=LearningRates)
    deformation: HashFieldConfig = field(default_factory=HashFieldConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    use_field: bool = True
    field_pretrain_iterations: int = 5000
    init_keypoint_iterations: int = 100
    ransac_iterations: int = 200
    ransac_threshold: float = 0.05  # relative disparity
    ransac_min_inliers: float = 0.3
    avatar_replicates: int = 5
    min_confident_keypoints: int = 8
    seed_stride: int = 4
    tracking_iterations: int = 100
    mapping_iterations: int = 60
    sync_every: int = 20
    past_keyframes: int = 2
    refine_epochs: int = 100
    distributed_epochs: int = 10
    novel_view_iterations: int = 100
    render_cutoff: Optional[float] = 3.0
    camera_mode: str = "track"
    refinement_mode: str = "final"
    alternate_updates: bool = False
    mask_human: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.camera_mode not in CAMERA_MODES:
            raise ContractViolation(f"camera_mode must be one of {list(CAMERA_MODES)}, got {self.camera_mode!r}")
        if self.refinement_mode not in REFINEMENT_MODES:
            raise ContractViolation(f"refinement_mode must be one of {list(REFINEMENT_MODES)}, got {self.refinement_mode!r}")
        for name in ("tracking_iterations", "mapping_iterations", "sync_every", "ransac_iterations", "seed_stride"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be at least 1")
        if not 0 < self.ransac_threshold < 1 or not 0 < self.ransac_min_inliers <= 1:
            raise ContractViolation("RANSAC threshold and minimum inlier ratio must lie in (0, 1]")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SlamConfig":
        return from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)

    @classmethod
    def preset(cls, name: str, overrides: Optional[Dict[str, Any]] = None) -> "SlamConfig":
        """A named preset with ``overrides`` merged on top, nested keys included."""
        if name not in PRESETS:
            raise ContractViolation(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
        return from_dict(cls, merge_overrides(PRESETS[name], overrides or {}))


# Lighter field and shorter pretraining for short sequences.
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": {
        "deformation": {"levels": 8, "table_size": 2 ** 14, "mlp_width": 64, "mlp_hidden_layers": 2},
        "field_pretrain_iterations": 200,
        "densify": {"interval": 100},
    },
}


def merge_overrides(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        else:
            merged[key] = value
    return merged
