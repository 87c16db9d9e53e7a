from .dataset import (
    DATASET_MAGIC,
    DATASET_VERSION,
    FrameBundle,
    GroundTruth,
    SyntheticSequence,
    generate_sequence,
    load_dataset,
    serialize_dataset,
)
from .motion import MOTIONS, motion_library, motion_pose, motion_sequence
from .oracles import disparity_oracle, flow_oracle, keypoint_oracle, mask_oracle, pose_oracle
from .world import NoiseConfig, WorldSpec, build_human, build_scene, camera_trajectory

__all__ = [
    "DATASET_MAGIC",
    "DATASET_VERSION",
    "FrameBundle",
    "GroundTruth",
    "MOTIONS",
    "NoiseConfig",
    "SyntheticSequence",
    "WorldSpec",
    "build_human",
    "build_scene",
    "camera_trajectory",
    "disparity_oracle",
    "flow_oracle",
    "generate_sequence",
    "keypoint_oracle",
    "load_dataset",
    "mask_oracle",
    "motion_library",
    "motion_pose",
    "motion_sequence",
    "pose_oracle",
    "serialize_dataset",
]
