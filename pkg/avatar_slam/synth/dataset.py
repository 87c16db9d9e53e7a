"""Synthetic sequences: generation from a WorldSpec and the ``ASDS`` dataset container.

Container arrays (see README for the full layout):

    frames.rgb (F, H, W, 3) uint8        frames.timestamp (F,) float64
    frames.disparity (F, H, W) float32   frames.disparity_valid (F, H, W) bool
    frames.keypoints (F, K, 2) float64   frames.keypoint_conf (F, K) float64
    frames.human_mask (F, H, W) bool     frames.flow (F, H, W, 2) float32
    frames.flow_valid (F, H, W) bool     frames.init_pose (F, 3J + 6) float64
    frames.init_beta (F, 10) float64     camera.K (3, 3) float64
    truth.camera (F, 4, 4) float64       truth.pose (F, 3J + 6) float64
    truth.beta (10,) float64             truth.joints (F, J, 3) float64
    truth.depth / truth.opacity / truth.silhouette (F, H, W) float32
    truth.scene.* / truth.avatar.*       ground-truth Gaussian sets
    body.*                               the body model

Grids are quantized to their storage precision at generation time, so a
loaded sequence equals the generated one exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from ..body import BodyModel, PoseState, body_from_payload, body_payload, pose_vertices
from ..container import read_container, write_container
from ..errors import ContractViolation
from ..geometry import project, transform_points
from ..splat import AvatarGaussians, CameraState, Gaussians3D, deform_avatar, gaussian_arrays, gaussians_from_arrays, merge, render
from ..trace import warn
from .motion import motion_sequence
from .oracles import VALID_OPACITY, disparity_oracle, flow_oracle, keypoint_oracle, mask_oracle, pose_oracle
from .world import WorldSpec, build_human, build_scene, camera_trajectory, sample_beta

DATASET_MAGIC = b"ASDS"
DATASET_VERSION = 1
FRUSTUM_FRACTION = 0.5

# oracle random streams
_DISPARITY, _KEYPOINTS, _MASK, _FLOW, _POSE = range(1, 6)


def _stream(seed: int, *keys: int) -> torch.Generator:
    state = np.random.SeedSequence([seed, *keys]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state) & 0x7FFF_FFFF_FFFF_FFFF)


def _f32(x: torch.Tensor) -> torch.Tensor:
    return x.detach().float().double()


@dataclass
class FrameBundle:
    index: int
    timestamp: float
    rgb: torch.Tensor  # (H, W, 3) in [0, 1], 8-bit levels
    disparity: torch.Tensor  # (H, W)
    disparity_valid: torch.Tensor  # (H, W) bool
    keypoints: torch.Tensor  # (K, 2) pixels
    keypoint_conf: torch.Tensor  # (K,)
    human_mask: torch.Tensor  # (H, W) bool
    flow: torch.Tensor  # (H, W, 2) from the previous frame's pixels into this frame
    flow_valid: torch.Tensor  # (H, W) bool, defined on the previous frame's pixels
    init_pose: PoseState  # camera frame

    @property
    def static_mask(self) -> torch.Tensor:
        return ~self.human_mask


@dataclass
class GroundTruth:
    cameras: torch.Tensor  # (F, 4, 4) world -> camera
    poses: List[PoseState]  # world frame
    joints: torch.Tensor  # (F, J, 3)
    depth: torch.Tensor  # (F, H, W)
    opacity: torch.Tensor  # (F, H, W)
    silhouette: torch.Tensor  # (F, H, W)
    scale_shift: Tuple[float, float]  # hidden (w*, b*)
    scene: Gaussians3D
    avatar: AvatarGaussians


@dataclass
class SyntheticSequence:
    spec: WorldSpec
    body: BodyModel
    frames: List[FrameBundle]
    truth: GroundTruth

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def camera(self) -> CameraState:
        """Intrinsics with an identity pose."""
        return self.spec.camera()

    def true_camera(self, i: int) -> CameraState:
        return self.camera.with_pose(self.truth.cameras[i])

    def flow_between(self, i: int, j: int) -> Tuple[torch.Tensor, torch.Tensor]:
        """Flow oracle from frame i's static pixels into frame j (deterministic per pair)."""
        if not (0 <= i < len(self) and 0 <= j < len(self)):
            raise ContractViolation(f"flow requested between frames {i} and {j} of a {len(self)}-frame sequence")
        truth = self.truth
        static = (truth.opacity[i] > VALID_OPACITY) & (truth.silhouette[i] <= VALID_OPACITY)
        flow, valid = flow_oracle(
            truth.depth[i],
            static,
            self.true_camera(i),
            self.true_camera(j),
            truth.depth[j],
            self.spec.noise.flow,
            _stream(self.spec.seed, _FLOW, i, j),
        )
        return _f32(flow), valid


def _in_frame_fraction(body: BodyModel, joints: torch.Tensor, camera: CameraState) -> float:
    points = transform_points(camera.T, body.keypoints(joints))
    z = points[:, 2]
    uv = project(camera.K, torch.where(z[:, None] > 1e-6, points, torch.ones_like(points)))
    inside = (z > 1e-6) & (uv[:, 0] >= -0.5) & (uv[:, 0] <= camera.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= camera.height - 0.5)
    return float(inside.double().mean())


def generate_sequence(spec: WorldSpec, body: Optional[BodyModel] = None) -> SyntheticSequence:
    """Render a ground-truth world and derive noisy prior observations for every frame."""
    generator = torch.Generator().manual_seed(spec.seed)
    if body is None:
        body = BodyModel.create(spec.body_preset, rings=spec.body_rings, ring_size=spec.body_ring_size)
    beta = sample_beta(spec, generator)
    scene = build_scene(spec, generator)
    human = build_human(body, beta, generator)
    cameras = camera_trajectory(spec)
    poses = motion_sequence(body, spec.motion, spec.frames, spec.fps, beta)
    base = spec.camera()

    joints = torch.stack([pose_vertices(body, pose)[1] for pose in poses])
    outside = sum(
        _in_frame_fraction(body, joints[i], base.with_pose(cameras[i])) < FRUSTUM_FRACTION for i in range(spec.frames)
    )
    if outside > FRUSTUM_FRACTION * spec.frames:
        raise ContractViolation(f"the body leaves the camera frustum in {outside} of {spec.frames} frames")

    depth, opacity, silhouette, rgb = [], [], [], []
    with torch.no_grad():
        for i, pose in enumerate(poses):
            out = render(merge([scene, deform_avatar(human, body, pose)]), base.with_pose(cameras[i]))
            depth.append(_f32(out.depth))
            opacity.append(_f32(out.opacity))
            silhouette.append(_f32(out.human_silhouette))
            rgb.append(torch.from_numpy(np.rint(out.image.clamp(0.0, 1.0).numpy() * 255.0)) / 255.0)

    noise = spec.noise
    truth = GroundTruth(
        cameras=cameras,
        poses=poses,
        joints=joints,
        depth=torch.stack(depth),
        opacity=torch.stack(opacity),
        silhouette=torch.stack(silhouette),
        scale_shift=(noise.disparity_scale, noise.disparity_shift),
        scene=scene,
        avatar=human,
    )
    sequence = SyntheticSequence(spec=spec, body=body, frames=[], truth=truth)

    height, width = spec.height, spec.width
    for i in range(spec.frames):
        camera = base.with_pose(cameras[i])
        disparity, disparity_valid = disparity_oracle(
            truth.depth[i],
            truth.opacity[i],
            noise.disparity,
            noise.disparity_scale,
            noise.disparity_shift,
            _stream(spec.seed, _DISPARITY, i),
            outlier_ratio=noise.disparity_outlier_ratio,
        )
        keypoints, conf = keypoint_oracle(body, truth.joints[i], camera, truth.silhouette[i], noise.keypoints, _stream(spec.seed, _KEYPOINTS, i))
        mask = mask_oracle(truth.silhouette[i], noise.mask_boundary, _stream(spec.seed, _MASK, i))
        if i > 0:
            flow, flow_valid = sequence.flow_between(i - 1, i)
        else:
            flow, flow_valid = torch.zeros(height, width, 2, dtype=torch.float64), torch.zeros(height, width, dtype=torch.bool)
        init_pose = pose_oracle(poses[i], cameras[i], noise.pose, noise.root, _stream(spec.seed, _POSE, i))
        sequence.frames.append(
            FrameBundle(
                index=i,
                timestamp=i / spec.fps,
                rgb=rgb[i],
                disparity=_f32(disparity),
                disparity_valid=disparity_valid,
                keypoints=keypoints,
                keypoint_conf=conf,
                human_mask=mask,
                flow=flow,
                flow_valid=flow_valid,
                init_pose=init_pose,
            )
        )
    if not bool(truth.silhouette.gt(VALID_OPACITY).any()):
        warn("human_never_visible", frames=spec.frames)
    return sequence


def _stack(frames: List[FrameBundle], name: str) -> torch.Tensor:
    return torch.stack([getattr(f, name) for f in frames])


def serialize_dataset(sequence: SyntheticSequence, path: Union[str, Path]):
    frames = sequence.frames
    truth = sequence.truth
    body_meta, body_arrays = body_payload(sequence.body, prefix="body.")
    arrays = {
        "frames.rgb": np.rint(_stack(frames, "rgb").numpy() * 255.0).astype(np.uint8),
        "frames.timestamp": np.array([f.timestamp for f in frames], dtype=np.float64),
        "frames.disparity": _stack(frames, "disparity").numpy().astype(np.float32),
        "frames.disparity_valid": _stack(frames, "disparity_valid").numpy(),
        "frames.keypoints": _stack(frames, "keypoints").numpy(),
        "frames.keypoint_conf": _stack(frames, "keypoint_conf").numpy(),
        "frames.human_mask": _stack(frames, "human_mask").numpy(),
        "frames.flow": _stack(frames, "flow").numpy().astype(np.float32),
        "frames.flow_valid": _stack(frames, "flow_valid").numpy(),
        "frames.init_pose": torch.stack([f.init_pose.to_vector() for f in frames]).numpy(),
        "frames.init_beta": torch.stack([f.init_pose.beta for f in frames]).numpy(),
        "camera.K": sequence.camera.K.numpy(),
        "truth.camera": truth.cameras.numpy(),
        "truth.pose": torch.stack([p.to_vector() for p in truth.poses]).numpy(),
        "truth.beta": truth.poses[0].beta.numpy(),
        "truth.joints": truth.joints.numpy(),
        "truth.depth": truth.depth.numpy().astype(np.float32),
        "truth.opacity": truth.opacity.numpy().astype(np.float32),
        "truth.silhouette": truth.silhouette.numpy().astype(np.float32),
    }
    arrays.update(gaussian_arrays(truth.scene, truth.avatar, prefix="truth."))
    arrays.update(body_arrays)
    meta = {
        "spec": sequence.spec.to_dict(),
        "frames": len(frames),
        "joints": sequence.body.joint_count,
        "scale_shift": list(truth.scale_shift),
        "body": body_meta,
    }
    write_container(path, DATASET_MAGIC, DATASET_VERSION, meta, arrays)


def load_dataset(path: Union[str, Path]) -> SyntheticSequence:
    meta, arrays = read_container(path, DATASET_MAGIC, DATASET_VERSION, kind="dataset")
    spec = WorldSpec.from_dict(meta["spec"])
    body = body_from_payload(meta["body"], arrays, prefix="body.")
    J = int(meta["joints"])

    def grid(name: str) -> torch.Tensor:
        array = arrays[name]
        if array.dtype == np.float32:
            array = array.astype(np.float64)
        return torch.from_numpy(np.ascontiguousarray(array))

    rgb = grid("frames.rgb").double() / 255.0
    init_pose = grid("frames.init_pose")
    init_beta = grid("frames.init_beta")
    timestamps = arrays["frames.timestamp"]
    disparity, disparity_valid = grid("frames.disparity"), grid("frames.disparity_valid")
    keypoints, conf = grid("frames.keypoints"), grid("frames.keypoint_conf")
    mask, flow, flow_valid = grid("frames.human_mask"), grid("frames.flow"), grid("frames.flow_valid")
    frames = [
        FrameBundle(
            index=i,
            timestamp=float(timestamps[i]),
            rgb=rgb[i],
            disparity=disparity[i],
            disparity_valid=disparity_valid[i],
            keypoints=keypoints[i],
            keypoint_conf=conf[i],
            human_mask=mask[i],
            flow=flow[i],
            flow_valid=flow_valid[i],
            init_pose=PoseState.from_vector(init_pose[i], J, beta=init_beta[i]),
        )
        for i in range(int(meta["frames"]))
    ]
    beta = grid("truth.beta")
    scene, avatar = gaussians_from_arrays(arrays, prefix="truth.")
    truth = GroundTruth(
        cameras=grid("truth.camera"),
        poses=[PoseState.from_vector(v, J, beta=beta.clone()) for v in grid("truth.pose")],
        joints=grid("truth.joints"),
        depth=grid("truth.depth"),
        opacity=grid("truth.opacity"),
        silhouette=grid("truth.silhouette"),
        scale_shift=(float(meta["scale_shift"][0]), float(meta["scale_shift"][1])),
        scene=scene,
        avatar=avatar,
    )
    return SyntheticSequence(spec=spec, body=body, frames=frames, truth=truth)
