"""Optimizable pose variables, the Gaussian map and keyframe records."""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from typing import FrozenSet, List, Optional, Tuple

import torch

from ..body import BodyModel, PoseState, forward_kinematics
from ..field import DeformationField, FieldOutput, query_field
from ..geometry import retract_pose
from ..splat import AvatarGaussians, CameraState, Gaussians3D, RenderOutput, deform_avatar, merge, render
from ..synth import FrameBundle
from .config import PoseRates


@dataclass
class PoseVariables:
    """Camera tangent offsets around ``base_T`` plus the body pose, as leaf tensors."""

    base_T: torch.Tensor
    cam_rot: torch.Tensor
    cam_trans: torch.Tensor
    theta: torch.Tensor
    root_rotation: torch.Tensor
    root_translation: torch.Tensor
    beta: torch.Tensor

    @classmethod
    def create(cls, T: torch.Tensor, pose: PoseState, camera: bool = True, human: bool = True) -> "PoseVariables":
        dtype = T.dtype
        return cls(
            base_T=T.detach().clone(),
            cam_rot=torch.zeros(3, dtype=dtype, requires_grad=camera),
            cam_trans=torch.zeros(3, dtype=dtype, requires_grad=camera),
            theta=pose.theta.detach().clone().requires_grad_(human),
            root_rotation=pose.root_rotation.detach().clone().requires_grad_(human),
            root_translation=pose.root_translation.detach().clone().requires_grad_(human),
            beta=pose.beta.detach().clone(),
        )

    def camera_T(self) -> torch.Tensor:
        if not self.cam_rot.requires_grad:
            return self.base_T
        return retract_pose(self.base_T, self.cam_rot, self.cam_trans)

    def pose(self) -> PoseState:
        return PoseState(theta=self.theta, beta=self.beta, root_rotation=self.root_rotation, root_translation=self.root_translation)

    def camera_parameters(self) -> List[torch.Tensor]:
        return [self.cam_rot, self.cam_trans]

    def human_parameters(self) -> List[torch.Tensor]:
        return [self.theta, self.root_rotation, self.root_translation]

    def param_groups(self, rates: PoseRates, prefix: str = "", camera: bool = True, human: bool = True) -> List[dict]:
        groups = []
        if camera:
            groups += [
                {"params": [self.cam_rot], "lr": rates.camera_rotation, "name": f"{prefix}cam_rot"},
                {"params": [self.cam_trans], "lr": rates.camera_translation, "name": f"{prefix}cam_trans"},
            ]
        if human:
            groups += [
                {"params": [self.root_rotation, self.root_translation], "lr": rates.root, "name": f"{prefix}root"},
                {"params": [self.theta], "lr": rates.local_pose, "name": f"{prefix}theta"},
            ]
        return groups

    def values(self) -> Tuple[torch.Tensor, PoseState]:
        """Detached copies of the current camera pose and body pose."""
        with torch.no_grad():
            T = self.camera_T().detach().clone()
        return T, self.pose().clone()


@dataclass
class GaussianMap:
    scene: Gaussians3D
    avatar: Optional[AvatarGaussians]
    field: Optional[DeformationField]
    scene_ids: torch.Tensor  # (Ns,) persistent ids
    avatar_ids: torch.Tensor  # (Na,)
    next_id: int
    version: int = 0

    @classmethod
    def create(cls, scene: Gaussians3D, avatar: Optional[AvatarGaussians], field: Optional[DeformationField] = None) -> "GaussianMap":
        ns = len(scene)
        na = 0 if avatar is None else len(avatar)
        return cls(
            scene=scene,
            avatar=avatar,
            field=field,
            scene_ids=torch.arange(ns),
            avatar_ids=torch.arange(ns, ns + na),
            next_id=ns + na,
        )

    def fresh_ids(self, count: int) -> torch.Tensor:
        ids = torch.arange(self.next_id, self.next_id + count)
        self.next_id += count
        return ids

    def merged_ids(self) -> torch.Tensor:
        return torch.cat([self.scene_ids, self.avatar_ids])

    def snapshot(self) -> "GaussianMap":
        """Immutable copy for readers: cloned tensors without gradients and a frozen field copy."""
        scene = Gaussians3D(**{f.name: None if getattr(self.scene, f.name) is None else getattr(self.scene, f.name).detach().clone() for f in fields(self.scene)})
        avatar = None if self.avatar is None else self.avatar.detached()
        field = None
        if self.field is not None:
            recorded, self.field._recorded = self.field._recorded, None
            try:
                field = copy.deepcopy(self.field)
            finally:
                self.field._recorded = recorded
            field.requires_grad_(False)
        return GaussianMap(
            scene=scene,
            avatar=avatar,
            field=field,
            scene_ids=self.scene_ids.clone(),
            avatar_ids=self.avatar_ids.clone(),
            next_id=self.next_id,
            version=self.version,
        )


@dataclass
class FrameState:
    frame_id: int
    timestamp: float
    camera_T: torch.Tensor
    joints: torch.Tensor  # (J, 3) world
    visible: FrozenSet[int]


@dataclass
class Keyframe(FrameState):
    bundle: FrameBundle
    pose: PoseState
    depth: torch.Tensor  # render at the tracked pose
    opacity: torch.Tensor


def posed_joints(body: BodyModel, pose: PoseState) -> torch.Tensor:
    return forward_kinematics(body, pose).joints


def render_frame(
    gmap: GaussianMap,
    body: BodyModel,
    pose: PoseState,
    camera: CameraState,
    t: float,
    use_field: bool = True,
    background: Optional[torch.Tensor] = None,
    cutoff: Optional[float] = 3.0,
    scene: bool = True,
) -> Tuple[RenderOutput, Optional[FieldOutput]]:
    """Render scene and deformed avatar together; the field output is returned for regularizers."""
    parts = [gmap.scene] if scene else []
    field_output = None
    if gmap.avatar is not None:
        field = gmap.field if use_field else None
        field_output = query_field(field, gmap.avatar.mu, t, pose.theta, gmap.avatar.lbs_weights())
        parts.append(deform_avatar(gmap.avatar, body, pose, field_output=field_output))
    return render(merge(parts), camera, background=background, cutoff=cutoff), field_output


def visible_ids(gmap: GaussianMap, output: RenderOutput) -> FrozenSet[int]:
    return frozenset(gmap.merged_ids()[output.visibility].tolist())
