"""Canonical-space avatar Gaussians and their deformation into the world."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch

from ..body import BodyModel, PoseState, apply_transform, forward_kinematics, skinning_transform
from ..errors import ContractViolation
from ..field import DeformationField, FieldOutput, query_field
from ..geometry import quat_multiply, quat_normalize
from .gaussians import Gaussians3D


@dataclass
class AvatarGaussians:
    mu: torch.Tensor  # (N, 3) canonical centers, fixed after seeding
    delta_mu: torch.Tensor  # (N, 3) learnable center offsets
    rot: torch.Tensor  # (N, 4)
    scale: torch.Tensor  # (N, 3) log-scales
    opacity_logit: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)
    lbs_offset: torch.Tensor  # (N, J) learnable, added to the base log-weights
    base_log_weights: torch.Tensor  # (N, J) log of the seeding vertex weights (-inf where zero)
    init_vertex_id: torch.Tensor  # (N,) long

    POSITION_FIELD = "delta_mu"
    LEARNABLE = ("delta_mu", "rot", "scale", "opacity_logit", "color", "lbs_offset")

    def __len__(self) -> int:
        return self.mu.shape[0]

    def lbs_weights(self) -> torch.Tensor:
        return torch.softmax(self.base_log_weights + self.lbs_offset, dim=-1)

    def canonical_centers(self) -> torch.Tensor:
        return self.mu + self.delta_mu

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def row_fields(self):
        return [f.name for f in fields(self)]

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.LEARNABLE}

    def requires_grad_(self, flag: bool = True) -> "AvatarGaussians":
        for name in self.LEARNABLE:
            getattr(self, name).requires_grad_(flag)
        return self

    def select(self, index: torch.Tensor) -> "AvatarGaussians":
        return AvatarGaussians(**{name: getattr(self, name)[index] for name in self.row_fields()})

    def detached(self) -> "AvatarGaussians":
        return AvatarGaussians(**{name: getattr(self, name).detach().clone() for name in self.row_fields()})

    def validate(self, vertex_count: int):
        if bool((self.init_vertex_id < 0).any()) or bool((self.init_vertex_id >= vertex_count).any()):
            raise ContractViolation("init_vertex_id out of range for the body model")
        sums = self.lbs_weights().sum(dim=-1)
        if bool(((sums - 1.0).abs() > 1e-9).any()):
            raise ContractViolation("avatar skinning weights do not sum to one")


def deform_avatar(
    avatar: AvatarGaussians,
    body: BodyModel,
    pose: PoseState,
    field: Optional[DeformationField] = None,
    t: float = 0.0,
    field_output: Optional[FieldOutput] = None,
) -> Gaussians3D:
    """World-frame human Gaussians for ``pose`` at normalized time ``t``.

    Centers: mu + delta_mu + field offset, then skinned. Rotations compose the
    field rotation on the right; the blended skinning matrix is carried as the
    Gaussian frame since it need not be orthonormal. Colors are scaled by the
    occlusion factor and clamped to [0, 1] before compositing.
    """
    weights = avatar.lbs_weights()
    if field_output is None:
        field_output = query_field(field, avatar.mu, t, pose.theta, weights)
    deformed = avatar.mu + avatar.delta_mu + field_output.delta_mu_prime
    rot = quat_multiply(quat_normalize(avatar.rot), field_output.delta_R)
    color = (field_output.delta_c * avatar.color).clamp(0.0, 1.0)

    P = skinning_transform(weights, forward_kinematics(body, pose), check=False)
    return Gaussians3D(
        mu=apply_transform(P, deformed),
        rot=rot,
        scale=avatar.scale,
        opacity_logit=avatar.opacity_logit,
        color=color,
        human=torch.ones(len(avatar), dtype=torch.bool),
        frame=P[:, :3, :3],
    )

