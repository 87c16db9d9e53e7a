"""Initial Gaussian sets: scene from back-projected depth, avatar from body vertices."""
from __future__ import annotations

import math
from typing import Optional

import torch

from ..body import SHAPE_DIM, BodyModel
from ..errors import ContractViolation
from ..geometry import backproject, invert_transform, transform_points
from .avatar import AvatarGaussians
from .gaussians import CameraState, Gaussians3D

SCENE_OPACITY = 0.5
AVATAR_OPACITY = 0.9
AVATAR_SCALE = 0.015
AVATAR_COLOR = 0.5


def seed_scene_from_depth(
    depth: torch.Tensor,
    static_mask: torch.Tensor,
    camera: CameraState,
    image: torch.Tensor,
    stride: int = 4,
    footprint: float = 0.5,
) -> Gaussians3D:
    """One isotropic Gaussian per sampled static pixel with positive depth.

    The radius is ``footprint`` times the world size of a ``stride``-pixel cell
    at the pixel's depth.
    """
    if stride < 1:
        raise ContractViolation("seeding stride must be at least 1")
    height, width = depth.shape
    v, u = torch.meshgrid(torch.arange(0, height, stride), torch.arange(0, width, stride), indexing="ij")
    v, u = v.reshape(-1), u.reshape(-1)
    d = depth[v, u]
    keep = static_mask[v, u].bool() & torch.isfinite(d) & (d > 0)
    if not bool(keep.any()):
        return Gaussians3D.empty(depth.dtype)
    v, u, d = v[keep], u[keep], d[keep]

    uv = torch.stack([u, v], dim=-1).to(depth.dtype)
    points = transform_points(invert_transform(camera.T), backproject(camera.K, uv, d))
    radius = d * stride / camera.K[0, 0] * footprint
    return Gaussians3D.isotropic(points, radius, SCENE_OPACITY, image[v, u].to(depth.dtype))


def seed_avatar(
    body: BodyModel,
    beta: Optional[torch.Tensor] = None,
    replicates: int = 5,
    noise: float = 0.01,
    seed: int = 0,
) -> AvatarGaussians:
    """``replicates`` Gaussians per canonical vertex, jittered by N(0, noise^2)."""
    if replicates < 1:
        raise ContractViolation("replicates must be at least 1")
    if beta is None:
        beta = torch.zeros(SHAPE_DIM, dtype=body.rest_vertices.dtype)
    vertices = body.shaped(beta).rest_vertices
    ids = torch.arange(body.vertex_count).repeat(replicates)
    n = ids.shape[0]
    dtype = vertices.dtype
    generator = torch.Generator().manual_seed(seed)
    centers = vertices[ids] + noise * torch.randn(n, 3, generator=generator, dtype=dtype)
    rot = torch.zeros(n, 4, dtype=dtype)
    rot[:, 0] = 1.0
    return AvatarGaussians(
        mu=centers,
        delta_mu=torch.zeros(n, 3, dtype=dtype),
        rot=rot,
        scale=torch.full((n, 3), math.log(AVATAR_SCALE), dtype=dtype),
        opacity_logit=torch.full((n,), math.log(AVATAR_OPACITY / (1.0 - AVATAR_OPACITY)), dtype=dtype),
        color=torch.full((n, 3), AVATAR_COLOR, dtype=dtype),
        lbs_offset=torch.zeros(n, body.joint_count, dtype=dtype),
        base_log_weights=torch.log(body.vertex_lbs[ids]),
        init_vertex_id=ids,
    )
