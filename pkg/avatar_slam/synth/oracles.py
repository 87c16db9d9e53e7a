"""Noisy stand-ins for the pretrained priors: monocular disparity, 2D keypoints,
human mask, optical flow and per-frame camera-space body pose."""
from __future__ import annotations

from typing import Tuple

import numpy as np
import torch
from scipy import ndimage

from ..body import BodyModel, PoseState, transform_pose
from ..geometry import backproject, invert_transform, matrix_to_axis_angle, project, so3_exp, transform_points
from ..splat import CameraState

VALID_OPACITY = 0.5
CONFIDENT = 0.9
UNCERTAIN = 0.2
OCCLUSION_TOLERANCE = 0.05


def disparity_oracle(
    depth: torch.Tensor,
    opacity: torch.Tensor,
    sigma: float,
    scale: float,
    shift: float,
    generator: torch.Generator,
    outlier_ratio: float = 0.0,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Affine-ambiguous disparity: ``scale * d + shift`` equals the true inverse depth up to noise.

    Returns the disparity map and its validity mask (rendered surface present,
    disparity positive). Outliers replace a random fraction of valid pixels.
    """
    valid = (opacity > VALID_OPACITY) & (depth > 0)
    inverse = torch.where(valid, 1.0 / depth.clamp_min(1e-6), torch.zeros_like(depth))
    noise = torch.randn(depth.shape, generator=generator, dtype=depth.dtype)
    disparity = (inverse * (1.0 + sigma * noise) - shift) / scale
    if outlier_ratio > 0:
        pick = torch.rand(depth.shape, generator=generator, dtype=depth.dtype) < outlier_ratio
        hi = float(disparity[valid].max()) if bool(valid.any()) else 1.0
        junk = hi * (0.1 + 2.0 * torch.rand(depth.shape, generator=generator, dtype=depth.dtype))
        disparity = torch.where(pick & valid, junk, disparity)
    valid = valid & (disparity > 0)
    return torch.where(valid, disparity, torch.zeros_like(disparity)), valid


def keypoint_oracle(
    body: BodyModel,
    joints: torch.Tensor,
    camera: CameraState,
    human_silhouette: torch.Tensor,
    sigma: float,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Projected keypoints with pixel noise; confidence drops for joints out of frame or hidden."""
    points = transform_points(camera.T, body.keypoints(joints))
    z = points[:, 2]
    uv = project(camera.K, torch.where(z[:, None] > 1e-6, points, torch.ones_like(points)))
    height, width = human_silhouette.shape
    u = uv[:, 0].round().long()
    v = uv[:, 1].round().long()
    inside = (z > 1e-6) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    seen = torch.zeros_like(inside)
    seen[inside] = human_silhouette[v[inside], u[inside]] > VALID_OPACITY
    conf = torch.where(seen, torch.full_like(z, CONFIDENT), torch.full_like(z, UNCERTAIN))
    noisy = uv + sigma * torch.randn(uv.shape, generator=generator, dtype=uv.dtype)
    return noisy, conf


def mask_oracle(human_silhouette: torch.Tensor, boundary: float, generator: torch.Generator) -> torch.Tensor:
    """Thresholded silhouette with the boundary grown or shrunk by up to ``boundary`` pixels."""
    mask = (human_silhouette.detach() > VALID_OPACITY).numpy()
    if boundary > 0:
        steps = int(torch.randint(0, int(np.ceil(boundary)) + 1, (), generator=generator))
        grow = bool(torch.rand((), generator=generator) < 0.5)
        if steps > 0:
            op = ndimage.binary_dilation if grow else ndimage.binary_erosion
            mask = op(mask, iterations=steps)
    return torch.from_numpy(np.ascontiguousarray(mask))


def flow_oracle(
    depth_i: torch.Tensor,
    static_i: torch.Tensor,
    camera_i: CameraState,
    camera_j: CameraState,
    depth_j: torch.Tensor,
    sigma: float,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Displacement (H, W, 2) of frame i's static pixels into frame j, plus validity.

    Pixels that leave frame j or are hidden there (depth disagreement) are invalid.
    """
    height, width = depth_i.shape
    v, u = torch.meshgrid(torch.arange(height), torch.arange(width), indexing="ij")
    uv = torch.stack([u, v], dim=-1).to(depth_i.dtype)
    points = backproject(camera_i.K, uv, depth_i)
    world = transform_points(invert_transform(camera_i.T), points.reshape(-1, 3))
    in_j = transform_points(camera_j.T, world)
    z = in_j[:, 2]
    target = project(camera_j.K, torch.where(z[:, None] > 1e-6, in_j, torch.ones_like(in_j))).reshape(height, width, 2)
    z = z.reshape(height, width)
    tu = target[..., 0].round().long()
    tv = target[..., 1].round().long()
    valid = static_i.bool() & (depth_i > 0) & (z > 1e-6) & (tu >= 0) & (tu < width) & (tv >= 0) & (tv < height)
    seen = torch.zeros_like(valid)
    seen[valid] = (depth_j[tv[valid], tu[valid]] - z[valid]).abs() <= OCCLUSION_TOLERANCE * z[valid]
    flow = target - uv
    flow = flow + sigma * torch.randn(flow.shape, generator=generator, dtype=flow.dtype)
    return torch.where(seen[..., None], flow, torch.zeros_like(flow)), seen


def pose_oracle(pose_world: PoseState, camera_T: torch.Tensor, sigma_pose: float, sigma_root: float, generator: torch.Generator) -> PoseState:
    """Camera-frame body pose with axis-angle and root noise; shape is passed through."""
    pose = transform_pose(pose_world, camera_T)
    dtype = pose.theta.dtype
    pose.theta = pose.theta + sigma_pose * torch.randn(pose.theta.shape, generator=generator, dtype=dtype)
    tilt = sigma_pose * torch.randn(3, generator=generator, dtype=dtype)
    pose.root_rotation = matrix_to_axis_angle(so3_exp(tilt) @ so3_exp(pose.root_rotation))
    pose.root_translation = pose.root_translation + sigma_root * torch.randn(3, generator=generator, dtype=dtype)
    return pose
