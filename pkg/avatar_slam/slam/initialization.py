"""First-frame initialization: keypoint pose refinement, robust disparity alignment and seeding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from ..body import BodyModel, PoseState, transform_pose
from ..errors import InitializationError
from ..geometry import invert_transform, project, transform_points
from ..optim import Adam
from ..splat import AvatarGaussians, CameraState, Gaussians3D, deform_avatar, render, seed_avatar, seed_scene_from_depth
from ..synth import FrameBundle
from ..trace import record_losses, warn
from .config import SlamConfig
from .losses import CONFIDENT, keypoint_loss, solve_scale_shift
from .state import posed_joints

MESH_OPACITY = 0.5


@dataclass
class InitResult:
    pose: PoseState  # world frame
    scale_shift: Tuple[float, float]
    scene: Gaussians3D
    avatar: AvatarGaussians
    inlier_ratio: float
    flagged: bool = False


def project_keypoints(body: BodyModel, pose: PoseState, camera: CameraState) -> Tuple[torch.Tensor, torch.Tensor]:
    """Image positions of the body keypoints and whether each lies in front of the camera."""
    points = transform_points(camera.T, body.keypoints(posed_joints(body, pose)))
    ahead = points[:, 2].detach() > 1e-6
    points = torch.where(ahead[:, None], points, torch.ones_like(points))
    return project(camera.K, points), ahead


def refine_keypoint_pose(
    bundle: FrameBundle,
    body: BodyModel,
    pose: PoseState,
    camera: CameraState,
    iterations: int = 100,
    lr: float = 1e-3,
) -> Tuple[PoseState, bool]:
    """Refine the local joint rotations against the detected keypoints; returns (pose, flagged).

    With too few confident detections the pose is returned unchanged and flagged.
    """
    confident = int((bundle.keypoint_conf > CONFIDENT).sum())
    if confident == 0:
        warn("no_confident_keypoints", frame=bundle.index)
        return pose.clone(), True
    theta = pose.theta.detach().clone().requires_grad_(True)
    optimizer = Adam([{"params": [theta], "lr": lr, "name": "theta"}])
    for it in range(iterations):
        optimizer.zero_grad(set_to_none=True)
        current = PoseState(theta=theta, beta=pose.beta, root_rotation=pose.root_rotation, root_translation=pose.root_translation)
        uv, ahead = project_keypoints(body, current, camera)
        loss = keypoint_loss(uv, bundle.keypoints, bundle.keypoint_conf * ahead.to(uv.dtype))
        if not torch.isfinite(loss):
            warn("keypoint_refinement_nan", frame=bundle.index, iteration=it)
            return pose.clone(), True
        loss.backward()
        optimizer.step()
        record_losses("init", it, {"kp": float(loss)}, frame=bundle.index)
    refined = pose.clone()
    refined.theta = theta.detach().clone()
    return refined, False


def ransac_scale_shift(
    disparity: torch.Tensor,
    target: torch.Tensor,
    iterations: int = 200,
    threshold: float = 0.05,
    generator: Optional[torch.Generator] = None,
) -> Tuple[float, float, torch.Tensor]:
    """Robust (w, b) with w * disparity + b ~ target from two-point hypotheses.

    A pair is an inlier when its residual is within ``threshold`` of the target
    (relative disparity). The best hypothesis is refit by least squares on its
    inliers and the inlier set recomputed. Returns (w, b, inlier mask).
    """
    d = disparity.detach().reshape(-1)
    y = target.detach().reshape(-1)
    n = d.numel()
    if n < 2:
        return 1.0, 0.0, torch.zeros(n, dtype=torch.bool)
    i = torch.randint(n, (iterations,), generator=generator)
    j = torch.randint(n - 1, (iterations,), generator=generator)
    j = j + (j >= i).long()
    dd = d[i] - d[j]
    ok = dd.abs() > 1e-12
    w = (y[i] - y[j]) / torch.where(ok, dd, torch.ones_like(dd))
    b = y[i] - w * d[i]
    ok = ok & (w > 0)
    residual = (w[:, None] * d[None] + b[:, None] - y[None]).abs()
    inliers = residual <= threshold * y.abs()[None]
    counts = torch.where(ok, inliers.sum(dim=1), torch.full_like(ok, -1, dtype=torch.long))
    best = int(torch.argmax(counts))
    if int(counts[best]) < 2:
        return 1.0, 0.0, torch.zeros(n, dtype=torch.bool)
    w_fit, b_fit = solve_scale_shift(d[inliers[best]], y[inliers[best]])
    final = (w_fit * d + b_fit - y).abs() <= threshold * y.abs()
    return float(w_fit), float(b_fit), final


def init_first_frame(
    bundle: FrameBundle,
    body: BodyModel,
    camera: CameraState,
    config: Optional[SlamConfig] = None,
) -> InitResult:
    """Refine the first body pose, align the disparity prior to the rendered body and seed both Gaussian sets.

    ``camera`` carries the first frame's world-to-camera pose (identity unless
    the camera trajectory is supplied). Raises InitializationError when the
    disparity alignment finds too few inliers.
    """
    config = config or SlamConfig()
    generator = torch.Generator().manual_seed(config.seed)
    pose = transform_pose(bundle.init_pose, invert_transform(camera.T))
    flagged = False
    confident = int((bundle.keypoint_conf > CONFIDENT).sum())
    if confident < config.min_confident_keypoints:
        warn("few_confident_keypoints", frame=bundle.index, count=confident)
        flagged = True
    pose, refine_flag = refine_keypoint_pose(bundle, body, pose, camera, config.init_keypoint_iterations, config.rates.init_keypoints)
    flagged = flagged or refine_flag

    avatar = seed_avatar(body, beta=pose.beta, replicates=config.avatar_replicates, seed=config.seed)
    with torch.no_grad():
        mesh = render(deform_avatar(avatar, body, pose), camera, cutoff=config.render_cutoff)
    pixels = (mesh.opacity > MESH_OPACITY) & bundle.disparity_valid & bundle.human_mask
    if int(pixels.sum()) < 2:
        raise InitializationError("the body covers no pixels with a valid disparity prior", bundle.index)
    w, b, inliers = ransac_scale_shift(
        bundle.disparity[pixels],
        1.0 / mesh.depth[pixels],
        iterations=config.ransac_iterations,
        threshold=config.ransac_threshold,
        generator=generator,
    )
    ratio = float(inliers.double().mean())
    if ratio < config.ransac_min_inliers:
        warn("ransac_failed", frame=bundle.index, inlier_ratio=ratio)
        raise InitializationError(f"disparity alignment found {ratio:.0%} inliers (need {config.ransac_min_inliers:.0%})", bundle.index)

    aligned = w * bundle.disparity + b
    static = bundle.static_mask & bundle.disparity_valid & (aligned > 0)
    depth = torch.where(static, 1.0 / aligned.clamp_min(1e-6), torch.zeros_like(aligned))
    scene = seed_scene_from_depth(depth, static, camera, bundle.rgb, stride=config.seed_stride)
    return InitResult(pose=pose, scale_shift=(w, b), scene=scene, avatar=avatar, inlier_ratio=ratio, flagged=flagged)
