"""Per-frame camera and human pose tracking against a published map snapshot."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Optional, Tuple

import torch

from ..body import BodyModel, PoseState, transform_pose
from ..errors import TrackingError
from ..geometry import invert_transform
from ..optim import Adam
from ..splat import CameraState
from ..synth import FrameBundle
from ..trace import record_losses, warn
from .config import SlamConfig
from .initialization import project_keypoints
from .losses import disparity_loss, flow_loss, keypoint_loss, weighted_l1
from .state import GaussianMap, Keyframe, PoseVariables, render_frame, visible_ids


@dataclass
class FrameDiagnostics:
    frame: int
    iterations: int = 0
    initial_loss: float = 0.0
    final_loss: float = 0.0
    best_iteration: int = 0
    flagged: bool = False
    keyframe: bool = False
    reason: str = ""


@dataclass
class TrackResult:
    camera_T: torch.Tensor
    pose: PoseState
    visible: FrozenSet[int]
    depth: torch.Tensor
    opacity: torch.Tensor
    diagnostics: FrameDiagnostics


def constant_velocity(previous: torch.Tensor, before: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Predict the next world-to-camera pose by repeating the last relative motion."""
    if before is None:
        return previous.clone()
    return previous @ invert_transform(before) @ previous


def initial_pose(bundle: FrameBundle, camera_T: torch.Tensor) -> PoseState:
    """The per-frame camera-space body prior expressed in the world frame."""
    return transform_pose(bundle.init_pose, invert_transform(camera_T))


def tracking_losses(
    bundle: FrameBundle,
    gmap: GaussianMap,
    body: BodyModel,
    variables: PoseVariables,
    intrinsics: CameraState,
    t: float,
    config: SlamConfig,
    keyframe: Optional[Keyframe] = None,
    flow: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
):
    """Weighted tracking objective at the current variables; returns (total, terms, render)."""
    weights = config.weights.tracking
    T = variables.camera_T()
    pose = variables.pose()
    camera = intrinsics.with_pose(T)
    out, _ = render_frame(gmap, body, pose, camera, t, use_field=config.use_field, cutoff=config.render_cutoff)
    pixel_weight = out.opacity.detach()
    if config.mask_human:
        pixel_weight = pixel_weight * bundle.static_mask.to(pixel_weight.dtype)

    terms: Dict[str, torch.Tensor] = {}
    terms["rgb"] = weighted_l1(out.image, bundle.rgb, pixel_weight)
    terms["disp"], _ = disparity_loss(out.depth, bundle.disparity, bundle.disparity_valid, pixel_weight)
    if gmap.avatar is not None and not config.mask_human:
        terms["sil"] = weighted_l1(out.human_silhouette, bundle.human_mask.to(pixel_weight.dtype), pixel_weight)
        uv, ahead = project_keypoints(body, pose, camera)
        terms["kp"] = keypoint_loss(uv, bundle.keypoints, bundle.keypoint_conf * ahead.to(uv.dtype))
    if keyframe is not None and flow is not None:
        flow_map, flow_valid = flow
        valid = flow_valid & keyframe.bundle.static_mask
        terms["flow"] = flow_loss(keyframe.depth, keyframe.opacity, flow_map, valid, intrinsics.K, keyframe.camera_T, T)
    total = sum(getattr(weights, name) * value for name, value in terms.items())
    return total, terms, out


def track_frame(
    bundle: FrameBundle,
    gmap: GaussianMap,
    body: BodyModel,
    intrinsics: CameraState,
    init_T: torch.Tensor,
    init_pose: PoseState,
    t: float,
    config: SlamConfig,
    keyframe: Optional[Keyframe] = None,
    flow: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
) -> TrackResult:
    """Optimize camera and body pose for one frame; the map is read-only.

    The lowest-loss iterate (the initialization included) is returned. A
    non-finite loss rolls back to the initialization and flags the frame. A
    non-finite initialization leaves nothing to roll back to and raises
    TrackingError.
    """
    if not torch.isfinite(init_T).all() or not torch.isfinite(init_pose.to_vector()).all():
        raise TrackingError("the predicted camera or body pose is not finite", bundle.index)
    track_camera = config.camera_mode == "track"
    variables = PoseVariables.create(init_T, init_pose, camera=track_camera, human=not config.mask_human)
    camera_groups = variables.param_groups(config.rates.tracking, camera=track_camera, human=False)
    human_groups = variables.param_groups(config.rates.tracking, camera=False, human=not config.mask_human)
    if config.alternate_updates:
        optimizers = [Adam(groups) for groups in (camera_groups, human_groups) if groups]
    else:
        optimizers = [Adam(camera_groups + human_groups)] if camera_groups or human_groups else []

    diagnostics = FrameDiagnostics(frame=bundle.index)
    best_value, best_it, best = float("inf"), 0, None
    for it in range(config.tracking_iterations + 1):
        for optimizer in optimizers:
            optimizer.zero_grad(set_to_none=True)
        total, terms, out = tracking_losses(bundle, gmap, body, variables, intrinsics, t, config, keyframe, flow)
        value = float(total)
        if it == 0:
            diagnostics.initial_loss = value
        if not math.isfinite(value):
            warn("tracking_nan", frame=bundle.index, iteration=it)
            diagnostics.flagged = True
            fallback = PoseVariables.create(init_T, init_pose, camera=False, human=False)
            with torch.no_grad():
                _, _, out = tracking_losses(bundle, gmap, body, fallback, intrinsics, t, config, keyframe, flow)
            best_it, best = 0, (init_T.detach().clone(), init_pose.clone(), out)
            break
        record_losses("track", it, {**{name: float(v) for name, v in terms.items()}, "total": value}, frame=bundle.index)
        if value < best_value:
            best_value, best_it = value, it
            best = (*variables.values(), out)
        if it == config.tracking_iterations or not optimizers or not total.requires_grad:
            break
        total.backward()
        if config.alternate_updates and len(optimizers) > 1:
            optimizers[it % 2].step()
        else:
            for optimizer in optimizers:
                optimizer.step()
        diagnostics.iterations = it + 1

    T, pose, out = best
    diagnostics.best_iteration = best_it
    diagnostics.final_loss = best_value if math.isfinite(best_value) else diagnostics.initial_loss
    return TrackResult(
        camera_T=T,
        pose=pose,
        visible=visible_ids(gmap, out),
        depth=out.depth.detach(),
        opacity=out.opacity.detach(),
        diagnostics=diagnostics,
    )
