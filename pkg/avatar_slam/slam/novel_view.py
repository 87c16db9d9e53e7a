"""Re-render scoring for keyframes and held-out frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch

from ..body import BodyModel, PoseState
from ..evaluation import RenderScores, mean_scores, psnr_ssim
from ..optim import Adam
from ..splat import CameraState
from ..synth import FrameBundle, SyntheticSequence
from ..trace import record_losses
from .config import SlamConfig
from .initialization import project_keypoints
from .losses import keypoint_loss, weighted_l1
from .pipeline import PipelineResult
from .state import GaussianMap, PoseVariables, render_frame

WHITE = (1.0, 1.0, 1.0)


@dataclass
class NovelViewResult:
    frame: int
    pose: PoseState
    scores: RenderScores
    image: torch.Tensor
    human_image: torch.Tensor


def frame_time(result: PipelineResult, timestamp: float) -> float:
    duration = result.timestamps[-1] if result.timestamps else 0.0
    if duration <= 0:
        return 0.0
    return min(max(timestamp / duration, 0.0), 1.0)


def fit_test_pose(
    bundle: FrameBundle,
    gmap: GaussianMap,
    body: BodyModel,
    camera: CameraState,
    pose: PoseState,
    t: float,
    config: SlamConfig,
) -> PoseState:
    """Optimize only the body pose of a held-out frame against the frozen map."""
    variables = PoseVariables.create(camera.T, pose, camera=False, human=True)
    groups = variables.param_groups(config.rates.tracking, camera=False, human=True)
    for group in groups:
        group["lr"] = config.rates.novel_view
    optimizer = Adam(groups)
    weights = config.weights.tracking
    mask = bundle.human_mask.to(camera.T.dtype)
    best_value, best = float("inf"), pose.clone()
    for it in range(config.novel_view_iterations + 1):
        optimizer.zero_grad(set_to_none=True)
        current = variables.pose()
        out, _ = render_frame(gmap, body, current, camera, t, use_field=config.use_field, cutoff=config.render_cutoff)
        uv, ahead = project_keypoints(body, current, camera)
        terms = {
            "rgb": weighted_l1(out.image, bundle.rgb),
            "sil": weighted_l1(out.human_silhouette, mask),
            "kp": keypoint_loss(uv, bundle.keypoints, bundle.keypoint_conf * ahead.to(uv.dtype)),
        }
        total = sum(getattr(weights, name) * value for name, value in terms.items())
        value = float(total)
        if not torch.isfinite(total):
            break
        record_losses("novel_view", it, {**{k: float(v) for k, v in terms.items()}, "total": value}, frame=bundle.index)
        if value < best_value:
            best_value, best = value, variables.values()[1]
        if it == config.novel_view_iterations:
            break
        total.backward()
        optimizer.step()
    return best


def score_frame(
    bundle: FrameBundle,
    gmap: GaussianMap,
    body: BodyModel,
    camera: CameraState,
    pose: PoseState,
    t: float,
    config: SlamConfig,
):
    """Whole-image scores and human-only scores (avatar alone on white)."""
    with torch.no_grad():
        out, _ = render_frame(gmap, body, pose, camera, t, use_field=config.use_field, cutoff=config.render_cutoff)
        human, _ = render_frame(
            gmap, body, pose, camera, t, use_field=config.use_field, cutoff=config.render_cutoff,
            background=torch.tensor(WHITE, dtype=camera.T.dtype), scene=False,
        )
    image = out.image.clamp(0.0, 1.0)
    human_image = human.image.clamp(0.0, 1.0)
    whole = psnr_ssim(image, bundle.rgb)
    if gmap.avatar is not None:
        white = torch.ones_like(bundle.rgb)
        reference = torch.where(bundle.human_mask[..., None], bundle.rgb, white)
        alone = psnr_ssim(human_image, reference)
    else:
        alone = {"psnr_db": float("nan"), "ssim": float("nan")}
    scores = RenderScores(whole["psnr_db"], whole["ssim"], alone["psnr_db"], alone["ssim"])
    return scores, image, human_image


def evaluate_keyframes(result: PipelineResult, sequence: SyntheticSequence, config: Optional[SlamConfig] = None) -> List[NovelViewResult]:
    """Re-render every keyframe at its refined poses."""
    config = config or SlamConfig()
    out = []
    for kf in result.keyframes:
        camera = sequence.camera.with_pose(kf.camera_T)
        scores, image, human = score_frame(kf.bundle, result.map, sequence.body, camera, kf.pose, frame_time(result, kf.timestamp), config)
        out.append(NovelViewResult(kf.frame_id, kf.pose, scores, image, human))
    return out


def evaluate_novel_views(
    result: PipelineResult,
    sequence: SyntheticSequence,
    config: Optional[SlamConfig] = None,
    frames: Optional[Sequence[int]] = None,
) -> List[NovelViewResult]:
    """Fit the body pose of non-keyframes with the map frozen, then score the renders."""
    config = config or SlamConfig()
    keyframes = set(result.keyframe_ids)
    if frames is None:
        frames = [i for i in range(len(sequence)) if i not in keyframes]
    out = []
    for index in frames:
        bundle = sequence.frames[index]
        camera = sequence.camera.with_pose(result.cameras[index])
        t = frame_time(result, bundle.timestamp)
        pose = result.poses[index]
        if result.map.avatar is not None and not config.mask_human:
            pose = fit_test_pose(bundle, result.map, sequence.body, camera, pose, t, config)
        scores, image, human = score_frame(bundle, result.map, sequence.body, camera, pose, t, config)
        out.append(NovelViewResult(index, pose, scores, image, human))
    return out


def average_scores(results: Sequence[NovelViewResult]) -> RenderScores:
    return mean_scores([r.scores for r in results])
