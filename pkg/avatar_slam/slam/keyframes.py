"""Keyframe selection and the local keyframe window."""
from __future__ import annotations

from typing import AbstractSet, List, Optional, Sequence, Tuple

import torch

from ..geometry import camera_center
from .config import KeyframeConfig
from .state import FrameState


def covisibility(a: AbstractSet[int], b: AbstractSet[int]) -> float:
    """Intersection over union of two visible-Gaussian id sets (0 when both are empty)."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def camera_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((camera_center(a) - camera_center(b)).norm())


def keyframe_decision(frame: FrameState, last: FrameState, config: KeyframeConfig) -> Tuple[bool, str]:
    """Whether ``frame`` becomes a keyframe, with the deciding criterion.

    A frame closer than the minimum interval to the last keyframe never
    qualifies; otherwise camera motion, mean joint motion and low covisibility
    are checked in that order.
    """
    if frame.timestamp - last.timestamp < config.min_interval:
        return False, "interval"
    if camera_distance(frame.camera_T, last.camera_T) > config.camera_motion:
        return True, "camera"
    if float((frame.joints - last.joints).norm(dim=-1).mean()) > config.joint_motion:
        return True, "human"
    if covisibility(frame.visible, last.visible) < config.covisibility:
        return True, "covisibility"
    return False, "redundant"


def update_window(
    window: Sequence[FrameState],
    new: FrameState,
    config: KeyframeConfig,
) -> Tuple[List[FrameState], Optional[FrameState]]:
    """Append ``new`` and, above capacity, evict one older keyframe.

    The evicted keyframe is the one with the lowest overlap with the newest if
    that overlap is below ``removal_overlap``; otherwise the keyframe whose
    camera has the largest summed distance to all others. The newest keyframe
    is never evicted.
    """
    updated = list(window) + [new]
    if len(updated) <= config.window_size:
        return updated, None
    older = updated[:-1]
    overlaps = [covisibility(kf.visible, new.visible) for kf in older]
    lowest = min(range(len(older)), key=lambda i: overlaps[i])
    if overlaps[lowest] < config.removal_overlap:
        victim = older[lowest]
    else:
        centers = torch.stack([camera_center(kf.camera_T) for kf in updated])
        spread = torch.cdist(centers, centers).sum(dim=1)[:-1]
        victim = older[int(torch.argmax(spread))]
    return [kf for kf in updated if kf is not victim], victim
