"""Parametric body motions for synthetic worlds and field pretraining."""
from __future__ import annotations

import math
from typing import Dict, List, Optional

import torch

from ..body import SHAPE_DIM, BodyModel, PoseState
from ..errors import ContractViolation

MOTIONS = ("walk", "arm_swing", "squat", "turn")
PELVIS_HEIGHT = 0.95


def _set(theta: torch.Tensor, index: Dict[str, int], name: str, axis: int, value: float):
    j = index.get(name)
    if j is not None:
        theta[j, axis] = value


def motion_pose(body: BodyModel, motion: str, t: float, beta: Optional[torch.Tensor] = None) -> PoseState:
    """World pose at time ``t`` seconds. The body stands on y = 0 facing +z."""
    if motion not in MOTIONS:
        raise ContractViolation(f"unknown motion {motion!r}; expected one of {list(MOTIONS)}")
    index = {name: j for j, name in enumerate(body.joint_names)}
    theta = torch.zeros(body.joint_count, 3, dtype=torch.float64)
    root_rotation = torch.zeros(3, dtype=torch.float64)
    root_translation = torch.tensor([0.0, PELVIS_HEIGHT, 0.0], dtype=torch.float64)

    if motion == "walk":
        phase = 2.0 * math.pi * 1.0 * t
        swing = math.sin(phase)
        for side, sign in (("l", 1.0), ("r", -1.0)):
            _set(theta, index, f"{side}_hip", 0, -0.4 * sign * swing)
            _set(theta, index, f"{side}_knee", 0, 0.25 * (1.0 - sign * math.cos(phase)))
            _set(theta, index, f"{side}_shoulder", 0, 0.3 * sign * swing)
            _set(theta, index, f"{side}_elbow", 0, -0.2)
        root_translation[0] = 0.4 * math.sin(0.5 * t)
        root_translation[1] += 0.02 * math.cos(2.0 * phase)
        root_rotation[1] = 0.3 * math.cos(0.5 * t)
    elif motion == "arm_swing":
        phase = 2.0 * math.pi * 0.75 * t
        lift = 0.7 * math.sin(phase)
        _set(theta, index, "l_shoulder", 2, lift)
        _set(theta, index, "r_shoulder", 2, -lift)
        _set(theta, index, "l_elbow", 2, 0.3 * (1.0 + math.sin(phase)))
        _set(theta, index, "r_elbow", 2, -0.3 * (1.0 + math.sin(phase)))
    elif motion == "squat":
        depth = 0.5 * (1.0 - math.cos(2.0 * math.pi * 0.4 * t))
        for side in ("l", "r"):
            _set(theta, index, f"{side}_hip", 0, -0.9 * depth)
            _set(theta, index, f"{side}_knee", 0, 1.5 * depth)
            _set(theta, index, f"{side}_ankle", 0, -0.6 * depth)
            _set(theta, index, f"{side}_shoulder", 0, -0.8 * depth)
        root_translation[1] -= 0.25 * depth
        root_translation[2] = -0.1 * depth
    else:  # turn
        root_rotation[1] = 0.8 * math.sin(2.0 * math.pi * 0.25 * t)
        _set(theta, index, "l_shoulder", 2, 0.2 * math.sin(2.0 * math.pi * 0.5 * t))
        _set(theta, index, "r_shoulder", 2, -0.2 * math.sin(2.0 * math.pi * 0.5 * t))

    if beta is None:
        beta = torch.zeros(SHAPE_DIM, dtype=torch.float64)
    return PoseState(theta=theta, beta=beta.clone(), root_rotation=root_rotation, root_translation=root_translation)


def motion_sequence(body: BodyModel, motion: str, frames: int, fps: float, beta: Optional[torch.Tensor] = None) -> List[PoseState]:
    return [motion_pose(body, motion, i / fps, beta) for i in range(frames)]


def motion_library(body: BodyModel, samples_per_motion: int = 16, duration: float = 4.0) -> torch.Tensor:
    """(K, J, 3) local poses sampled evenly from every motion."""
    thetas = []
    for motion in MOTIONS:
        for k in range(samples_per_motion):
            thetas.append(motion_pose(body, motion, duration * k / samples_per_motion).theta)
    return torch.stack(thetas)
