"""World layouts: textured scene presets, camera paths and the ground-truth human."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

from ..body import SHAPE_DIM, BodyModel
from ..config import from_dict, to_dict
from ..errors import ContractViolation
from ..geometry import look_at, matrix_to_quaternion, quat_normalize
from ..splat import AvatarGaussians, CameraState, Gaussians3D, merge, seed_avatar
from .motion import MOTIONS

PRESETS = ("room", "street")
CAMERA_PATHS = ("orbit", "static", "dolly")
LOOK_TARGET = (0.0, 1.0, 0.0)
MAX_CAMERA_STEP = 0.5
HUMAN_SCALE = 0.04
HUMAN_OPACITY = 0.95
PLANE_OPACITY = 0.95
PLANE_THICKNESS = 0.01


@dataclass
class NoiseConfig:
    disparity: float = 0.02  # relative, in disparity space
    keypoints: float = 2.0  # pixels
    pose: float = 0.05  # radians per joint axis
    root: float = 0.02  # meters
    flow: float = 0.5  # pixels
    mask_boundary: float = 1.0  # pixels of dilation/erosion
    disparity_scale: float = 2.0  # hidden w*
    disparity_shift: float = 0.02  # hidden b*
    disparity_outlier_ratio: float = 0.0

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(
            disparity=0.0,
            keypoints=0.0,
            pose=0.0,
            root=0.0,
            flow=0.0,
            mask_boundary=0.0,
            disparity_scale=1.0,
            disparity_shift=0.0,
        )


@dataclass
class WorldSpec:
    preset: str = "room"
    frames: int = 100
    width: int = 160
    height: int = 120
    focal: float = 150.0
    fps: float = 30.0
    seed: int = 0
    motion: str = "walk"
    camera_path: str = "orbit"
    camera_distance: float = 3.0
    camera_height: float = 1.4
    camera_sweep: float = 0.6
    body_preset: str = "mini16"
    body_rings: int = 8
    body_ring_size: int = 8
    beta_scale: float = 0.5
    clutter: Optional[int] = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ContractViolation(f"unknown world preset {self.preset!r}; expected one of {list(PRESETS)}")
        if self.motion not in MOTIONS:
            raise ContractViolation(f"unknown motion {self.motion!r}; expected one of {list(MOTIONS)}")
        if self.camera_path not in CAMERA_PATHS:
            raise ContractViolation(f"unknown camera path {self.camera_path!r}; expected one of {list(CAMERA_PATHS)}")
        if self.frames < 1 or self.width < 1 or self.height < 1:
            raise ContractViolation("frames and image size must be positive")
        if self.focal <= 0 or self.fps <= 0:
            raise ContractViolation("focal length and fps must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WorldSpec":
        return from_dict(cls, data)

    def to_dict(self) -> Dict[str, Any]:
        return to_dict(self)

    def camera(self) -> CameraState:
        return CameraState.pinhole(self.width, self.height, self.focal)


# --- scene presets ---


def _texture(points: torch.Tensor, generator: torch.Generator, waves: int = 3) -> torch.Tensor:
    """Spatially correlated colors: a few random sinusoids per channel plus per-Gaussian jitter."""
    n = points.shape[0]
    color = torch.full((n, 3), 0.5, dtype=points.dtype)
    for _ in range(waves):
        direction = torch.randn(3, 3, generator=generator, dtype=points.dtype)
        direction = direction / direction.norm(dim=1, keepdim=True)
        wavenumber = 3.0 + 9.0 * torch.rand(3, 1, generator=generator, dtype=points.dtype)
        phase = 2.0 * math.pi * torch.rand(3, generator=generator, dtype=points.dtype)
        color = color + (0.7 / waves) * torch.sin(points @ (wavenumber * direction).T + phase)
    color = color + 0.1 * (torch.rand(n, 3, generator=generator, dtype=points.dtype) - 0.5)
    return color.clamp(0.05, 0.95)


def _plane(origin: Sequence[float], u: Sequence[float], v: Sequence[float], spacing: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Grid centers over the parallelogram origin + a u + b v, and the plane's (u, v, n) frame."""
    origin, u, v = (torch.tensor(x, dtype=torch.float64) for x in (origin, u, v))
    nu = max(1, int(round(float(u.norm()) / spacing)))
    nv = max(1, int(round(float(v.norm()) / spacing)))
    a = (torch.arange(nu, dtype=torch.float64) + 0.5) / nu
    b = (torch.arange(nv, dtype=torch.float64) + 0.5) / nv
    A, B = torch.meshgrid(a, b, indexing="ij")
    centers = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
    eu = u / u.norm()
    ev = v / v.norm()
    frame = torch.stack([eu, ev, torch.linalg.cross(eu, ev)], dim=1)
    return centers, frame


def _surface(planes, spacing: float, generator: torch.Generator) -> Gaussians3D:
    parts = []
    for origin, u, v in planes:
        centers, frame = _plane(origin, u, v, spacing)
        n = centers.shape[0]
        g = Gaussians3D.isotropic(centers, 0.5 * spacing, PLANE_OPACITY, _texture(centers, generator))
        g.rot = matrix_to_quaternion(frame).expand(n, 4).clone()
        g.scale[:, 2] = math.log(PLANE_THICKNESS)
        parts.append(g)
    return merge(parts)


def _clutter(count: int, low: Sequence[float], high: Sequence[float], keep_clear: Tuple[float, float], generator: torch.Generator) -> Gaussians3D:
    """Random anisotropic blobs inside a box, outside the corridor |x| < keep_clear[0], z > keep_clear[1]."""
    low = torch.tensor(low, dtype=torch.float64)
    high = torch.tensor(high, dtype=torch.float64)
    accepted: List[torch.Tensor] = []
    total = 0
    while total < count:
        candidates = low + (high - low) * torch.rand(4 * count, 3, generator=generator, dtype=torch.float64)
        ok = ~((candidates[:, 0].abs() < keep_clear[0]) & (candidates[:, 2] > keep_clear[1]))
        accepted.append(candidates[ok])
        total += int(ok.sum())
    mu = torch.cat(accepted)[:count]
    g = Gaussians3D.isotropic(mu, 1.0, 0.5, torch.zeros(3, dtype=torch.float64))
    g.rot = quat_normalize(torch.randn(count, 4, generator=generator, dtype=torch.float64))
    g.scale = torch.log(0.03 + 0.12 * torch.rand(count, 3, generator=generator, dtype=torch.float64))
    g.opacity_logit = torch.logit(0.6 + 0.35 * torch.rand(count, generator=generator, dtype=torch.float64))
    g.color = 0.1 + 0.8 * torch.rand(count, 3, generator=generator, dtype=torch.float64)
    return g


def build_scene(spec: WorldSpec, generator: torch.Generator) -> Gaussians3D:
    """Static Gaussians of the chosen preset; y is up and the floor is y = 0."""
    if spec.preset == "room":
        spacing = 0.25
        planes = [
            ((-3.0, 0.0, -3.0), (6.0, 0.0, 0.0), (0.0, 0.0, 7.0)),  # floor
            ((-3.0, 3.0, -3.0), (0.0, 0.0, 7.0), (6.0, 0.0, 0.0)),  # ceiling
            ((-3.0, 0.0, -3.0), (0.0, 3.0, 0.0), (6.0, 0.0, 0.0)),  # back wall
            ((-3.0, 0.0, -3.0), (0.0, 0.0, 7.0), (0.0, 3.0, 0.0)),  # left wall
            ((3.0, 0.0, -3.0), (0.0, 3.0, 0.0), (0.0, 0.0, 7.0)),  # right wall
        ]
        clutter = 200 if spec.clutter is None else spec.clutter
        box = ((-2.8, 0.05, -2.8), (2.8, 2.5, 2.0))
        keep_clear = (1.1, -1.0)
    else:
        spacing = 0.35
        planes = [
            ((-4.0, 0.0, -8.0), (8.0, 0.0, 0.0), (0.0, 0.0, 12.0)),  # ground
            ((-4.0, 0.0, -8.0), (0.0, 0.0, 12.0), (0.0, 4.0, 0.0)),
            ((4.0, 0.0, -8.0), (0.0, 4.0, 0.0), (0.0, 0.0, 12.0)),
        ]
        clutter = 500 if spec.clutter is None else spec.clutter
        box = ((-3.8, 0.05, -8.0), (3.8, 3.0, 2.0))
        keep_clear = (1.1, -1.5)
    parts = [_surface(planes, spacing, generator)]
    if clutter > 0:
        parts.append(_clutter(clutter, box[0], box[1], keep_clear, generator))
    return merge(parts)


def build_human(body: BodyModel, beta: torch.Tensor, generator: torch.Generator) -> AvatarGaussians:
    """One Gaussian per body vertex, colored by a per-joint palette blended with the skinning weights."""
    avatar = seed_avatar(body, beta=beta, replicates=1, noise=0.0)
    palette = 0.2 + 0.7 * torch.rand(body.joint_count, 3, generator=generator, dtype=torch.float64)
    avatar.color = body.vertex_lbs @ palette
    avatar.scale = torch.full_like(avatar.scale, math.log(HUMAN_SCALE))
    avatar.opacity_logit = torch.full_like(avatar.opacity_logit, math.log(HUMAN_OPACITY / (1.0 - HUMAN_OPACITY)))
    return avatar


def sample_beta(spec: WorldSpec, generator: torch.Generator) -> torch.Tensor:
    return spec.beta_scale * torch.randn(SHAPE_DIM, generator=generator, dtype=torch.float64)


def camera_trajectory(spec: WorldSpec) -> torch.Tensor:
    """(F, 4, 4) world-to-camera poses; the camera starts on the +z side looking at the human."""
    target = torch.tensor(LOOK_TARGET, dtype=torch.float64)
    poses = []
    for i in range(spec.frames):
        s = i / max(spec.frames - 1, 1)
        if spec.camera_path == "orbit":
            angle = spec.camera_sweep * (s - 0.5)
            eye = [spec.camera_distance * math.sin(angle), spec.camera_height, spec.camera_distance * math.cos(angle)]
        elif spec.camera_path == "dolly":
            eye = [0.0, spec.camera_height, spec.camera_distance - spec.camera_sweep * s]
        else:
            eye = [0.0, spec.camera_height, spec.camera_distance]
        poses.append(look_at(torch.tensor(eye, dtype=torch.float64), target))
    poses = torch.stack(poses)
    if spec.frames > 1:
        centers = -(poses[:, :3, :3].transpose(-1, -2) @ poses[:, :3, 3:])[..., 0]
        step = (centers[1:] - centers[:-1]).norm(dim=-1).max()
        if step >= MAX_CAMERA_STEP:
            raise ContractViolation(f"camera moves {float(step):.3f} m between frames (limit {MAX_CAMERA_STEP} m)")
    return poses
