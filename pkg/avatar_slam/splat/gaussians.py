"""Scene/human Gaussian containers and the pinhole camera state."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Dict, Optional, Sequence

import torch

from ..errors import ContractViolation
from ..geometry import camera_center, quat_to_matrix

DTYPE = torch.float64


@dataclass
class CameraState:
    K: torch.Tensor  # (3, 3)
    T: torch.Tensor  # (4, 4) world -> camera
    width: int
    height: int

    def __post_init__(self):
        K = self.K.detach()
        if K.shape != (3, 3) or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ContractViolation("K must be upper-triangular with K[2, 2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ContractViolation("focal lengths must be positive")
        R = self.T.detach()[:3, :3]
        if (R @ R.T - torch.eye(3, dtype=R.dtype)).abs().max() > 1e-6:
            raise ContractViolation("camera rotation is not orthonormal")

    @classmethod
    def pinhole(cls, width: int, height: int, focal: float, T: Optional[torch.Tensor] = None) -> "CameraState":
        K = torch.tensor([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]], dtype=DTYPE)
        return cls(K=K, T=torch.eye(4, dtype=DTYPE) if T is None else T, width=width, height=height)

    def with_pose(self, T: torch.Tensor) -> "CameraState":
        return replace(self, T=T)

    @property
    def center(self) -> torch.Tensor:
        return camera_center(self.T)

    @property
    def focal(self) -> float:
        return float(self.K[0, 0])


@dataclass
class Gaussians3D:
    mu: torch.Tensor  # (N, 3)
    rot: torch.Tensor  # (N, 4) quaternion (w, x, y, z)
    scale: torch.Tensor  # (N, 3) log-scales
    opacity_logit: torch.Tensor  # (N,)
    color: torch.Tensor  # (N, 3)
    human: torch.Tensor  # (N,) bool
    frame: Optional[torch.Tensor] = None  # (N, 3, 3) linear part applied on top of rot (skinning)

    POSITION_FIELD = "mu"
    LEARNABLE = ("mu", "rot", "scale", "opacity_logit", "color")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def empty(cls, dtype: torch.dtype = DTYPE) -> "Gaussians3D":
        return cls(
            mu=torch.zeros(0, 3, dtype=dtype),
            rot=torch.zeros(0, 4, dtype=dtype),
            scale=torch.zeros(0, 3, dtype=dtype),
            opacity_logit=torch.zeros(0, dtype=dtype),
            color=torch.zeros(0, 3, dtype=dtype),
            human=torch.zeros(0, dtype=torch.bool),
        )

    @classmethod
    def isotropic(
        cls,
        mu: torch.Tensor,
        radius,
        opacity: float,
        color: torch.Tensor,
        human: bool = False,
    ) -> "Gaussians3D":
        n = mu.shape[0]
        radius = torch.as_tensor(radius, dtype=mu.dtype).expand(n)
        rot = torch.zeros(n, 4, dtype=mu.dtype)
        rot[:, 0] = 1.0
        return cls(
            mu=mu,
            rot=rot,
            scale=torch.log(radius)[:, None].expand(n, 3).clone(),
            opacity_logit=torch.full((n,), float(torch.logit(torch.tensor(opacity, dtype=DTYPE))), dtype=mu.dtype),
            color=color.expand(n, 3).clone(),
            human=torch.full((n,), human, dtype=torch.bool),
        )

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    def row_fields(self):
        return [f.name for f in fields(self) if f.name != "frame"]

    def parameters(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.LEARNABLE}

    def requires_grad_(self, flag: bool = True) -> "Gaussians3D":
        for name in self.LEARNABLE:
            getattr(self, name).requires_grad_(flag)
        return self

    def covariance_factor(self) -> torch.Tensor:
        """L with Sigma = L L^T, L = frame R(q) diag(exp(scale))."""
        L = quat_to_matrix(self.rot) * torch.exp(self.scale)[:, None, :]
        if self.frame is not None:
            L = self.frame @ L
        return L

    def covariance(self) -> torch.Tensor:
        L = self.covariance_factor()
        return L @ L.transpose(-1, -2)

    def select(self, index: torch.Tensor) -> "Gaussians3D":
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            kwargs[f.name] = None if value is None else value[index]
        return Gaussians3D(**kwargs)

    def detach(self) -> "Gaussians3D":
        kwargs = {f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).detach()) for f in fields(self)}
        return Gaussians3D(**kwargs)

    def validate(self):
        if not torch.allclose(self.rot.norm(dim=-1), torch.ones(len(self), dtype=self.rot.dtype), atol=1e-6):
            raise ContractViolation("Gaussian quaternions must be normalized")
        s = torch.exp(self.scale)
        if bool(((s <= 1e-6) | (s >= 1e2)).any()):
            raise ContractViolation("Gaussian scales must lie in (1e-6, 1e2)")


def merge(parts: Sequence[Gaussians3D]) -> Gaussians3D:
    """Concatenate Gaussian sets in order; a missing skinning frame becomes identity."""
    parts = [p for p in parts if p is not None]
    if not parts:
        return Gaussians3D.empty()
    any_frame = any(p.frame is not None for p in parts)
    frames = []
    for p in parts:
        if any_frame:
            frames.append(p.frame if p.frame is not None else torch.eye(3, dtype=p.mu.dtype).expand(len(p), 3, 3))
    return Gaussians3D(
        mu=torch.cat([p.mu for p in parts]),
        rot=torch.cat([p.rot for p in parts]),
        scale=torch.cat([p.scale for p in parts]),
        opacity_logit=torch.cat([p.opacity_logit for p in parts]),
        color=torch.cat([p.color for p in parts]),
        human=torch.cat([p.human for p in parts]),
        frame=torch.cat(frames) if any_frame else None,
    )
