"""Adaptive density control: clone small and split large high-gradient Gaussians, prune transparent ones."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, TypeVar, Union

import torch

from ..geometry import quat_to_matrix
from ..optim import Adam
from .avatar import AvatarGaussians
from .gaussians import Gaussians3D

GaussianSet = TypeVar("GaussianSet", Gaussians3D, AvatarGaussians)


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 2e-4
    prune_opacity: float = 5e-3
    percent_dense: float = 0.01
    split_children: int = 2
    split_shrink: float = 1.6
    interval: int = 150


@dataclass
class DensifyResult:
    gaussians: Union[Gaussians3D, AvatarGaussians]
    source_rows: torch.Tensor  # row of the input each output row was copied from
    moment_rows: torch.Tensor  # as source_rows, -1 for newly created rows
    cloned: int = 0
    split: int = 0
    pruned: int = 0


class GradientStats:
    """Running mean of screen-space positional gradient norms, per Gaussian."""

    def __init__(self, count: int):
        self.total = torch.zeros(count, dtype=torch.float64)
        self.hits = torch.zeros(count, dtype=torch.float64)

    def __len__(self) -> int:
        return self.total.shape[0]

    def add(self, norms: torch.Tensor, visible: torch.Tensor):
        norms = norms.detach()
        self.total[visible] += norms[visible]
        self.hits[visible] += 1.0

    def mean(self) -> torch.Tensor:
        return self.total / self.hits.clamp_min(1.0)

    def reset(self, count: Optional[int] = None):
        count = len(self) if count is None else count
        self.total = torch.zeros(count, dtype=torch.float64)
        self.hits = torch.zeros(count, dtype=torch.float64)


def densify_and_prune(
    gaussians: GaussianSet,
    stats: GradientStats,
    extent: float,
    config: DensifyConfig = DensifyConfig(),
    scene_only: bool = False,
    optimizer: Optional[Adam] = None,
    seed: int = 0,
) -> DensifyResult:
    """Clone or split Gaussians whose mean positional gradient reaches the threshold, then prune.

    A Gaussian is split when its largest scale exceeds ``percent_dense * extent``
    and cloned otherwise. Split children draw their centers from the parent's
    distribution and shrink their scales by ``split_shrink``. Rows whose
    opacity falls below ``prune_opacity`` are removed afterwards. With
    ``scene_only`` an avatar set is returned untouched. When an optimizer is
    given its learnable tensors are swapped for the new ones, carrying Adam
    moments for surviving rows and zeroing them for new rows.
    """
    n = len(gaussians)
    identity = torch.arange(n)
    if scene_only and isinstance(gaussians, AvatarGaussians):
        return DensifyResult(gaussians, identity, identity)

    with torch.no_grad():
        grad = stats.mean()
        largest = torch.exp(gaussians.scale).max(dim=1).values
        over = grad >= config.grad_threshold
        split = over & (largest > config.percent_dense * extent)
        clone = over & ~split

        kept = torch.nonzero(~split).squeeze(1)
        cloned = torch.nonzero(clone).squeeze(1)
        parents = torch.nonzero(split).squeeze(1).repeat(config.split_children)
        source = torch.cat([kept, cloned, parents])
        fresh = torch.cat([kept, torch.full((cloned.numel() + parents.numel(),), -1, dtype=torch.long)])

        rows = {name: getattr(gaussians, name).detach()[source].clone() for name in gaussians.row_fields()}
        if parents.numel():
            children = slice(kept.numel() + cloned.numel(), None)
            generator = torch.Generator().manual_seed(seed)
            std = torch.exp(gaussians.scale.detach()[parents])
            sample = torch.randn(parents.numel(), 3, generator=generator, dtype=std.dtype) * std
            offset = (quat_to_matrix(gaussians.rot.detach()[parents]) @ sample[:, :, None])[..., 0]
            rows[gaussians.POSITION_FIELD][children] += offset
            rows["scale"][children] -= math.log(config.split_shrink)

        alive = torch.sigmoid(rows["opacity_logit"]) >= config.prune_opacity
        rows = {name: value[alive] for name, value in rows.items()}
        source, fresh = source[alive], fresh[alive]

    for name in gaussians.LEARNABLE:
        old = getattr(gaussians, name)
        new = rows[name].requires_grad_(old.requires_grad)
        rows[name] = new
        if optimizer is not None and any(p is old for p in optimizer.params()):
            optimizer.replace_param(old, new, fresh)

    return DensifyResult(
        gaussians=replace(gaussians, **rows),
        source_rows=source,
        moment_rows=fresh,
        cloned=int(cloned.numel()),
        split=int(split.sum()),
        pruned=int((~alive).sum()),
    )
