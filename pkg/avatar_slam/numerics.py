"""Finite-difference oracle shared by gradient checks."""
from __future__ import annotations

from typing import Callable

import torch


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    """Jacobian of fn at x by central differences; shape (*fn(x).shape, *x.shape)."""
    x = x.detach().clone()
    with torch.no_grad():
        out_shape = fn(x).shape
        flat = x.reshape(-1)
        columns = []
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn(x).reshape(-1).clone()
            flat[i] = orig - step
            minus = fn(x).reshape(-1).clone()
            flat[i] = orig
            columns.append((plus - minus) / (2.0 * step))
    jac = torch.stack(columns, dim=-1)
    return jac.reshape(*out_shape, *x.shape)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> float:
    """max |a - n| / max(|n|, floor) over all entries."""
    scale = numeric.abs().max().clamp_min(floor)
    return float((analytic - numeric).abs().max() / scale)
