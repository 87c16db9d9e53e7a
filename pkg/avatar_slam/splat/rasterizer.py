"""Differentiable software rasterizer for merged scene/human Gaussian sets.

Gaussians are projected with the first-order (EWA) covariance approximation,
expanded into per-pixel fragments, globally sorted by (pixel, camera depth)
and alpha-composited front to back. Compositing runs through a custom
autograd function with an analytic backward; everything upstream of it
(projection, covariance, alpha) is differentiated by torch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import torch

from ..errors import ContractViolation
from ..trace import warn
from .gaussians import CameraState, Gaussians3D

ALPHA_MAX = 0.99
TRANSMITTANCE_MIN = 1e-4
DILATION = 0.3
MAX_CONDITION = 1e12
VISIBLE_ALPHA = 1.0 / 255.0
DEPTH_EPS = 1e-8
NEAR_PLANE = 0.01

# color(3), opacity, depth, human, scene
_FEATURES = 7


@dataclass
class FragmentRecord:
    gaussian: torch.Tensor  # (F,) index into the input set, composite order
    pixel: torch.Tensor  # (F,) flat pixel index
    alpha: torch.Tensor  # (F,)
    transmittance: torch.Tensor  # (F,) before the fragment


@dataclass
class RenderOutput:
    image: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    opacity: torch.Tensor  # (H, W)
    human_silhouette: torch.Tensor  # (H, W)
    scene_silhouette: torch.Tensor  # (H, W)
    visibility: torch.Tensor  # (N,) bool
    skipped: torch.Tensor  # (N,) bool, degenerate projected covariance
    means2d: torch.Tensor  # (N, 2) pixel coordinates, zero for culled Gaussians
    fragments: Optional[FragmentRecord] = None

    @property
    def size(self) -> Tuple[int, int]:
        return self.opacity.shape[0], self.opacity.shape[1]


def _segment_first(pixel: torch.Tensor) -> torch.Tensor:
    """For each fragment of a pixel-sorted list, the position of its pixel's first fragment."""
    is_start = torch.ones_like(pixel, dtype=torch.bool)
    is_start[1:] = pixel[1:] != pixel[:-1]
    starts = torch.nonzero(is_start).squeeze(1)
    return starts[torch.cumsum(is_start.long(), 0) - 1]


def _segment_cumsum(values: torch.Tensor, first: torch.Tensor) -> torch.Tensor:
    total = torch.cumsum(values, 0)
    return total - (total[first] - values[first])


class _Composite(torch.autograd.Function):
    """out[p] = sum_f alpha_f T_f features_f over the fragments of pixel p."""

    @staticmethod
    def forward(ctx, alpha, features, pixel, first, num_pixels):
        log1m = torch.log1p(-alpha)
        T = torch.exp(_segment_cumsum(log1m, first) - log1m)
        weights = alpha * T
        out = torch.zeros(num_pixels, features.shape[1], dtype=features.dtype)
        out.index_add_(0, pixel, weights[:, None] * features)
        ctx.save_for_backward(alpha, features, pixel, first, T)
        ctx.num_pixels = num_pixels
        return out

    @staticmethod
    def backward(ctx, grad_out):
        alpha, features, pixel, first, T = ctx.saved_tensors
        g = grad_out[pixel]
        s = (features * g).sum(dim=1)
        weights = alpha * T
        ws = weights * s
        totals = torch.zeros(ctx.num_pixels, dtype=ws.dtype).index_add_(0, pixel, ws)
        behind = totals[pixel] - _segment_cumsum(ws, first)
        grad_alpha = T * s - behind / (1.0 - alpha)
        grad_features = weights[:, None] * g
        return grad_alpha, grad_features, None, None, None


def _projected_covariance(gaussians: Gaussians3D, camera: CameraState, points: torch.Tensor, index: torch.Tensor):
    """2D covariance J W Sigma W^T J^T + dilation for the Gaussians in ``index``."""
    K = camera.K
    R = camera.T[:3, :3]
    L = R @ gaussians.covariance_factor()[index]
    x, y, z = points.unbind(-1)
    zero = torch.zeros_like(z)
    J = torch.stack(
        [
            torch.stack([K[0, 0] / z, K[0, 1] / z, -(K[0, 0] * x + K[0, 1] * y) / z**2], dim=-1),
            torch.stack([zero, K[1, 1] / z, -K[1, 1] * y / z**2], dim=-1),
        ],
        dim=-2,
    )
    A = J @ L
    cov = A @ A.transpose(-1, -2)
    return cov + DILATION * torch.eye(2, dtype=cov.dtype)


def _fragment_boxes(uv: torch.Tensor, radius: Optional[torch.Tensor], height: int, width: int):
    n = uv.shape[0]
    if radius is None:
        x0 = torch.zeros(n, dtype=torch.long)
        y0 = torch.zeros(n, dtype=torch.long)
        bw = torch.full((n,), width, dtype=torch.long)
        bh = torch.full((n,), height, dtype=torch.long)
        return x0, y0, bw, bh
    u, v = uv.detach().unbind(-1)
    x0 = torch.ceil(u - radius).clamp(0, width)
    x1 = torch.floor(u + radius).clamp(-1, width - 1)
    y0 = torch.ceil(v - radius).clamp(0, height)
    y1 = torch.floor(v + radius).clamp(-1, height - 1)
    bw = (x1 - x0 + 1).clamp_min(0).long()
    bh = (y1 - y0 + 1).clamp_min(0).long()
    return x0.long(), y0.long(), bw, bh


def render(
    gaussians: Gaussians3D,
    camera: CameraState,
    image_size: Optional[Tuple[int, int]] = None,
    background: Optional[torch.Tensor] = None,
    cutoff: Optional[float] = 3.0,
    near: float = NEAR_PLANE,
) -> RenderOutput:
    """Render color, depth, opacity and the occlusion-aware human silhouette.

    ``image_size`` is (height, width) and defaults to the camera's. ``cutoff``
    bounds each Gaussian's footprint to a box of that many standard deviations;
    ``None`` evaluates every Gaussian at every pixel.
    """
    height, width = image_size if image_size is not None else (camera.height, camera.width)
    dtype = gaussians.mu.dtype
    n = len(gaussians)
    num_pixels = height * width
    bg = torch.zeros(3, dtype=dtype) if background is None else torch.as_tensor(background, dtype=dtype)

    points = gaussians.mu @ camera.T[:3, :3].T + camera.T[:3, 3]
    in_front = points[:, 2].detach() > near
    skipped = torch.zeros(n, dtype=torch.bool)
    visibility = torch.zeros(n, dtype=torch.bool)
    means2d = torch.zeros(n, 2, dtype=dtype)

    index = torch.nonzero(in_front).squeeze(1)
    if index.numel():
        cam_points = points[index]
        cov = _projected_covariance(gaussians, camera, cam_points, index)
        a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
        det = a * c - b * b
        with torch.no_grad():
            mid = 0.5 * (a + c)
            spread = torch.sqrt((mid * mid - det).clamp_min(0.0))
            lam_max = mid + spread
            lam_min = det / lam_max
            degenerate = ~torch.isfinite(det) | (det <= 0) | (lam_max > MAX_CONDITION * lam_min.clamp_min(0.0))
        if bool(degenerate.any()):
            skipped[index[degenerate]] = True
            warn("degenerate_gaussians", count=int(degenerate.sum()))
            keep = ~degenerate
            index, cam_points, cov, det, lam_max = index[keep], cam_points[keep], cov[keep], det[keep], lam_max[keep]
            a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]

        K = camera.K
        uv = torch.stack(
            [
                K[0, 0] * cam_points[:, 0] / cam_points[:, 2] + K[0, 1] * cam_points[:, 1] / cam_points[:, 2] + K[0, 2],
                K[1, 1] * cam_points[:, 1] / cam_points[:, 2] + K[1, 2],
            ],
            dim=-1,
        )
        means2d = means2d.index_put((index,), uv)
        if means2d.requires_grad:
            means2d.retain_grad()
        uv = means2d[index]
        conic = torch.stack([c, -b, a], dim=-1) / det[:, None]

        radius = None if cutoff is None else torch.ceil(cutoff * torch.sqrt(lam_max))
        x0, y0, bw, bh = _fragment_boxes(uv, radius, height, width)
        counts = bw * bh
        total = int(counts.sum())
    else:
        total = 0

    if total == 0:
        accum = torch.zeros(num_pixels, _FEATURES, dtype=dtype)
        fragments = None
    else:
        m = index.shape[0]
        local_id = torch.repeat_interleave(torch.arange(m), counts)
        offset = torch.arange(total) - (torch.cumsum(counts, 0) - counts)[local_id]
        px = x0[local_id] + offset % bw[local_id]
        py = y0[local_id] + torch.div(offset, bw[local_id], rounding_mode="floor")

        depth_rank = torch.empty(m, dtype=torch.long)
        depth_rank[torch.argsort(cam_points[:, 2].detach(), stable=True)] = torch.arange(m)
        pixel = py * width + px
        order = torch.argsort(pixel * m + depth_rank[local_id])
        local_id, pixel, px, py = local_id[order], pixel[order], px[order], py[order]

        d = torch.stack([px.to(dtype), py.to(dtype)], dim=-1) - uv[local_id]
        q = conic[local_id]
        power = -0.5 * (q[:, 0] * d[:, 0] ** 2 + 2.0 * q[:, 1] * d[:, 0] * d[:, 1] + q[:, 2] * d[:, 1] ** 2)
        alpha = (gaussians.opacity[index][local_id] * torch.exp(power)).clamp(max=ALPHA_MAX)

        with torch.no_grad():
            first = _segment_first(pixel)
            log1m = torch.log1p(-alpha)
            before = torch.exp(_segment_cumsum(log1m, first) - log1m)
            active = before >= TRANSMITTANCE_MIN
        if not bool(active.all()):
            local_id, pixel, alpha, before = local_id[active], pixel[active], alpha[active], before[active]
            first = _segment_first(pixel)

        human = gaussians.human[index].to(dtype)
        features = torch.cat(
            [
                gaussians.color[index],
                torch.ones(index.shape[0], 1, dtype=dtype),
                cam_points[:, 2:3],
                human[:, None],
                1.0 - human[:, None],
            ],
            dim=1,
        )[local_id]
        accum = _Composite.apply(alpha, features, pixel, first, num_pixels)

        gaussian_id = index[local_id]
        with torch.no_grad():
            seen = gaussian_id[alpha.detach() >= VISIBLE_ALPHA]
        visibility[seen] = True
        fragments = FragmentRecord(gaussian=gaussian_id, pixel=pixel, alpha=alpha.detach(), transmittance=before)

    opacity = accum[:, 3]
    image = accum[:, :3] + (1.0 - opacity)[:, None] * bg
    depth = accum[:, 4] / opacity.clamp_min(DEPTH_EPS)
    return RenderOutput(
        image=image.reshape(height, width, 3),
        depth=depth.reshape(height, width),
        opacity=opacity.reshape(height, width),
        human_silhouette=accum[:, 5].reshape(height, width),
        scene_silhouette=accum[:, 6].reshape(height, width),
        visibility=visibility,
        skipped=skipped,
        means2d=means2d,
        fragments=fragments,
    )


def render_backward(
    output: RenderOutput,
    output_grads: Dict[str, torch.Tensor],
    inputs: Sequence[torch.Tensor],
) -> Tuple[torch.Tensor, ...]:
    """Vector-Jacobian product of the named render outputs with respect to ``inputs``.

    Inputs that the render does not depend on get zero gradients. The graph is
    retained so several products can be taken from one forward pass.
    """
    if output.fragments is None:
        raise ContractViolation("render produced no fragment records to differentiate")
    tensors, grads = [], []
    for name, grad in output_grads.items():
        tensor = getattr(output, name, None)
        if not isinstance(tensor, torch.Tensor) or tensor.dtype == torch.bool:
            raise ContractViolation(f"unknown render output {name!r}")
        if tensor.grad_fn is None:
            raise ContractViolation(f"render output {name!r} carries no autograd record")
        tensors.append(tensor)
        grads.append(grad)
    result = torch.autograd.grad(tensors, list(inputs), grads, retain_graph=True, allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for g, x in zip(result, inputs))


def ndc_gradient_norm(output: RenderOutput) -> torch.Tensor:
    """Per-Gaussian norm of the loss gradient w.r.t. normalized device coordinates of the mean."""
    if output.means2d.grad is None:
        return torch.zeros(output.means2d.shape[0], dtype=output.means2d.dtype)
    height, width = output.size
    scale = torch.tensor([0.5 * width, 0.5 * height], dtype=output.means2d.dtype)
    return (output.means2d.grad * scale).norm(dim=-1)

