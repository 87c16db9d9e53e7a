"""Tracking and mapping loss terms.

Photometric terms are L1 over pixels averaged by image area; the tracking
variants weight every pixel by the detached rendered opacity so that unseen
regions do not pull the poses.
"""
from __future__ import annotations

from typing import Optional, Tuple

import torch

from ..geometry import backproject, invert_transform, project, quat_normalize, quat_to_matrix, safe_norm, transform_points

GM_SIGMA = 100.0  # pixels
CONFIDENT = 0.5
MIN_DEPTH = 1e-3


def geman_mcclure(residual: torch.Tensor, sigma: float = GM_SIGMA) -> torch.Tensor:
    """rho(e) = |e|^2 / (|e|^2 + sigma^2) over the last dimension."""
    e2 = (residual * residual).sum(dim=-1)
    return e2 / (e2 + sigma * sigma)


def keypoint_loss(projected: torch.Tensor, observed: torch.Tensor, conf: torch.Tensor, sigma: float = GM_SIGMA) -> torch.Tensor:
    """Sum of robust reprojection penalties over keypoints detected with conf > 0.5."""
    keep = (conf > CONFIDENT).to(projected.dtype)
    return (keep * geman_mcclure(projected - observed, sigma)).sum()


def weighted_l1(pred: torch.Tensor, target: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-pixel L1 (summed over channels) times ``weight``, averaged over the image."""
    diff = (pred - target).abs()
    if diff.dim() == 3:
        diff = diff.sum(dim=-1)
    if weight is not None:
        diff = diff * weight
    return diff.mean()


def rendered_disparity(depth: torch.Tensor) -> torch.Tensor:
    return 1.0 / depth.clamp_min(MIN_DEPTH)


def solve_scale_shift(
    disparity: torch.Tensor,
    target: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Weighted least-squares (w, b) with w * disparity + b ~ target, from the 2x2 normal equations.

    Inputs are flat and detached. Fewer than two distinct disparities give (1, 0).
    """
    d = disparity.detach()
    y = target.detach()
    c = torch.ones_like(d) if weight is None else weight.detach()
    A = torch.stack([d, torch.ones_like(d)])
    normal = torch.einsum("in,jn->ij", A * c, A)
    if d.numel() < 2 or float(d.max() - d.min()) <= 1e-12 or float(torch.linalg.det(normal)) <= 0:
        return torch.ones((), dtype=d.dtype), torch.zeros((), dtype=d.dtype)
    w, b = torch.linalg.solve(normal, (A * c) @ y)
    return w, b


def disparity_loss(
    depth: torch.Tensor,
    disparity: torch.Tensor,
    valid: torch.Tensor,
    weight: torch.Tensor,
) -> Tuple[torch.Tensor, Tuple[float, float]]:
    """||d_hat - (w d~ + b)||_1 with (w, b) re-solved on the current render.

    ``weight`` is the per-pixel weight (rendered opacity, optionally masked).
    Returns the loss and the (w, b) used.
    """
    pixels = valid & (weight.detach() > 0)
    d_hat = rendered_disparity(depth)
    if not bool(pixels.any()):
        return (d_hat * 0.0).sum(), (1.0, 0.0)
    w, b = solve_scale_shift(disparity[pixels], d_hat[pixels], weight[pixels])
    aligned = w * disparity + b
    loss = weighted_l1(d_hat, aligned, weight * pixels.to(weight.dtype))
    return loss, (float(w), float(b))


def depth_loss(
    depth: torch.Tensor,
    disparity: torch.Tensor,
    valid: torch.Tensor,
    scale_shift: Tuple[float, float],
    mask: torch.Tensor,
) -> torch.Tensor:
    """Mean absolute depth residual against 1 / (w d~ + b) over ``mask`` pixels, (w, b) fixed."""
    w, b = scale_shift
    aligned = w * disparity + b
    pixels = valid & mask & (aligned > 0)
    if not bool(pixels.any()):
        return (depth * 0.0).sum()
    return (depth[pixels] - 1.0 / aligned[pixels]).abs().mean()


def flow_loss(
    keyframe_depth: torch.Tensor,
    keyframe_weight: torch.Tensor,
    flow: torch.Tensor,
    flow_valid: torch.Tensor,
    K: torch.Tensor,
    keyframe_T: torch.Tensor,
    current_T: torch.Tensor,
) -> torch.Tensor:
    """||p~_ij - (K dT_ij D_i K^-1 [p_i, 1] - p_i)||_1 over keyframe pixels with valid flow.

    The keyframe's depth, weight and pose are treated as constants.
    """
    height, width = keyframe_depth.shape
    v, u = torch.nonzero(flow_valid & (keyframe_depth > MIN_DEPTH), as_tuple=True)
    if u.numel() == 0:
        return (current_T * 0.0).sum()
    uv = torch.stack([u, v], dim=-1).to(keyframe_depth.dtype)
    points = backproject(K, uv, keyframe_depth.detach()[v, u])
    relative = current_T @ invert_transform(keyframe_T.detach())
    moved = transform_points(relative, points)
    ahead = moved[:, 2].detach() > MIN_DEPTH
    moved = torch.where(ahead[:, None], moved, torch.ones_like(moved))
    predicted = project(K, moved) - uv
    residual = (flow[v, u] - predicted).abs().sum(dim=-1) * ahead.to(uv.dtype)
    per_pixel = torch.zeros(height * width, dtype=residual.dtype).index_put((v * width + u,), residual)
    return (per_pixel.reshape(height, width) * keyframe_weight.detach()).mean()


def canonical_covariance(rot: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    L = quat_to_matrix(quat_normalize(rot)) * torch.exp(log_scale)[:, None, :]
    return L @ L.transpose(-1, -2)


def lbs_targets(
    centers: torch.Tensor,
    covariances: torch.Tensor,
    vertices: torch.Tensor,
    vertex_weights: torch.Tensor,
    k: int = 3,
) -> torch.Tensor:
    """Skinning labels from the k nearest vertices, weighted by exp(-1/2 dv^T Sigma^-1 dv).

    Weights are normalized in log space, so a vanishing covariance falls back
    to the nearest vertex's weights instead of dividing by zero.
    """
    with torch.no_grad():
        k = min(k, vertices.shape[0])
        nearest = torch.cdist(centers, vertices).topk(k, dim=1, largest=False).indices  # (N, k)
        dv = vertices[nearest] - centers[:, None, :]
        solved = torch.linalg.solve(covariances[:, None].expand(-1, k, 3, 3), dv[..., None])[..., 0]
        mahalanobis = (dv * solved).sum(dim=-1)
        blend = torch.softmax(-0.5 * mahalanobis, dim=1)
        return (blend[..., None] * vertex_weights[nearest]).sum(dim=1)


def lbs_loss(weights: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Frobenius norm ||W - W~||_F."""
    return safe_norm((weights - targets).reshape(-1), dim=0)


def center_loss(centers: torch.Tensor, vertices: torch.Tensor, init_vertex_id: torch.Tensor) -> torch.Tensor:
    """Mean ReLU(||c - v_init|| - ||c - v_NN||): the seeding vertex should stay the nearest one."""
    if centers.shape[0] == 0:
        return centers.sum()
    with torch.no_grad():
        nearest = torch.cdist(centers, vertices).argmin(dim=1)
    to_init = safe_norm(centers - vertices[init_vertex_id])
    to_nearest = safe_norm(centers - vertices[nearest])
    return torch.relu(to_init - to_nearest).mean()
