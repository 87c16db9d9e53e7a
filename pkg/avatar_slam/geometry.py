"""Rotation, quaternion and rigid-transform helpers (batched torch)."""
from __future__ import annotations

from typing import Optional

import torch

_SMALL = 1e-8


def skew(v: torch.Tensor) -> torch.Tensor:
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zeros = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([zeros, -z, y], dim=-1),
            torch.stack([z, zeros, -x], dim=-1),
            torch.stack([-y, x, zeros], dim=-1),
        ],
        dim=-2,
    )


def _angle_terms(phi: torch.Tensor):
    # Taylor branches near zero keep values and gradients finite.
    theta2 = (phi * phi).sum(dim=-1, keepdim=True)
    small = theta2 < _SMALL
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    c = torch.where(small, 1.0 / 6.0 - theta2 / 120.0, (theta - torch.sin(theta)) / (safe2 * theta))
    return a[..., None], b[..., None], c[..., None]


def so3_exp(phi: torch.Tensor) -> torch.Tensor:
    """Axis-angle (...,3) to rotation matrices (...,3,3) via Rodrigues."""
    a, b, _ = _angle_terms(phi)
    k = skew(phi)
    eye = torch.eye(3, dtype=phi.dtype, device=phi.device).expand(k.shape)
    return eye + a * k + b * (k @ k)


def so3_left_jacobian(phi: torch.Tensor) -> torch.Tensor:
    """J_l with exp((phi + d)^) = exp((J_l d)^) exp(phi^) to first order."""
    _, b, c = _angle_terms(phi)
    k = skew(phi)
    eye = torch.eye(3, dtype=phi.dtype, device=phi.device).expand(k.shape)
    return eye + b * k + c * (k @ k)


def axis_angle_to_quaternion(phi: torch.Tensor) -> torch.Tensor:
    theta2 = (phi * phi).sum(dim=-1, keepdim=True)
    small = theta2 < _SMALL
    theta = torch.sqrt(torch.where(small, torch.ones_like(theta2), theta2))
    half_sinc = torch.where(small, 0.5 - theta2 / 48.0, torch.sin(0.5 * theta) / theta)
    w = torch.where(small, 1.0 - theta2 / 8.0, torch.cos(0.5 * theta))
    return torch.cat([w, phi * half_sinc], dim=-1)


def quaternion_to_axis_angle(q: torch.Tensor) -> torch.Tensor:
    q = quat_normalize(q)
    q = torch.where(q[..., :1] < 0, -q, q)
    xyz = q[..., 1:]
    n2 = (xyz * xyz).sum(dim=-1, keepdim=True)
    small = n2 < _SMALL
    n = torch.sqrt(torch.where(small, torch.ones_like(n2), n2))
    w = q[..., :1]
    scale = torch.where(small, 2.0 / w.clamp_min(_SMALL), 2.0 * torch.atan2(n, w) / n)
    return xyz * scale


def canonicalize_axis_angle(phi: torch.Tensor) -> torch.Tensor:
    """Same rotation with angle in [0, pi]."""
    return quaternion_to_axis_angle(axis_angle_to_quaternion(phi))


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions (w, x, y, z) to rotation matrices; input is normalized first."""
    w, x, y, z = quat_normalize(q).unbind(-1)
    return torch.stack(
        [
            torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], dim=-1),
            torch.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], dim=-1),
            torch.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], dim=-1),
        ],
        dim=-2,
    )


def matrix_to_quaternion(R: torch.Tensor) -> torch.Tensor:
    """Rotation matrices to quaternions with w >= 0 (largest-pivot branch per item)."""
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    candidates_sq = torch.stack(
        [1 + m00 + m11 + m22, 1 + m00 - m11 - m22, 1 - m00 + m11 - m22, 1 - m00 - m11 + m22], dim=-1
    )
    pivot = candidates_sq.argmax(dim=-1, keepdim=True)
    s = torch.sqrt(candidates_sq.clamp_min(0.0)) * 2.0
    s = torch.where(s > 0, s, torch.ones_like(s))
    r21_12 = R[..., 2, 1] - R[..., 1, 2]
    r02_20 = R[..., 0, 2] - R[..., 2, 0]
    r10_01 = R[..., 1, 0] - R[..., 0, 1]
    r01p = R[..., 0, 1] + R[..., 1, 0]
    r02p = R[..., 0, 2] + R[..., 2, 0]
    r12p = R[..., 1, 2] + R[..., 2, 1]
    q0 = torch.stack([0.25 * s[..., 0], r21_12 / s[..., 0], r02_20 / s[..., 0], r10_01 / s[..., 0]], dim=-1)
    q1 = torch.stack([r21_12 / s[..., 1], 0.25 * s[..., 1], r01p / s[..., 1], r02p / s[..., 1]], dim=-1)
    q2 = torch.stack([r02_20 / s[..., 2], r01p / s[..., 2], 0.25 * s[..., 2], r12p / s[..., 2]], dim=-1)
    q3 = torch.stack([r10_01 / s[..., 3], r02p / s[..., 3], r12p / s[..., 3], 0.25 * s[..., 3]], dim=-1)
    stacked = torch.stack([q0, q1, q2, q3], dim=-2)
    q = torch.take_along_dim(stacked, pivot[..., None].expand(*pivot.shape[:-1], 1, 4), dim=-2).squeeze(-2)
    q = quat_normalize(q)
    return torch.where(q[..., :1] < 0, -q, q)


def matrix_to_axis_angle(R: torch.Tensor) -> torch.Tensor:
    return quaternion_to_axis_angle(matrix_to_quaternion(R))


def make_transform(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    top = torch.cat([R, t[..., :, None]], dim=-1)
    bottom = torch.zeros(*R.shape[:-2], 1, 4, dtype=R.dtype, device=R.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def invert_transform(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    Rt = R.transpose(-1, -2)
    return make_transform(Rt, -(Rt @ t[..., None])[..., 0])


def transform_points(T: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return points @ T[..., :3, :3].transpose(-1, -2) + T[..., None, :3, 3]


def retract_pose(T: torch.Tensor, rot_delta: torch.Tensor, trans_delta: torch.Tensor) -> torch.Tensor:
    """Left-perturb a world-to-camera pose by a tangent (rotation, translation) step."""
    return make_transform(so3_exp(rot_delta), trans_delta) @ T


def camera_center(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3]
    t = T[..., :3, 3]
    return -(R.transpose(-1, -2) @ t[..., None])[..., 0]


def look_at(eye: torch.Tensor, target: torch.Tensor, up: Optional[torch.Tensor] = None) -> torch.Tensor:
    """World-to-camera transform (x right, y down, z forward) looking from eye at target."""
    if up is None:
        up = torch.tensor([0.0, 1.0, 0.0], dtype=eye.dtype)
    forward = target - eye
    forward = forward / forward.norm()
    right = torch.linalg.cross(forward, up)
    right = right / right.norm()
    down = torch.linalg.cross(forward, right)
    R = torch.stack([right, down, forward], dim=0)
    return make_transform(R, -(R @ eye))


def project(K: torch.Tensor, points_cam: torch.Tensor) -> torch.Tensor:
    z = points_cam[..., 2:3]
    uv = points_cam[..., :2] / z
    return uv * torch.stack([K[0, 0], K[1, 1]]) + torch.stack([K[0, 2], K[1, 2]])


def backproject(K: torch.Tensor, uv: torch.Tensor, depth: torch.Tensor) -> torch.Tensor:
    x = (uv[..., 0] - K[0, 2]) / K[0, 0]
    y = (uv[..., 1] - K[1, 2]) / K[1, 1]
    return torch.stack([x * depth, y * depth, depth], dim=-1)


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is zero instead of NaN."""
    sq = (x * x).sum(dim=dim)
    positive = sq > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
