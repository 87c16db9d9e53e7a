"""Trajectory, body-pose and image metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from .body import BodyModel, PoseState, pose_vertices
from .errors import ContractViolation, DegenerateInputError
from .geometry import camera_center
from .trace import warn

ALIGNMENTS = ("sim3", "se3")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

METRIC_COLUMNS = (
    "sequence",
    "frames",
    "keyframes",
    "ate_rmse_m",
    "mpjpe_mm",
    "pa_mpjpe_mm",
    "mve_mm",
    "w_mpjpe_mm",
    "wa_mpjpe_mm",
    "jitter_10ms3",
    "psnr_db",
    "ssim",
    "psnr_human_db",
    "ssim_human",
)


def _as_points(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def umeyama(source: torch.Tensor, target: torch.Tensor, with_scale: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(s, R, t) minimizing sum ||target - (s R source + t)||^2 over batches of point sets.

    Inputs are (..., N, 3); returns s (...,), R (..., 3, 3), t (..., 3).
    """
    if source.dim() == 2:
        s, R, t = umeyama(source[None], target[None], with_scale)
        return s[0], R[0], t[0]
    n = source.shape[-2]
    mu_s = source.mean(dim=-2, keepdim=True)
    mu_t = target.mean(dim=-2, keepdim=True)
    xs = source - mu_s
    xt = target - mu_t
    C = xt.transpose(-1, -2) @ xs / n
    U, D, Vh = torch.linalg.svd(C)
    S = torch.eye(3, dtype=source.dtype).expand(C.shape).clone()
    flip = torch.linalg.det(U) * torch.linalg.det(Vh) < 0
    S[flip, 2, 2] = -1.0
    R = U @ S @ Vh
    if with_scale:
        variance = (xs * xs).sum(dim=(-1, -2)) / n
        s = (D * torch.diagonal(S, dim1=-2, dim2=-1)).sum(dim=-1) / variance.clamp_min(1e-300)
    else:
        s = torch.ones(source.shape[:-2], dtype=source.dtype)
    t = mu_t.squeeze(-2) - s[..., None] * (R @ mu_s.squeeze(-2)[..., None])[..., 0]
    return s, R, t


def _apply(s: torch.Tensor, R: torch.Tensor, t: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return s[..., None, None] * points @ R.transpose(-1, -2) + t[..., None, :]


def _check_trajectory(est: torch.Tensor, ref: torch.Tensor):
    if est.shape != ref.shape:
        raise ContractViolation(f"trajectory shapes differ: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.shape[0] < 3:
        raise DegenerateInputError("trajectory alignment needs at least three poses")
    centered = ref - ref.mean(dim=0)
    singular = torch.linalg.svdvals(centered)
    if float(singular[0]) <= 1e-12 or float(singular[1]) <= 1e-9 * float(singular[0]):
        raise DegenerateInputError("reference positions are collinear; the alignment is not unique")


def ate_rmse(est, ref, alignment: str = "sim3") -> float:
    """RMSE of camera positions after aligning the estimate onto the reference.

    ``est`` and ``ref`` are (F, 4, 4) world-to-camera poses or (F, 3) positions.
    """
    if alignment not in ALIGNMENTS:
        raise ContractViolation(f"alignment must be one of {list(ALIGNMENTS)}, got {alignment!r}")
    est, ref = _as_points(est), _as_points(ref)
    if est.dim() == 3:
        est = torch.stack([camera_center(T) for T in est])
    if ref.dim() == 3:
        ref = torch.stack([camera_center(T) for T in ref])
    _check_trajectory(est, ref)
    s, R, t = umeyama(est, ref, with_scale=alignment == "sim3")
    residual = _apply(s, R, t, est) - ref
    return float(torch.sqrt((residual * residual).sum(dim=-1).mean()))


def _mean_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm(dim=-1).mean())


def jitter(joints, fps: float) -> float:
    """Mean jerk magnitude of joint trajectories, in units of 10 m/s^3."""
    if fps <= 0:
        raise ContractViolation(f"fps must be positive, got {fps}")
    joints = _as_points(joints)
    if joints.shape[0] < 4:
        return 0.0
    jerk = joints[3:] - 3 * joints[2:-1] + 3 * joints[1:-2] - joints[:-3]
    return float(jerk.norm(dim=-1).mean()) * fps ** 3 / 10.0


def mpjpe_family(
    est_joints,
    ref_joints,
    fps: float,
    est_vertices=None,
    ref_vertices=None,
    root: int = 0,
) -> Dict[str, float]:
    """Local and world-frame joint errors in millimetres plus jitter.

    MPJPE and MVE subtract the root joint per frame; PA-MPJPE applies a
    per-frame similarity Procrustes; WA-MPJPE one rigid alignment of the whole
    trajectory; W-MPJPE the rigid alignment of the first two frames only.
    MVE is NaN when vertices are not given.
    """
    if fps <= 0:
        raise ContractViolation(f"fps must be positive, got {fps}")
    est, ref = _as_points(est_joints), _as_points(ref_joints)
    if est.shape != ref.shape or est.dim() != 3:
        raise ContractViolation(f"joint trajectories must share an (F, J, 3) shape: {tuple(est.shape)} vs {tuple(ref.shape)}")

    est_local = est - est[:, root : root + 1]
    ref_local = ref - ref[:, root : root + 1]
    mpjpe = _mean_error(est_local, ref_local)

    s, R, t = umeyama(est, ref)
    pa = _mean_error(_apply(s, R, t, est), ref)

    flat_est, flat_ref = est.reshape(-1, 3), ref.reshape(-1, 3)
    s, R, t = umeyama(flat_est, flat_ref, with_scale=False)
    wa = _mean_error(_apply(s, R, t, flat_est), flat_ref)

    head = min(2, est.shape[0])
    s, R, t = umeyama(est[:head].reshape(-1, 3), ref[:head].reshape(-1, 3), with_scale=False)
    w = _mean_error(_apply(s, R, t, flat_est), flat_ref)

    mve = float("nan")
    if est_vertices is not None and ref_vertices is not None:
        ev, rv = _as_points(est_vertices), _as_points(ref_vertices)
        mve = _mean_error(ev - est[:, root : root + 1], rv - ref[:, root : root + 1])

    return {
        "mpjpe_mm": 1000.0 * mpjpe,
        "pa_mpjpe_mm": 1000.0 * pa,
        "mve_mm": 1000.0 * mve,
        "w_mpjpe_mm": 1000.0 * w,
        "wa_mpjpe_mm": 1000.0 * wa,
        "jitter_10ms3": jitter(est, fps),
    }


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - (SSIM_WINDOW - 1) / 2
    g = torch.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def ssim_map(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM over the valid window positions, averaged over channels: (H-10, W-10)."""
    window = _gaussian_window(est.dtype)
    x = est.permute(2, 0, 1)[:, None]
    y = ref.permute(2, 0, 1)[:, None]
    mu_x = F.conv2d(x, window)
    mu_y = F.conv2d(y, window)
    xx = F.conv2d(x * x, window) - mu_x * mu_x
    yy = F.conv2d(y * y, window) - mu_y * mu_y
    xy = F.conv2d(x * y, window) - mu_x * mu_y
    value = ((2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)) / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (xx + yy + SSIM_C2))
    return value[:, 0].mean(dim=0)


def psnr_ssim(est_image, ref_image, mask=None) -> Dict[str, float]:
    """PSNR (dB, ``inf`` for identical inputs) and SSIM of two H x W x 3 images in [0, 1].

    With ``mask`` both scores average over the masked pixels only (window
    centers for SSIM). SSIM is NaN when no masked pixel is a window center.
    """
    est, ref = _as_points(est_image), _as_points(ref_image)
    if est.shape != ref.shape:
        raise ContractViolation(f"image shapes differ: {tuple(est.shape)} vs {tuple(ref.shape)}")
    if est.dim() == 2:
        est, ref = est[..., None], ref[..., None]
    height, width = est.shape[:2]
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise ContractViolation(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")
    keep = torch.ones(height, width, dtype=torch.bool) if mask is None else torch.as_tensor(mask).bool()
    if not bool(keep.any()):
        raise DegenerateInputError("the metric mask selects no pixels")

    mse = float(((est - ref) ** 2).mean(dim=-1)[keep].mean())
    psnr = math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)

    half = SSIM_WINDOW // 2
    values = ssim_map(est, ref)
    inner = keep[half : height - half, half : width - half]
    ssim = float(values[inner].mean()) if bool(inner.any()) else float("nan")
    return {"psnr_db": psnr, "ssim": ssim}


@dataclass
class RenderScores:
    psnr_db: float
    ssim: float
    psnr_human_db: float
    ssim_human: float


def mean_scores(scores: List[RenderScores]) -> RenderScores:
    """Average over frames; a PSNR average that includes ``inf`` stays ``inf``."""
    if not scores:
        nan = float("nan")
        return RenderScores(nan, nan, nan, nan)

    def avg(name: str) -> float:
        values = [getattr(s, name) for s in scores if not math.isnan(getattr(s, name))]
        return sum(values) / len(values) if values else float("nan")

    return RenderScores(avg("psnr_db"), avg("ssim"), avg("psnr_human_db"), avg("ssim_human"))


def body_vertices(body: BodyModel, poses: List[PoseState]) -> torch.Tensor:
    with torch.no_grad():
        return torch.stack([pose_vertices(body, pose)[0] for pose in poses])


def summarize_run(
    name: str,
    est_cameras,
    ref_cameras,
    est_joints,
    ref_joints,
    fps: float,
    keyframes: int,
    est_vertices=None,
    ref_vertices=None,
    renders: Optional[RenderScores] = None,
    alignment: str = "sim3",
) -> Dict[str, object]:
    """One metrics row in ``METRIC_COLUMNS`` order."""
    est_cameras, ref_cameras = _as_points(est_cameras), _as_points(ref_cameras)
    if est_cameras.shape[0] != ref_cameras.shape[0]:
        raise ContractViolation(f"trajectory lengths differ: {est_cameras.shape[0]} vs {ref_cameras.shape[0]}")
    try:
        ate = ate_rmse(est_cameras, ref_cameras, alignment)
    except DegenerateInputError as err:
        warn("ate_undefined", reason=str(err))
        ate = float("nan")
    pose_metrics = mpjpe_family(est_joints, ref_joints, fps, est_vertices, ref_vertices)
    renders = renders or mean_scores([])
    row: Dict[str, object] = {
        "sequence": name,
        "frames": int(est_cameras.shape[0]),
        "keyframes": int(keyframes),
        "ate_rmse_m": ate,
        **pose_metrics,
        "psnr_db": renders.psnr_db,
        "ssim": renders.ssim,
        "psnr_human_db": renders.psnr_human_db,
        "ssim_human": renders.ssim_human,
    }
    return {column: row[column] for column in METRIC_COLUMNS}
