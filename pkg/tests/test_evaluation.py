import math

import pytest
import torch

from avatar_slam.errors import ContractViolation, DegenerateInputError
from avatar_slam.evaluation import (
    METRIC_COLUMNS,
    RenderScores,
    ate_rmse,
    jitter,
    mean_scores,
    mpjpe_family,
    psnr_ssim,
    summarize_run,
    umeyama,
)
from avatar_slam.geometry import camera_center, invert_transform, make_transform, so3_exp
from avatar_slam.matchers import expect


def _points(n, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, generator=gen)


def _cameras(centers):
    R = so3_exp(torch.tensor([0.1, -0.2, 0.05]))
    return torch.stack([make_transform(R, -(R @ c)) for c in centers])


def test_umeyama_recovers_a_similarity():
    source = _points(12)
    R = so3_exp(torch.tensor([0.3, 0.2, -0.4]))
    target = 2.5 * source @ R.T + torch.tensor([1.0, -2.0, 0.5])
    s, R_hat, t = umeyama(source, target)
    assert float(s) == pytest.approx(2.5, abs=1e-10)
    assert torch.allclose(R_hat, R, atol=1e-10)
    assert torch.allclose(t, torch.tensor([1.0, -2.0, 0.5]), atol=1e-10)


def test_ate_is_invariant_to_a_similarity_of_the_estimate():
    ref = _points(10)
    R = so3_exp(torch.tensor([0.0, 0.7, 0.1]))
    est = 0.5 * ref @ R.T + torch.tensor([3.0, 0.0, -1.0])
    assert ate_rmse(est, ref) == pytest.approx(0.0, abs=1e-9)
    assert ate_rmse(est, ref, alignment="se3") > 0.1


def test_ate_accepts_camera_matrices():
    ref = _cameras(_points(8, seed=1))
    world = make_transform(so3_exp(torch.tensor([0.2, 0.0, 0.3])), torch.tensor([0.5, 0.5, 0.0]))
    est = torch.stack([T @ invert_transform(world) for T in ref])
    assert torch.allclose(camera_center(est[0]), world[:3, :3] @ camera_center(ref[0]) + world[:3, 3], atol=1e-12)
    assert ate_rmse(est, ref, alignment="se3") == pytest.approx(0.0, abs=1e-9)


def test_ate_rejects_degenerate_trajectories():
    with pytest.raises(DegenerateInputError):
        ate_rmse(_points(2), _points(2))
    line = torch.linspace(0.0, 1.0, 5)[:, None] * torch.tensor([1.0, 2.0, 0.0])
    with pytest.raises(DegenerateInputError):
        ate_rmse(line + 0.01, line)
    with pytest.raises(ContractViolation):
        ate_rmse(_points(4), _points(5))
    with pytest.raises(ContractViolation):
        ate_rmse(_points(4), _points(4), alignment="affine")


def _walk(frames=6, joints=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    base = torch.randn(joints, 3, generator=gen)
    step = torch.tensor([0.05, 0.0, 0.02])
    return torch.stack([base + i * step for i in range(frames)])


def test_identical_joint_trajectories_score_zero():
    joints = _walk()
    metrics = mpjpe_family(joints, joints, fps=30.0)
    for key in ("mpjpe_mm", "pa_mpjpe_mm", "w_mpjpe_mm", "wa_mpjpe_mm"):
        assert metrics[key] == pytest.approx(0.0, abs=1e-9)
    assert metrics["jitter_10ms3"] == pytest.approx(0.0, abs=1e-9)
    assert math.isnan(metrics["mve_mm"])


def test_world_offset_only_shows_before_alignment():
    ref = _walk()
    est = ref + torch.tensor([0.1, 0.0, 0.0])
    metrics = mpjpe_family(est, ref, fps=30.0)
    assert metrics["mpjpe_mm"] == pytest.approx(0.0, abs=1e-9)
    assert metrics["wa_mpjpe_mm"] == pytest.approx(0.0, abs=1e-9)
    assert metrics["w_mpjpe_mm"] == pytest.approx(0.0, abs=1e-9)


def test_scale_error_is_removed_by_procrustes():
    ref = _walk()
    est = 1.1 * ref
    metrics = mpjpe_family(est, ref, fps=30.0)
    assert metrics["pa_mpjpe_mm"] == pytest.approx(0.0, abs=1e-8)
    assert metrics["mpjpe_mm"] > 1.0


def test_drift_after_the_first_two_frames_counts_in_world_error():
    ref = _walk(frames=8)
    drift = torch.zeros(8, 1, 3)
    drift[2:, 0, 1] = 0.05
    metrics = mpjpe_family(ref + drift, ref, fps=30.0)
    assert metrics["w_mpjpe_mm"] == pytest.approx(1000.0 * 0.05 * 6 / 8, rel=1e-9)
    assert metrics["wa_mpjpe_mm"] < metrics["w_mpjpe_mm"]


def test_vertex_error_is_root_relative():
    ref = _walk()
    vertices = ref[:, :2] + 0.3
    metrics = mpjpe_family(ref + 1.0, ref, fps=30.0, est_vertices=vertices + 1.0, ref_vertices=vertices)
    assert metrics["mve_mm"] == pytest.approx(0.0, abs=1e-9)


def test_joint_shapes_must_match():
    with pytest.raises(ContractViolation):
        mpjpe_family(_walk(joints=3), _walk(joints=4), fps=30.0)
    with pytest.raises(ContractViolation):
        mpjpe_family(_walk(), _walk(), fps=0.0)


def test_jitter_of_cubic_motion():
    fps = 20.0
    t = torch.arange(10) / fps
    joints = torch.zeros(10, 1, 3)
    joints[:, 0, 0] = t ** 3
    assert jitter(joints, fps) == pytest.approx(0.6, rel=1e-6)
    assert jitter(joints[:3], fps) == 0.0


def _image(seed=0, size=(16, 20)):
    gen = torch.Generator().manual_seed(seed)
    return 0.2 + 0.6 * torch.rand(*size, 3, generator=gen)


def test_psnr_of_a_uniform_offset():
    ref = _image()
    scores = psnr_ssim(ref + 0.1, ref)
    assert scores["psnr_db"] == pytest.approx(20.0, abs=1e-9)


def test_identical_images():
    ref = _image()
    scores = psnr_ssim(ref, ref.clone())
    assert scores["psnr_db"] == math.inf
    assert scores["ssim"] == pytest.approx(1.0, abs=1e-12)


def test_ssim_is_symmetric_and_bounded():
    a, b = _image(1), _image(2)
    ab = psnr_ssim(a, b)["ssim"]
    ba = psnr_ssim(b, a)["ssim"]
    assert ab == pytest.approx(ba, abs=1e-12)
    assert -1.0 <= ab < 1.0


def test_masked_scores_only_see_the_mask():
    ref = _image()
    est = ref.clone()
    est[:, 10:] += 0.2
    mask = torch.zeros(16, 20, dtype=torch.bool)
    mask[:, :10] = True
    assert psnr_ssim(est, ref, mask=mask)["psnr_db"] == math.inf
    with pytest.raises(DegenerateInputError):
        psnr_ssim(est, ref, mask=torch.zeros(16, 20, dtype=torch.bool))


def test_masked_ssim_without_a_window_center_is_nan():
    ref = _image()
    mask = torch.zeros(16, 20, dtype=torch.bool)
    mask[0] = True
    scores = psnr_ssim(ref + 0.1, ref, mask=mask)
    assert math.isnan(scores["ssim"])
    assert scores["psnr_db"] == pytest.approx(20.0, abs=1e-9)


def test_image_contracts():
    with pytest.raises(ContractViolation):
        psnr_ssim(_image(size=(8, 20)), _image(size=(8, 20)))
    with pytest.raises(ContractViolation):
        psnr_ssim(_image(size=(16, 20)), _image(size=(16, 21)))


def test_mean_scores_skips_nan_and_keeps_inf():
    scores = mean_scores([RenderScores(math.inf, 1.0, float("nan"), 0.5), RenderScores(30.0, 0.8, 25.0, 0.7)])
    assert scores.psnr_db == math.inf
    assert scores.ssim == pytest.approx(0.9)
    assert scores.psnr_human_db == pytest.approx(25.0)
    assert math.isnan(mean_scores([]).ssim)


def test_summary_row_has_every_column_in_order():
    centers = _points(5, seed=3)
    cameras = _cameras(centers)
    joints = _walk(frames=5)
    row = summarize_run("toy", cameras, cameras, joints, joints, 30.0, 2)
    assert tuple(row) == METRIC_COLUMNS
    assert row["sequence"] == "toy"
    assert row["frames"] == 5
    assert row["keyframes"] == 2
    assert row["ate_rmse_m"] == pytest.approx(0.0, abs=1e-9)
    assert math.isnan(row["psnr_db"])


def test_summary_of_a_short_run_marks_ate_undefined(trace):
    cameras = _cameras(_points(2))
    joints = _walk(frames=2)
    row = summarize_run("short", cameras, cameras, joints, joints, 30.0, 1)
    assert math.isnan(row["ate_rmse_m"])
    assert row["mpjpe_mm"] == pytest.approx(0.0, abs=1e-9)
    expect(trace).to_have_event(kind="warning", name="ate_undefined", times=1)


def test_summary_rejects_length_mismatch():
    cameras = _cameras(_points(4))
    joints = _walk(frames=4)
    with pytest.raises(ContractViolation):
        summarize_run("bad", cameras[:3], cameras, joints, joints, 30.0, 0)
