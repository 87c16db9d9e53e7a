import math

import pytest
import torch

from avatar_slam.body import PoseState
from avatar_slam.errors import ContractViolation, DatasetError
from avatar_slam.evaluation import METRIC_COLUMNS
from avatar_slam.geometry import make_transform, so3_exp
from avatar_slam.outputs import (
    TRAJECTORY_HEADER,
    plot_trajectories,
    read_metrics_csv,
    read_trajectory,
    write_metrics_csv,
    write_trajectory,
)


def _trajectory(frames=3, joints=2):
    cameras = torch.stack(
        [make_transform(so3_exp(torch.tensor([0.0, 0.1 * i, 0.02])), torch.tensor([0.1 * i, 0.0, 1.0])) for i in range(frames)]
    )
    poses = []
    for i in range(frames):
        pose = PoseState.rest(joints)
        pose.theta = torch.full((joints, 3), 0.01 * i)
        pose.root_rotation = torch.tensor([0.0, 0.2, 0.0])
        pose.root_translation = torch.tensor([0.0, 0.0, 2.0 + 0.1 * i])
        poses.append(pose)
    joint_positions = torch.arange(frames * joints * 3, dtype=torch.float64).reshape(frames, joints, 3) / 10.0
    timestamps = [i / 30.0 for i in range(frames)]
    return timestamps, cameras, poses, joint_positions


def test_trajectory_file_layout(tmp_path):
    path = tmp_path / "trajectory.txt"
    write_trajectory(path, *_trajectory())
    lines = path.read_text().splitlines()
    assert lines[0] == TRAJECTORY_HEADER.format(joints=2)
    assert lines[1].startswith("# timestamp qw qx qy qz tx ty tz rx ry rz px py pz theta0_x")
    assert len(lines) == 5
    assert all(len(line.split()) == 14 + 6 * 2 for line in lines[2:])


def test_trajectory_is_read_back(tmp_path):
    timestamps, cameras, poses, joints = _trajectory()
    path = tmp_path / "trajectory.txt"
    write_trajectory(path, timestamps, cameras, poses, joints)
    loaded = read_trajectory(path)
    assert len(loaded) == 3
    assert loaded.joint_count == 2
    assert loaded.timestamps == pytest.approx(timestamps, abs=1e-12)
    assert torch.allclose(loaded.cameras, cameras, atol=1e-10)
    assert torch.allclose(loaded.joints, joints, atol=1e-10)
    assert torch.allclose(loaded.poses[1, 3:6], poses[1].root_translation, atol=1e-12)
    assert torch.allclose(loaded.poses[2, 6:], poses[2].theta.reshape(-1), atol=1e-12)


def test_trajectory_writer_checks_lengths(tmp_path):
    timestamps, cameras, poses, joints = _trajectory()
    with pytest.raises(ContractViolation):
        write_trajectory(tmp_path / "t.txt", timestamps[:2], cameras, poses, joints)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "# some other file\n0 1 0 0 0 0 0 0\n",
        "# avatar-slam trajectory v1 joints=x\n",
        "# avatar-slam trajectory v1 joints=0\n# timestamp\n",
        "# avatar-slam trajectory v1 joints=0\n0 1 0 0 0 0 0 0 0 0 0 0 0\n",
        "# avatar-slam trajectory v1 joints=0\n0 1 0 0 0 0 0 0 0 0 0 0 0 abc\n",
        "# avatar-slam trajectory v1 joints=0\n1 1 0 0 0 0 0 0 0 0 0 0 0 0\n0 1 0 0 0 0 0 0 0 0 0 0 0 0\n",
    ],
)
def test_malformed_trajectories_are_rejected(tmp_path, text):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(DatasetError):
        read_trajectory(path)


def test_missing_trajectory(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_trajectory(tmp_path / "absent.txt")


def test_metrics_csv_formatting(tmp_path):
    path = tmp_path / "metrics.csv"
    row = {column: 0.0 for column in METRIC_COLUMNS}
    row.update(sequence="walk", frames=12, keyframes=3, ate_rmse_m=0.0123456789, psnr_db=math.inf, ssim=float("nan"))
    write_metrics_csv(path, [row, {"sequence": "walk/prior"}])

    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    rows = read_metrics_csv(path)
    assert rows[0]["sequence"] == "walk"
    assert rows[0]["frames"] == "12"
    assert rows[0]["ate_rmse_m"] == "0.012346"
    assert rows[0]["psnr_db"] == "inf"
    assert rows[0]["ssim"] == "nan"
    assert rows[1]["sequence"] == "walk/prior"
    assert rows[1]["mpjpe_mm"] == "nan"


def test_trajectory_plot_is_written(tmp_path):
    _, cameras, _, joints = _trajectory(frames=4)
    path = tmp_path / "trajectory.png"
    plot_trajectories(path, cameras, cameras + 0.01, joints[:, 0], joints[:, 0] + 0.02)
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
