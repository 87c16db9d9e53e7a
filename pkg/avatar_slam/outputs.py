"""Run artifacts: trajectory text files, the metrics CSV and a static trajectory plot.

Trajectory files are plain text. The first line is
``# avatar-slam trajectory v1 joints=J``, the second names the columns, and
every following line holds one frame::

    timestamp qw qx qy qz tx ty tz rx ry rz px py pz theta[3J] joints[3J]

``(q, t)`` is the world-to-camera rotation (w, x, y, z) and translation,
``r``/``p`` the body root rotation (axis-angle) and translation in the world,
``theta`` the local joint rotations and ``joints`` the posed joint positions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import torch

from .body import PoseState
from .errors import ContractViolation, DatasetError
from .evaluation import METRIC_COLUMNS
from .geometry import make_transform, matrix_to_quaternion, quat_normalize, quat_to_matrix

TRAJECTORY_HEADER = "# avatar-slam trajectory v1 joints={joints}"


@dataclass
class Trajectory:
    timestamps: List[float]
    cameras: torch.Tensor  # (F, 4, 4) world -> camera
    poses: torch.Tensor  # (F, 6 + 3J) root rotation, root translation, theta
    joints: torch.Tensor  # (F, J, 3)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def joint_count(self) -> int:
        return self.joints.shape[1]


def _columns(joints: int) -> str:
    names = ["timestamp", "qw", "qx", "qy", "qz", "tx", "ty", "tz", "rx", "ry", "rz", "px", "py", "pz"]
    names += [f"theta{j}_{a}" for j in range(joints) for a in "xyz"]
    names += [f"joint{j}_{a}" for j in range(joints) for a in "xyz"]
    return "# " + " ".join(names)


def _number(value: float) -> str:
    return f"{value:.12g}"


def write_trajectory(
    path: Union[str, Path],
    timestamps: Sequence[float],
    cameras: torch.Tensor,
    poses: Sequence[PoseState],
    joints: torch.Tensor,
):
    if not (len(timestamps) == cameras.shape[0] == len(poses) == joints.shape[0]):
        raise ContractViolation("timestamps, cameras, poses and joints must have one entry per frame")
    J = joints.shape[1]
    lines = [TRAJECTORY_HEADER.format(joints=J), _columns(J)]
    for i, pose in enumerate(poses):
        T = cameras[i].detach().double()
        q = matrix_to_quaternion(T[:3, :3])
        values = [float(timestamps[i])]
        values += q.tolist() + T[:3, 3].tolist()
        values += pose.root_rotation.detach().tolist() + pose.root_translation.detach().tolist()
        values += pose.theta.detach().reshape(-1).tolist()
        values += joints[i].detach().reshape(-1).tolist()
        lines.append(" ".join(_number(v) for v in values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path: Union[str, Path]) -> Trajectory:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    prefix = TRAJECTORY_HEADER.split("{")[0]
    if not lines or not lines[0].startswith(prefix):
        raise DatasetError(f"{path} is not an avatar-slam trajectory file")
    try:
        J = int(lines[0][len(prefix):])
    except ValueError:
        raise DatasetError(f"{path}: malformed header {lines[0]!r}")
    width = 14 + 6 * J
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise DatasetError(f"{path}:{number}: non-numeric value")
        if len(values) != width:
            raise DatasetError(f"{path}:{number}: expected {width} values, found {len(values)}")
        rows.append(values)
    if not rows:
        raise DatasetError(f"{path} holds no frames")
    data = torch.tensor(rows, dtype=torch.float64)
    timestamps = data[:, 0].tolist()
    if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
        raise DatasetError(f"{path}: timestamps must be strictly increasing")
    R = quat_to_matrix(quat_normalize(data[:, 1:5]))
    cameras = torch.stack([make_transform(R[i], data[i, 5:8]) for i in range(len(rows))])
    return Trajectory(
        timestamps=timestamps,
        cameras=cameras,
        poses=data[:, 8 : 14 + 3 * J],
        joints=data[:, 14 + 3 * J :].reshape(-1, J, 3),
    )


def _cell(value: object) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return f"{value:.6f}"
    return str(value)


def write_metrics_csv(path: Union[str, Path], rows: Sequence[Mapping[str, object]]):
    """One row per sequence, columns in ``METRIC_COLUMNS`` order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row.get(column, float("nan"))) for column in METRIC_COLUMNS])


def read_metrics_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def plot_trajectories(
    path: Union[str, Path],
    est_cameras: torch.Tensor,
    ref_cameras: Optional[torch.Tensor] = None,
    est_root: Optional[torch.Tensor] = None,
    ref_root: Optional[torch.Tensor] = None,
):
    """Top-down (x, z) view of camera centers and body root paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def centers(cameras: torch.Tensor):
        R, t = cameras[:, :3, :3], cameras[:, :3, 3]
        return (-(R.transpose(-1, -2) @ t[..., None])[..., 0]).numpy()

    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    est = centers(est_cameras.detach().double())
    ax.plot(est[:, 0], est[:, 2], "-", color="tab:blue", label="camera (estimate)")
    if ref_cameras is not None:
        ref = centers(ref_cameras.detach().double())
        ax.plot(ref[:, 0], ref[:, 2], "--", color="tab:gray", label="camera (reference)")
    if est_root is not None:
        est_root = est_root.detach().double().numpy()
        ax.plot(est_root[:, 0], est_root[:, 2], "-", color="tab:orange", label="body root (estimate)")
    if ref_root is not None:
        ref_root = ref_root.detach().double().numpy()
        ax.plot(ref_root[:, 0], ref_root[:, 2], "--", color="tab:brown", label="body root (reference)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
