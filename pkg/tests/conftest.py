import pytest
import torch

from avatar_slam.body import BodyModel, PoseState, transform_pose
from avatar_slam.slam.state import GaussianMap, Keyframe, posed_joints, render_frame, visible_ids
from avatar_slam.splat import CameraState, Gaussians3D
from avatar_slam.synth import FrameBundle
from avatar_slam.trace import RunTrace, set_current_trace

torch.set_default_dtype(torch.float64)


def chain_body() -> BodyModel:
    """Two joints: root at the origin, child one meter up; one vertex per joint."""
    return BodyModel(
        joint_names=("root", "child"),
        parents=(-1, 0),
        rest_offsets=torch.tensor([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        rest_vertices=torch.tensor([[0.0, 2.0, 0.0], [1.0, 0.0, 0.0]]),
        vertex_lbs=torch.tensor([[0.0, 1.0], [1.0, 0.0]]),
        shape_basis=torch.zeros(2, 10),
        bind_from=torch.tensor([1, 0]),
        bind_to=torch.tensor([1, 0]),
        bind_t=torch.zeros(2),
        bind_radial=torch.tensor([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
    )


@pytest.fixture(scope="session")
def body():
    return BodyModel.create("mini16", rings=4, ring_size=4)


@pytest.fixture(scope="session")
def full_body():
    return BodyModel.create("mini16")


@pytest.fixture
def chain():
    return chain_body()


@pytest.fixture
def trace():
    handle = RunTrace()
    set_current_trace(handle)
    yield handle
    set_current_trace(None)


def wall_scene(z: float = 2.0, spacing: float = 0.15, radius: float = 0.1) -> Gaussians3D:
    """A textured plane of isotropic Gaussians facing the identity camera."""
    xs = torch.arange(-1.35, 1.35 + 1e-9, spacing)
    ys = torch.arange(-1.05, 1.05 + 1e-9, spacing)
    gx, gy = torch.meshgrid(xs, ys, indexing="ij")
    mu = torch.stack([gx.reshape(-1), gy.reshape(-1), torch.full((gx.numel(),), z)], dim=-1)
    color = torch.stack(
        [0.5 + 0.4 * torch.sin(3.0 * mu[:, 0]), 0.5 + 0.4 * torch.cos(4.0 * mu[:, 1]), 0.5 + 0.3 * torch.sin(2.0 * (mu[:, 0] + mu[:, 1]))],
        dim=-1,
    )
    return Gaussians3D.isotropic(mu, radius, 0.9, color)


def frame_from_map(gmap: GaussianMap, body: BodyModel, camera: CameraState, pose: PoseState, index: int = 0, timestamp: float = 0.0) -> Keyframe:
    """Render ``gmap`` and package the render as observations plus a keyframe record."""
    with torch.no_grad():
        out, _ = render_frame(gmap, body, pose, camera, 0.0, use_field=False)
    valid = out.opacity > 0.5
    joints = posed_joints(body, pose).detach()
    K = len(body.keypoint_map)
    height, width = out.opacity.shape
    bundle = FrameBundle(
        index=index,
        timestamp=timestamp,
        rgb=out.image.detach().clone(),
        disparity=torch.where(valid, 1.0 / out.depth.clamp_min(1e-6), torch.zeros_like(out.depth)),
        disparity_valid=valid,
        keypoints=torch.zeros(K, 2),
        keypoint_conf=torch.zeros(K),
        human_mask=out.human_silhouette > 0.5,
        flow=torch.zeros(height, width, 2),
        flow_valid=torch.zeros(height, width, dtype=torch.bool),
        init_pose=transform_pose(pose, camera.T),
    )
    return Keyframe(
        frame_id=index,
        timestamp=timestamp,
        camera_T=camera.T.clone(),
        joints=joints,
        visible=visible_ids(gmap, out),
        bundle=bundle,
        pose=pose.clone(),
        depth=out.depth.detach(),
        opacity=out.opacity.detach(),
    )


@pytest.fixture
def wall():
    return wall_scene()


@pytest.fixture
def small_camera():
    return CameraState.pinhole(24, 18, 20.0)
