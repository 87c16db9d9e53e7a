import numpy as np
import pytest
import torch
from scipy import ndimage

from avatar_slam.body import transform_pose
from avatar_slam.errors import ContractViolation, DatasetError, TruncatedFile, VersionMismatch
from avatar_slam.geometry import invert_transform, project, transform_points
from avatar_slam.synth import (
    MOTIONS,
    NoiseConfig,
    WorldSpec,
    camera_trajectory,
    disparity_oracle,
    generate_sequence,
    keypoint_oracle,
    load_dataset,
    mask_oracle,
    motion_library,
    serialize_dataset,
)


def _spec(**overrides):
    values = dict(frames=3, width=40, height=30, focal=40.0, clutter=20, seed=3, camera_sweep=0.1)
    values.update(overrides)
    return WorldSpec(**values)


@pytest.fixture(scope="module")
def noiseless(body):
    return generate_sequence(_spec(noise=NoiseConfig.zero()), body)


@pytest.fixture(scope="module")
def noisy(body):
    return generate_sequence(_spec(), body)


def test_zero_noise_priors_equal_ground_truth(noiseless):
    seq = noiseless
    truth = seq.truth
    for i, frame in enumerate(seq.frames):
        valid = frame.disparity_valid
        assert valid.any()
        assert torch.allclose(frame.disparity[valid], 1.0 / truth.depth[i][valid], rtol=1e-6)

        camera = seq.true_camera(i)
        expected = project(camera.K, transform_points(camera.T, seq.body.keypoints(truth.joints[i])))
        assert torch.allclose(frame.keypoints, expected, atol=1e-9)
        assert torch.equal(frame.human_mask, truth.silhouette[i] > 0.5)

        world = transform_pose(frame.init_pose, invert_transform(truth.cameras[i]))
        assert torch.allclose(world.theta, truth.poses[i].theta, atol=1e-12)
        assert torch.allclose(world.root_rotation, truth.poses[i].root_rotation, atol=1e-9)
        assert torch.allclose(world.root_translation, truth.poses[i].root_translation, atol=1e-9)
        assert torch.equal(frame.init_pose.beta, truth.poses[i].beta)


def test_human_is_visible_with_confident_keypoints(noiseless):
    frame = noiseless.frames[0]
    assert frame.human_mask.sum() > 20
    assert (frame.keypoint_conf > 0.5).sum() >= 4
    assert ((frame.keypoint_conf >= 0.0) & (frame.keypoint_conf <= 1.0)).all()


def test_flow_oracle_matches_reprojection(noiseless):
    seq = noiseless
    flow, valid = seq.flow_between(0, 1)
    assert valid.sum() > 100
    assert torch.equal(flow, seq.frames[1].flow)
    assert not seq.frames[0].flow_valid.any()

    v, u = torch.nonzero(valid, as_tuple=True)
    cam0, cam1 = seq.true_camera(0), seq.true_camera(1)
    uv = torch.stack([u, v], dim=-1).double()
    depth = seq.truth.depth[0][v, u]
    rays = torch.cat([(uv - cam0.K[:2, 2]) / cam0.focal, torch.ones(len(u), 1)], dim=-1) * depth[:, None]
    world = transform_points(invert_transform(cam0.T), rays)
    expected = project(cam1.K, transform_points(cam1.T, world)) - uv
    assert torch.allclose(flow[v, u], expected, atol=1e-4)

    same, same_valid = seq.flow_between(2, 2)
    assert same[same_valid].abs().max() < 1e-5
    assert not (same_valid & seq.frames[2].human_mask).any()


def test_flow_between_rejects_unknown_frames(noiseless):
    with pytest.raises(ContractViolation):
        noiseless.flow_between(0, 3)


def test_keypoint_noise_has_expected_magnitude(noiseless):
    seq = noiseless
    camera = seq.true_camera(0)
    exact = noiseless.frames[0].keypoints
    residuals = []
    for k in range(70):
        noisy, _ = keypoint_oracle(seq.body, seq.truth.joints[0], camera, seq.truth.silhouette[0], 2.0, torch.Generator().manual_seed(k))
        residuals.append((noisy - exact).norm(dim=-1))
    residuals = torch.cat(residuals)
    assert residuals.numel() >= 1000
    assert 1.0 <= float(residuals.mean()) <= 3.2


def test_hidden_scale_shift_is_recoverable_by_least_squares(noisy):
    seq = noisy
    w_true, b_true = seq.truth.scale_shift
    frame = seq.frames[0]
    valid = frame.disparity_valid
    d = frame.disparity[valid]
    inverse = 1.0 / seq.truth.depth[0][valid]
    A = torch.stack([d, torch.ones_like(d)], dim=-1)
    w, b = torch.linalg.lstsq(A, inverse[:, None]).solution[:, 0]
    assert abs(float(w) - w_true) < 0.05 * w_true
    relative = (w * d + b - inverse) / inverse
    assert float(relative.pow(2).mean().sqrt()) < 1.2 * seq.spec.noise.disparity


def test_disparity_outliers_replace_the_requested_fraction():
    depth = torch.full((60, 60), 2.0)
    opacity = torch.ones(60, 60)
    clean, _ = disparity_oracle(depth, opacity, 0.0, 1.0, 0.0, torch.Generator().manual_seed(0))
    dirty, valid = disparity_oracle(depth, opacity, 0.0, 1.0, 0.0, torch.Generator().manual_seed(0), outlier_ratio=0.3)
    changed = (dirty != clean).double().mean()
    assert 0.25 < float(changed) < 0.35
    assert (dirty[valid] > 0).all()


def test_mask_noise_stays_within_the_boundary_band():
    silhouette = torch.zeros(40, 40)
    silhouette[10:30, 12:28] = 0.9
    exact = mask_oracle(silhouette, 0.0, torch.Generator().manual_seed(0))
    assert torch.equal(exact, silhouette > 0.5)
    core = exact.numpy()
    band = ndimage.binary_dilation(core, iterations=2) & ~ndimage.binary_erosion(core, iterations=2)
    for seed in range(8):
        noisy = mask_oracle(silhouette, 2.0, torch.Generator().manual_seed(seed)).numpy()
        assert not np.any((noisy ^ core) & ~band)


def test_same_seed_gives_identical_files(tmp_path, body, noisy):
    again = generate_sequence(_spec(), body)
    a, b = tmp_path / "a.asds", tmp_path / "b.asds"
    serialize_dataset(noisy, a)
    serialize_dataset(again, b)
    assert a.read_bytes() == b.read_bytes()

    other = generate_sequence(_spec(seed=4), body)
    serialize_dataset(other, b)
    assert a.read_bytes() != b.read_bytes()


def test_dataset_round_trip_is_lossless(tmp_path, noisy):
    path = tmp_path / "seq.asds"
    serialize_dataset(noisy, path)
    loaded = load_dataset(path)
    assert loaded.spec == noisy.spec
    assert len(loaded) == len(noisy)
    for a, b in zip(noisy.frames, loaded.frames):
        for name in ("rgb", "disparity", "disparity_valid", "keypoints", "keypoint_conf", "human_mask", "flow", "flow_valid"):
            assert torch.equal(getattr(a, name), getattr(b, name)), name
        assert torch.equal(a.init_pose.to_vector(), b.init_pose.to_vector())
        assert a.timestamp == b.timestamp
    assert torch.equal(loaded.truth.depth, noisy.truth.depth)
    assert torch.equal(loaded.truth.scene.mu, noisy.truth.scene.mu)
    assert torch.equal(loaded.body.vertex_lbs, noisy.body.vertex_lbs)
    assert torch.equal(loaded.flow_between(0, 2)[0], noisy.flow_between(0, 2)[0])

    copy = tmp_path / "copy.asds"
    serialize_dataset(loaded, copy)
    assert copy.read_bytes() == path.read_bytes()


def test_corrupted_dataset_headers_raise_structured_errors(tmp_path, noisy):
    path = tmp_path / "seq.asds"
    serialize_dataset(noisy, path)
    data = path.read_bytes()

    bad = tmp_path / "bad.asds"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DatasetError):
        load_dataset(bad)

    bad.write_bytes(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(VersionMismatch):
        load_dataset(bad)

    bad.write_bytes(data[: len(data) // 2])
    with pytest.raises(TruncatedFile):
        load_dataset(bad)


def test_body_leaving_the_frustum_is_rejected(body):
    with pytest.raises(ContractViolation, match="frustum"):
        generate_sequence(_spec(camera_path="static", focal=2000.0, frames=2), body)


def test_camera_jumps_are_rejected():
    with pytest.raises(ContractViolation):
        camera_trajectory(_spec(camera_path="dolly", camera_sweep=5.0, frames=2))


def test_world_spec_from_config_dict():
    spec = WorldSpec.from_dict({"preset": "street", "frames": 5, "noise": {"keypoints": 0.5}})
    assert spec.preset == "street"
    assert spec.noise.keypoints == 0.5
    assert spec.noise.flow == NoiseConfig().flow
    assert WorldSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ContractViolation):
        WorldSpec.from_dict({"frames": 5, "colour": "red"})
    with pytest.raises(ContractViolation):
        WorldSpec(preset="forest")


def test_motion_library_covers_every_motion(body):
    library = motion_library(body, samples_per_motion=4)
    assert library.shape == (4 * len(MOTIONS), body.joint_count, 3)
    assert library.abs().sum() > 0
