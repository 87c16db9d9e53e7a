import math

import pytest
import torch

from avatar_slam.body import (
    BodyModel,
    PoseState,
    apply_transform,
    forward_kinematics,
    joint_jacobian,
    load_body,
    pose_vertices,
    save_body,
    skinning_transform,
)
from avatar_slam.errors import ContractViolation
from avatar_slam.geometry import make_transform, so3_exp
from avatar_slam.numerics import central_difference, relative_error


def _random_pose(model, seed=0, scale=0.4):
    g = torch.Generator().manual_seed(seed)
    pose = PoseState.rest(model.joint_count)
    pose.theta = scale * torch.randn(model.joint_count, 3, generator=g)
    pose.root_rotation = scale * torch.randn(3, generator=g)
    pose.root_translation = torch.randn(3, generator=g)
    return pose


def test_rest_pose_gives_identity_transforms(body):
    transforms = forward_kinematics(body, PoseState.rest(body.joint_count))
    eye = torch.eye(4).expand(body.joint_count, 4, 4)
    assert torch.allclose(transforms.M, eye, atol=1e-12)
    assert torch.allclose(transforms.joints, body.rest_joints, atol=1e-12)


def test_root_translation_carries_every_joint(body):
    pose = PoseState.rest(body.joint_count)
    pose.root_translation = torch.tensor([1.0, 0.0, 0.0])
    M = forward_kinematics(body, pose).M
    assert torch.allclose(M[:, :3, :3], torch.eye(3).expand(body.joint_count, 3, 3))
    assert torch.allclose(M[:, :3, 3], torch.tensor([1.0, 0.0, 0.0]).expand(body.joint_count, 3), atol=1e-12)


def test_two_joint_chain_matches_hand_composed_matrices(chain):
    pose = PoseState.rest(2)
    pose.theta = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, math.pi / 2]])
    transforms = forward_kinematics(chain, pose)

    rz = torch.tensor([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    to_joint = make_transform(torch.eye(3), torch.tensor([0.0, 1.0, 0.0]))
    rotate = make_transform(rz, torch.zeros(3))
    from_joint = make_transform(torch.eye(3), torch.tensor([0.0, -1.0, 0.0]))
    expected = to_joint @ rotate @ from_joint
    assert torch.allclose(transforms.M[1], expected, atol=1e-12)

    tip = apply_transform(transforms.M[1], torch.tensor([0.0, 2.0, 0.0]))
    assert torch.allclose(tip, torch.tensor([-1.0, 1.0, 0.0]), atol=1e-12)


def test_skinning_one_hot_weight_returns_joint_transform(body):
    transforms = forward_kinematics(body, _random_pose(body))
    weights = torch.zeros(body.joint_count)
    weights[5] = 1.0
    assert torch.allclose(skinning_transform(weights, transforms), transforms.M[5])


def test_skinning_identical_transforms_ignore_weights():
    M = make_transform(so3_exp(torch.tensor([0.1, 0.2, 0.3])), torch.tensor([1.0, 2.0, 3.0]))
    stack = M.expand(3, 4, 4)
    P = skinning_transform(torch.tensor([0.2, 0.5, 0.3]), stack)
    assert torch.allclose(P, M, atol=1e-14)


def test_skinning_blends_translations_linearly():
    M1 = make_transform(torch.eye(3), torch.tensor([1.0, 0.0, 0.0]))
    M2 = make_transform(torch.eye(3), torch.tensor([0.0, 1.0, 0.0]))
    P = skinning_transform(torch.tensor([0.5, 0.5]), torch.stack([M1, M2]))
    assert torch.allclose(P[:3, 3], torch.tensor([0.5, 0.5, 0.0]))


def test_skinning_rejects_unnormalized_weights():
    stack = torch.eye(4).expand(2, 4, 4)
    with pytest.raises(ContractViolation):
        skinning_transform(torch.tensor([0.7, 0.7]), stack)
    with pytest.raises(ContractViolation):
        skinning_transform(torch.tensor([1.5, -0.5]), stack)


def test_rest_pose_vertices_equal_rest_mesh(body):
    verts, joints = pose_vertices(body, PoseState.rest(body.joint_count))
    assert torch.allclose(verts, body.rest_vertices, atol=1e-12)
    assert joints.shape == (body.joint_count, 3)


def test_root_motion_preserves_pairwise_distances(body):
    pose = PoseState.rest(body.joint_count)
    pose.root_rotation = torch.tensor([0.3, -1.2, 0.5])
    pose.root_translation = torch.tensor([0.4, 1.0, -2.0])
    verts, _ = pose_vertices(body, pose)
    before = torch.cdist(body.rest_vertices, body.rest_vertices)
    after = torch.cdist(verts, verts)
    assert (before - after).abs().max() < 1e-9


def test_common_rigid_transform_moves_skinned_points_rigidly(body):
    transforms = forward_kinematics(body, _random_pose(body, seed=3))
    T = make_transform(so3_exp(torch.tensor([0.5, 0.1, -0.2])), torch.tensor([0.3, -0.1, 2.0]))
    P = skinning_transform(body.vertex_lbs, transforms)
    moved = skinning_transform(body.vertex_lbs, T @ transforms.M)
    a = apply_transform(T @ P, body.rest_vertices)
    b = apply_transform(moved, body.rest_vertices)
    assert torch.allclose(a, b, atol=1e-12)


def test_identity_joint_transforms_are_identity_map(body):
    P = skinning_transform(body.vertex_lbs, torch.eye(4).expand(body.joint_count, 4, 4))
    assert torch.allclose(apply_transform(P, body.rest_vertices), body.rest_vertices)


def test_beta_matches_model_rebuilt_with_scaled_offsets(body):
    beta = torch.zeros(10)
    beta[2] = 1.0  # arms +10%
    pose = _random_pose(body, seed=1)
    pose.beta = beta
    verts, joints = pose_vertices(body, pose)

    oracle = body.rescaled(body.bone_scales(beta))
    pose0 = PoseState(pose.theta, torch.zeros(10), pose.root_rotation, pose.root_translation)
    expected_verts, expected_joints = pose_vertices(oracle, pose0)
    assert torch.allclose(verts, expected_verts, atol=1e-12)
    assert torch.allclose(joints, expected_joints, atol=1e-12)


def test_scaling_one_bone_moves_its_vertices_proportionally(body):
    bone = body.joint_names.index("l_elbow")
    parent = body.parents[bone]
    scales = torch.ones(body.joint_count)
    scales[bone] = 1.1
    scaled = body.rescaled(scales)

    bound = (body.bind_from == parent) & (body.bind_to == bone)
    assert bound.any()
    axis = body.rest_offsets[bone] / body.rest_offsets[bone].norm()
    rest_j = body.rest_joints[parent]
    new_j = scaled.rest_joints[parent]
    before = (body.rest_vertices[bound] - rest_j) @ axis
    after = (scaled.rest_vertices[bound] - new_j) @ axis
    radial_before = body.rest_vertices[bound] - rest_j - before[:, None] * axis
    radial_after = scaled.rest_vertices[bound] - new_j - after[:, None] * axis
    assert torch.allclose(after - before, 0.1 * body.bind_t[bound] * body.rest_offsets[bone].norm(), atol=1e-12)
    assert torch.allclose(radial_before, radial_after, atol=1e-12)
    assert torch.equal(scaled.vertex_lbs, body.vertex_lbs)


def test_bone_scales_are_clamped(body):
    scales = body.bone_scales(torch.full((10,), 10.0))
    assert scales[1:].max() <= 1.3
    assert scales[0] == 1.0
    assert body.bone_scales(torch.full((10,), -10.0))[1:].min() >= 0.7


@pytest.mark.parametrize("preset", ["mini16", "smpl24"])
def test_presets_have_row_stochastic_weights(preset):
    model = BodyModel.create(preset)
    assert model.vertex_lbs.min() >= 0
    assert torch.allclose(model.vertex_lbs.sum(dim=1), torch.ones(model.vertex_count), atol=1e-9)
    assert model.rest_vertices.norm(dim=1).max() < 3.0
    assert model.keypoint_map == tuple(range(min(25, model.joint_count)))


def test_default_mini_body_size():
    model = BodyModel.create("mini16")
    assert model.joint_count == 16
    assert 900 <= model.vertex_count <= 1400


def test_cyclic_or_multi_root_tree_is_rejected(chain):
    with pytest.raises(ContractViolation):
        BodyModel(
            joint_names=("a", "b"),
            parents=(-1, -1),
            rest_offsets=chain.rest_offsets,
            rest_vertices=chain.rest_vertices,
            vertex_lbs=chain.vertex_lbs,
            shape_basis=chain.shape_basis,
            bind_from=chain.bind_from,
            bind_to=chain.bind_to,
            bind_t=chain.bind_t,
            bind_radial=chain.bind_radial,
        )


def test_pose_dimension_mismatch_is_contract_violation(body):
    with pytest.raises(ContractViolation):
        forward_kinematics(body, PoseState.rest(body.joint_count - 1))


def test_forward_kinematics_is_bit_stable(body):
    pose = _random_pose(body, seed=7)
    a = forward_kinematics(body, pose).M
    b = forward_kinematics(body, pose).M
    assert torch.equal(a, b)


def test_rotation_blocks_are_orthonormal(body):
    M = forward_kinematics(body, _random_pose(body, seed=2, scale=1.5)).M
    R = M[:, :3, :3]
    assert torch.allclose(R @ R.transpose(1, 2), torch.eye(3).expand_as(R), atol=1e-10)
    assert torch.allclose(torch.linalg.det(R), torch.ones(body.joint_count), atol=1e-8)


def test_jacobian_translation_columns_are_unit_directions(body):
    jac = joint_jacobian(body, PoseState.rest(body.joint_count), body.rest_vertices)
    assert torch.allclose(jac[..., -3:], torch.eye(3).expand(body.vertex_count, 3, 3))


def test_jacobian_of_rotation_generator(chain):
    point = torch.tensor([[1.0, 0.0, 0.0]])
    weights = torch.tensor([[1.0, 0.0]])
    jac = joint_jacobian(chain, PoseState.rest(2), point, weights)
    assert torch.allclose(jac[0, :, 2], torch.tensor([0.0, 1.0, 0.0]))


def test_jacobian_matches_central_differences(body):
    pose = _random_pose(body, seed=4)
    points = body.rest_vertices[::9]
    weights = body.vertex_lbs[::9]
    analytic = joint_jacobian(body, pose, points, weights)

    def posed(vector):
        candidate = PoseState.from_vector(vector, body.joint_count)
        P = skinning_transform(weights, forward_kinematics(body, candidate))
        return apply_transform(P, points)

    numeric = central_difference(posed, pose.to_vector())
    assert relative_error(analytic, numeric) < 1e-5


def test_canonicalized_pose_has_bounded_angles(body):
    pose = PoseState.rest(body.joint_count)
    pose.theta = torch.full((body.joint_count, 3), 4.0)
    canon = pose.canonicalized()
    assert canon.theta.norm(dim=1).max() <= math.pi + 1e-9
    assert torch.allclose(so3_exp(canon.theta), so3_exp(pose.theta), atol=1e-10)


def test_save_and_load_round_trip(tmp_path, body):
    path = tmp_path / "body.bin"
    save_body(body, path)
    loaded = load_body(path)
    assert loaded.parents == body.parents
    assert torch.equal(loaded.vertex_lbs, body.vertex_lbs)
    assert torch.equal(loaded.rest_vertices, body.rest_vertices)
    assert loaded.keypoint_map == body.keypoint_map
