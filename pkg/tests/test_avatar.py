import torch

from avatar_slam.body import PoseState, pose_vertices
from avatar_slam.field import FieldOutput
from avatar_slam.splat import deform_avatar, seed_avatar


def _axis_covariance(avatar):
    s = torch.exp(avatar.scale)
    return torch.diag_embed(s * s)


def test_identity_field_at_rest_returns_canonical_gaussians(body):
    avatar = seed_avatar(body, replicates=2, noise=0.01, seed=1)
    world = deform_avatar(avatar, body, PoseState.rest(body.joint_count))
    assert torch.allclose(world.mu, avatar.mu, atol=1e-12)
    assert torch.allclose(world.rot, avatar.rot, atol=1e-12)
    assert torch.allclose(world.frame, torch.eye(3).expand(len(avatar), 3, 3), atol=1e-12)
    assert torch.equal(world.scale, avatar.scale)
    assert torch.equal(world.opacity_logit, avatar.opacity_logit)
    assert torch.allclose(world.color, avatar.color)
    assert world.human.all()


def test_pure_translation_moves_centers_and_keeps_rotations(chain):
    avatar = seed_avatar(chain, replicates=1, noise=0.0)
    pose = PoseState.rest(2)
    pose.root_translation = torch.tensor([0.5, -1.0, 2.0])
    world = deform_avatar(avatar, chain, pose)
    assert torch.allclose(world.mu, avatar.mu + pose.root_translation, atol=1e-12)
    assert torch.allclose(world.covariance(), _axis_covariance(avatar), atol=1e-14)
    assert torch.equal(world.rot, avatar.rot)


def test_occlusion_factor_scales_and_clamps_color(chain):
    avatar = seed_avatar(chain, replicates=1, noise=0.0)
    avatar.color = torch.full_like(avatar.color, 0.6)
    n = len(avatar)
    boosted = FieldOutput(
        delta_mu_prime=torch.zeros(n, 3),
        delta_R=torch.tensor([1.0, 0.0, 0.0, 0.0]).expand(n, 4),
        delta_c=torch.full((n, 1), 2.0),
        clamped=torch.zeros(n, dtype=torch.bool),
    )
    world = deform_avatar(avatar, chain, PoseState.rest(2), field_output=boosted)
    assert torch.equal(world.color, torch.ones(n, 3))

    dimmed = FieldOutput(boosted.delta_mu_prime, boosted.delta_R, torch.full((n, 1), 0.5), boosted.clamped)
    world = deform_avatar(avatar, chain, PoseState.rest(2), field_output=dimmed)
    assert torch.allclose(world.color, torch.full((n, 3), 0.3))


def test_field_offset_is_applied_before_skinning(chain):
    avatar = seed_avatar(chain, replicates=1, noise=0.0)
    n = len(avatar)
    shift = FieldOutput(
        delta_mu_prime=torch.tensor([[1.0, 0.0, 0.0]]).expand(n, 3),
        delta_R=torch.tensor([1.0, 0.0, 0.0, 0.0]).expand(n, 4),
        delta_c=torch.ones(n, 1),
        clamped=torch.zeros(n, dtype=torch.bool),
    )
    pose = PoseState.rest(2)
    pose.root_rotation = torch.tensor([0.0, 0.0, torch.pi / 2])
    world = deform_avatar(avatar, chain, pose, field_output=shift)
    # the +x canonical offset is rotated onto +y by the root
    base = deform_avatar(avatar, chain, pose)
    assert torch.allclose(world.mu - base.mu, torch.tensor([[0.0, 1.0, 0.0]]).expand(n, 3), atol=1e-12)


def test_seeded_avatar_follows_posed_mesh(body):
    avatar = seed_avatar(body, replicates=1, noise=0.0)
    pose = PoseState.rest(body.joint_count)
    pose.theta = 0.3 * torch.randn(body.joint_count, 3, generator=torch.Generator().manual_seed(0))
    pose.root_translation = torch.tensor([0.2, 0.0, 1.0])
    world = deform_avatar(avatar, body, pose)
    verts, _ = pose_vertices(body, pose)
    assert torch.allclose(world.mu, verts, atol=1e-10)


def test_lbs_offsets_shift_weights_but_keep_rows_stochastic(body):
    avatar = seed_avatar(body, replicates=1, noise=0.0)
    avatar.lbs_offset = torch.randn(avatar.lbs_offset.shape, generator=torch.Generator().manual_seed(3))
    weights = avatar.lbs_weights()
    assert torch.allclose(weights.sum(dim=1), torch.ones(len(avatar)), atol=1e-12)
    assert torch.equal(weights == 0, body.vertex_lbs == 0)
    avatar.validate(body.vertex_count)
