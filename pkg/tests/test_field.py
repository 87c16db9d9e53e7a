import math

import pytest
import torch

from avatar_slam.body import BodyModel, PoseState
from avatar_slam.errors import ContractViolation, DivergenceError
from avatar_slam.field import (
    DeformationField,
    FieldOutput,
    HashFieldConfig,
    HashGrid,
    PoseSampler,
    deform_loss,
    encode_pose,
    encode_time,
    held_out_deform_loss,
    pretrain_field,
    query_field,
)
from avatar_slam.matchers import expect
from avatar_slam.numerics import central_difference, relative_error

SMALL = dict(levels=4, table_size=2 ** 10, mlp_width=16, mlp_hidden_layers=2)


def _field(body, seed=0, heads=0.0, **overrides):
    config = HashFieldConfig(**{**SMALL, **overrides})
    field = DeformationField.for_body(config, body, seed=seed)
    if heads:
        field.reset_heads(std=heads, generator=torch.Generator().manual_seed(seed + 1))
    return field


def _inputs(body, n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(body.vertex_count, generator=g)[:n]
    theta = 0.3 * torch.randn(body.joint_count, 3, generator=g)
    return body.rest_vertices[idx], body.vertex_lbs[idx], theta


def test_default_resolution_schedule():
    res = HashFieldConfig().resolutions()
    assert res[:5] == [4, 6, 9, 13, 20]
    assert len(res) == 16
    assert all(b > a for a, b in zip(res, res[1:]))


def test_invalid_config_is_rejected():
    with pytest.raises(ContractViolation):
        HashFieldConfig(levels=0)
    with pytest.raises(ContractViolation):
        HashFieldConfig(per_level_scale=1.0)


def test_time_encoding_endpoints_and_quarter():
    zero, _ = encode_time(0.0)
    assert torch.equal(zero[0::2], torch.zeros(4))
    assert torch.equal(zero[1::2], torch.ones(4))
    one, _ = encode_time(1.0)
    assert one[0::2].abs().max() < 1e-12
    quarter, clamped = encode_time(0.25)
    expected = []
    for k in range(4):
        expected += [math.sin(2 ** k * math.pi * 0.25), math.cos(2 ** k * math.pi * 0.25)]
    assert torch.allclose(quarter, torch.tensor(expected), atol=1e-15)
    assert not clamped


def test_time_outside_unit_interval_is_clamped_with_warning(trace):
    gamma, clamped = encode_time(1.5)
    assert clamped
    assert torch.equal(gamma, encode_time(1.0)[0])
    expect(trace).to_have_warning("time_clamped", times=1)


def test_pose_encoding_one_hot_identity_attention():
    J = 3
    quats = torch.randn(J, 4)
    W = torch.tensor([[0.0, 1.0, 0.0]])
    gamma = encode_pose(quats, W, torch.eye(J)).reshape(J, 4)
    assert torch.equal(gamma[1], quats[1])
    assert torch.equal(gamma[0], torch.zeros(4))
    assert torch.equal(gamma[2], torch.zeros(4))


def test_pose_encoding_of_rest_pose_is_mask_times_identity_quaternion(chain):
    quats = torch.tensor([[1.0, 0.0, 0.0, 0.0]]).expand(2, 4)
    W = torch.tensor([[0.3, 0.7]])
    V = chain.adjacency()
    gamma = encode_pose(quats, W, V).reshape(2, 4)
    mask = W[0] @ V.T
    assert torch.allclose(gamma[:, 0], mask)
    assert torch.equal(gamma[:, 1:], torch.zeros(2, 3))


def test_pose_encoding_three_joint_chain_matches_direct_evaluation():
    V = torch.tensor([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]])
    quats = torch.randn(3, 4)
    W = torch.tensor([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    gamma = encode_pose(quats, W, V).reshape(2, 3, 4)
    for n in range(2):
        for j in range(3):
            weight = sum(V[j, k] * W[n, k] for k in range(3))
            assert torch.allclose(gamma[n, j], weight * quats[j])


def test_pose_encoding_rejects_wide_attention():
    V = torch.ones(6, 6)
    with pytest.raises(ContractViolation):
        encode_pose(torch.randn(6, 4), torch.full((1, 6), 1 / 6), V)


def test_zero_heads_give_identity_deformation(body):
    field = _field(body)
    centers, W, theta = _inputs(body)
    out = field(centers, 0.3, theta, W)
    assert torch.equal(out.delta_mu_prime, torch.zeros_like(out.delta_mu_prime))
    assert torch.equal(out.delta_R, torch.tensor([[1.0, 0.0, 0.0, 0.0]]).expand_as(out.delta_R))
    assert torch.equal(out.delta_c, torch.ones_like(out.delta_c))
    assert float(deform_loss(out)) == 0.0


def test_grid_vertex_query_reads_the_stored_entry():
    config = HashFieldConfig(levels=1, table_size=2 ** 10, mlp_width=8, mlp_hidden_layers=1)
    grid = HashGrid(config, torch.Generator().manual_seed(0))
    x = torch.tensor([[1 / 4, 2 / 4, 3 / 4]])
    row = 1 + 2 * 5 + 3 * 25
    assert torch.equal(grid(x)[0], grid.tables[0, row])


def test_grid_interpolates_linearly_along_a_cell_edge():
    config = HashFieldConfig(levels=1, table_size=2 ** 10, mlp_width=8, mlp_hidden_layers=1)
    grid = HashGrid(config, torch.Generator().manual_seed(0))
    a = grid.tables[0, 1 + 2 * 5 + 3 * 25]
    b = grid.tables[0, 2 + 2 * 5 + 3 * 25]
    for s in (0.0, 0.25, 0.6, 0.9):
        x = torch.tensor([[(1 + s) / 4, 2 / 4, 3 / 4]])
        assert torch.allclose(grid(x)[0], (1 - s) * a + s * b, atol=1e-15)


def test_hashed_levels_stay_within_the_table():
    config = HashFieldConfig(levels=4, table_size=2 ** 6, mlp_width=8, mlp_hidden_layers=1)
    grid = HashGrid(config)
    corners = torch.randint(0, 14, (100, 3))
    idx = grid.level_indices(3, corners)
    assert idx.min() >= 0 and idx.max() < 2 ** 6


def _reference_forward(field, centers, t, theta, W):
    cfg = field.config
    x = ((centers - field.box_min) / (field.box_max - field.box_min)).clamp(0, 1)

    def grid_features(grid, point):
        feats = []
        for level, res in enumerate(cfg.resolutions()):
            s = [float(c) * res for c in point]
            base = [min(max(math.floor(v), 0), res - 1) for v in s]
            frac = [v - b for v, b in zip(s, base)]
            acc = torch.zeros(cfg.features_per_level)
            for i in (0, 1):
                for j in (0, 1):
                    for k in (0, 1):
                        cx, cy, cz = base[0] + i, base[1] + j, base[2] + k
                        if (res + 1) ** 3 <= cfg.table_size:
                            row = cx + cy * (res + 1) + cz * (res + 1) ** 2
                        else:
                            row = (cx * 1 ^ cy * 2654435761 ^ cz * 805459861) % cfg.table_size
                        w = (frac[0] if i else 1 - frac[0]) * (frac[1] if j else 1 - frac[1]) * (frac[2] if k else 1 - frac[2])
                        acc = acc + w * grid.tables[level, row]
            feats.append(acc)
        return torch.cat(feats)

    gamma_t = []
    for k in range(cfg.time_degree):
        gamma_t += [math.sin(2 ** k * math.pi * t), math.cos(2 ** k * math.pi * t)]
    quats = []
    for phi in theta:
        angle = float(phi.norm())
        axis = phi / angle
        quats.append(torch.cat([torch.tensor([math.cos(angle / 2)]), axis * math.sin(angle / 2)]))
    quats = torch.stack(quats)

    def run_mlp(mlp, h):
        linears = [m for m in mlp if isinstance(m, torch.nn.Linear)]
        for layer in linears[:-1]:
            h = torch.clamp(h @ layer.weight.T + layer.bias, min=0.0)
        return h @ linears[-1].weight.T + linears[-1].bias

    outputs = []
    for n in range(centers.shape[0]):
        mask = field.attention @ W[n]
        cond = torch.cat([torch.tensor(gamma_t), (mask[:, None] * quats).reshape(-1)])
        geo = run_mlp(field.geometry_mlp, torch.cat([grid_features(field.geometry_grid, x[n]), cond]))
        occ = run_mlp(field.occlusion_mlp, torch.cat([grid_features(field.occlusion_grid, x[n]), cond]))
        q = geo[3:] + torch.tensor([1.0, 0.0, 0.0, 0.0])
        outputs.append((geo[:3], q / q.norm(), 2.0 / (1.0 + torch.exp(-occ))))
    return outputs


def test_forward_matches_straight_line_reimplementation(body):
    field = _field(body, heads=0.2)
    centers, W, theta = _inputs(body, n=3, seed=5)
    out = field(centers, 0.37, theta, W)
    for n, (mu, q, c) in enumerate(_reference_forward(field, centers, 0.37, theta, W)):
        assert torch.allclose(out.delta_mu_prime[n], mu, atol=1e-12)
        assert torch.allclose(out.delta_R[n], q, atol=1e-12)
        assert torch.allclose(out.delta_c[n], c, atol=1e-12)


def test_outputs_satisfy_ranges(body):
    field = _field(body, heads=3.0)
    centers, W, theta = _inputs(body, n=20)
    out = field(centers, 0.5, theta, W)
    assert torch.allclose(out.delta_R.norm(dim=1), torch.ones(20), atol=1e-7)
    assert out.delta_c.min() >= 0 and out.delta_c.max() <= 2


def test_out_of_box_center_is_clamped_and_flagged(body, trace):
    field = _field(body)
    centers, W, theta = _inputs(body, n=2)
    centers = centers.clone()
    centers[0] = torch.tensor([10.0, 0.0, 0.0])
    out = field(centers, 0.5, theta, W)
    assert out.clamped.tolist() == [True, False]
    expect(trace).to_have_warning("field_query_clamped")


def test_ablated_outputs_are_identity(body):
    field = _field(body, heads=0.5, enable_deformation=False, enable_occlusion=False)
    centers, W, theta = _inputs(body)
    out = field(centers, 0.5, theta, W)
    identity = FieldOutput.identity(centers.shape[0])
    assert torch.equal(out.delta_mu_prime, identity.delta_mu_prime)
    assert torch.equal(out.delta_c, identity.delta_c)


def test_missing_field_queries_identity(body):
    centers, W, theta = _inputs(body)
    out = query_field(None, centers, 0.1, theta, W)
    assert torch.equal(out.delta_c, torch.ones(centers.shape[0], 1))


def test_backward_without_forward_is_contract_violation(body):
    field = _field(body)
    with pytest.raises(ContractViolation):
        field.backward({"delta_mu_prime": torch.zeros(1, 3)})


def _upstream(n, seed=9):
    g = torch.Generator().manual_seed(seed)
    return {
        "delta_mu_prime": torch.randn(n, 3, generator=g),
        "delta_R": torch.randn(n, 4, generator=g),
        "delta_c": torch.randn(n, 1, generator=g),
    }


def _objective(field, centers, t, theta, W, upstream):
    out = field(centers, t, theta, W)
    return sum((upstream[k] * getattr(out, k)).sum() for k in upstream)


def test_backward_matches_finite_differences_for_each_parameter_class(body):
    field = _field(body, heads=0.3)
    with torch.no_grad():
        field.geometry_grid.tables.mul_(1e3)
    centers, W, theta = _inputs(body, n=4, seed=2)
    theta = theta.clone().requires_grad_(True)
    upstream = _upstream(4)
    field(centers, 0.6, theta, W)
    grads = field.backward(upstream)

    # table entry used by the first center at the coarsest level
    x, _ = field.normalize(centers[:1])
    corner = torch.floor(x * 4).clamp(0, 3).long()
    row = int(field.geometry_grid.level_indices(0, corner)[0])
    tables = field.geometry_grid.tables

    def by_table(values):
        original = tables[0, row].clone()
        tables.data[0, row] = values
        result = _objective(field, centers, 0.6, theta.detach(), W, upstream)
        tables.data[0, row] = original
        return result

    numeric = central_difference(by_table, tables[0, row].detach())
    assert relative_error(grads["geometry_grid.tables"][0, row], numeric) < 1e-4

    weight = field.geometry_mlp[0].weight

    def by_weight(values):
        original = weight[0, :5].clone()
        weight.data[0, :5] = values
        result = _objective(field, centers, 0.6, theta.detach(), W, upstream)
        weight.data[0, :5] = original
        return result

    numeric = central_difference(by_weight, weight[0, :5].detach())
    assert relative_error(grads["geometry_mlp.0.weight"][0, :5], numeric) < 1e-4

    numeric = central_difference(lambda th: _objective(field, centers, 0.6, th, W, upstream), theta.detach())
    assert relative_error(grads["theta"], numeric) < 1e-4


def test_joints_outside_attention_support_get_zero_gradient(body):
    field = _field(body, heads=0.3)
    ankle = body.joint_names.index("l_ankle")
    W = torch.zeros(1, body.joint_count)
    W[0, ankle] = 1.0
    centers = body.rest_vertices[:1]
    theta = (0.2 * torch.randn(body.joint_count, 3, generator=torch.Generator().manual_seed(0))).requires_grad_(True)
    field(centers, 0.5, theta, W)
    grads = field.backward(_upstream(1))
    support = {ankle, body.parents[ankle]}
    for j in range(body.joint_count):
        if j not in support:
            assert torch.equal(grads["theta"][j], torch.zeros(3))
    assert grads["theta"][ankle].abs().sum() > 0


def _sampler(body, seed=0):
    return PoseSampler(PoseState.rest(body.joint_count), library=0.3 * torch.randn(4, body.joint_count, 3), seed=seed)


def test_pretraining_zero_heads_is_a_no_op(body):
    field = _field(body)
    centers, W, _ = _inputs(body, n=16)
    pretrain_field(field, centers, W, _sampler(body), iterations=5, lr=1e-3)
    samples = [_sampler(body, seed=3)() for _ in range(3)]
    assert held_out_deform_loss(field, centers, W, samples) < 1e-12


def test_pretraining_halves_held_out_deformation_loss(body, trace):
    field = _field(body, heads=0.1)
    centers, W, _ = _inputs(body, n=32)
    samples = [_sampler(body, seed=11)() for _ in range(4)]
    before = held_out_deform_loss(field, centers, W, samples)
    pretrain_field(field, centers, W, _sampler(body), iterations=200, lr=1e-3)
    after = held_out_deform_loss(field, centers, W, samples)
    assert after <= 0.5 * before
    expect(trace).to_have_loss_step(phase="pretrain", min_times=1)


def test_zero_learning_rate_leaves_parameters_bitwise_unchanged(body):
    field = _field(body, heads=0.1)
    centers, W, _ = _inputs(body)
    before = {k: v.clone() for k, v in field.state_dict().items()}
    pretrain_field(field, centers, W, _sampler(body), iterations=1, lr=0.0)
    for k, v in field.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_nan_pose_aborts_pretraining(body):
    field = _field(body, heads=0.1)
    centers, W, _ = _inputs(body)

    def bad_sampler():
        return 0.5, torch.full((body.joint_count, 3), float("nan"))

    with pytest.raises(DivergenceError):
        pretrain_field(field, centers, W, bad_sampler, iterations=3)


def test_checkpoint_round_trip(tmp_path, body):
    field = _field(body, heads=0.2, seed=4)
    path = tmp_path / "field.pt"
    field.save(path)
    other = _field(body, seed=99).load(path)
    centers, W, theta = _inputs(body)
    a = field(centers, 0.2, theta, W)
    b = other(centers, 0.2, theta, W)
    assert torch.equal(a.delta_mu_prime, b.delta_mu_prime)
    assert torch.equal(a.delta_c, b.delta_c)
