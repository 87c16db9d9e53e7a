"""Time-pose conditioned deformation and ambient-occlusion field.

Two parallel networks, each a multiresolution hash grid followed by a small
ReLU MLP: the geometry network predicts a local displacement and a rotation
offset, the occlusion network a scalar color factor in [0, 2]. Both are fed
the fixed canonical Gaussian center, a positional time encoding and an
attention-masked pose encoding.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch
from torch import nn

from .body import BodyModel, PoseState
from .errors import ContractViolation, DivergenceError, VersionMismatch
from .geometry import axis_angle_to_quaternion, quat_normalize, safe_norm
from .optim import Adam
from .trace import record_losses, warn

FIELD_CHECKPOINT_VERSION = 1
_PRIMES = (1, 2654435761, 805459861)
_IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass
class HashFieldConfig:
    levels: int = 16
    features_per_level: int = 2
    table_size: int = 2 ** 17
    base_resolution: int = 4
    per_level_scale: float = 1.5
    mlp_width: int = 128
    mlp_hidden_layers: int = 3
    time_degree: int = 4
    use_time_encoding: bool = True
    use_pose_encoding: bool = True
    enable_deformation: bool = True
    enable_occlusion: bool = True

    def __post_init__(self):
        for name in ("levels", "features_per_level", "table_size", "base_resolution", "mlp_width", "mlp_hidden_layers", "time_degree"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.per_level_scale <= 1.0 and self.levels > 1:
            raise ContractViolation("per_level_scale must exceed 1 for a strictly increasing schedule")
        res = self.resolutions()
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ContractViolation(f"resolution schedule is not strictly increasing: {res}")

    def resolutions(self) -> List[int]:
        return [int(math.floor(self.base_resolution * self.per_level_scale ** level)) for level in range(self.levels)]


@dataclass
class FieldOutput:
    delta_mu_prime: torch.Tensor  # (N, 3)
    delta_R: torch.Tensor  # (N, 4) unit quaternion
    delta_c: torch.Tensor  # (N, 1) in [0, 2]
    clamped: torch.Tensor  # (N,) bool, center was outside the canonical box

    @classmethod
    def identity(cls, n: int, dtype: torch.dtype = torch.float64) -> "FieldOutput":
        quat = torch.tensor(_IDENTITY_QUAT, dtype=dtype).expand(n, 4)
        return cls(
            delta_mu_prime=torch.zeros(n, 3, dtype=dtype),
            delta_R=quat,
            delta_c=torch.ones(n, 1, dtype=dtype),
            clamped=torch.zeros(n, dtype=torch.bool),
        )


def encode_time(t: float, degree: int = 4) -> Tuple[torch.Tensor, bool]:
    """[sin(2^k pi t), cos(2^k pi t)] for k < degree, interleaved per k; t clamped to [0, 1]."""
    clamped = not 0.0 <= t <= 1.0
    if clamped:
        warn("time_clamped", t=float(t))
        t = min(max(t, 0.0), 1.0)
    freqs = (2.0 ** torch.arange(degree, dtype=torch.float64)) * math.pi * t
    return torch.stack([torch.sin(freqs), torch.cos(freqs)], dim=-1).reshape(-1), clamped


def attention_from_body(body: BodyModel) -> torch.Tensor:
    """Fixed attention map V: 1-ring kinematic adjacency with self loops."""
    return body.adjacency()


def encode_pose(theta_quat: torch.Tensor, lbs_weights: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """gamma_p = (V W) * theta_quat, flattened to (N, 4J)."""
    J = attention.shape[0]
    if attention.shape != (J, J) or theta_quat.shape != (J, 4) or lbs_weights.shape[-1] != J:
        raise ContractViolation(
            f"pose encoding shapes disagree: theta {tuple(theta_quat.shape)}, weights {tuple(lbs_weights.shape)}, attention {tuple(attention.shape)}"
        )
    off_diagonal = (attention != 0).sum(dim=1) - (attention.diagonal() != 0).long()
    if bool((off_diagonal > 4).any()):
        raise ContractViolation("attention rows may reach at most four neighbouring joints")
    mask = lbs_weights @ attention.T  # (N, J)
    return (mask[..., None] * theta_quat).reshape(*lbs_weights.shape[:-1], 4 * J)


class HashGrid(nn.Module):
    """Multiresolution hash encoding of points in the unit cube."""

    def __init__(self, config: HashFieldConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        tables = (torch.rand(config.levels, config.table_size, config.features_per_level, generator=generator, dtype=torch.float64) * 2 - 1) * 1e-4
        self.tables = nn.Parameter(tables)
        self.resolutions = config.resolutions()

    @property
    def output_dim(self) -> int:
        return self.config.levels * self.config.features_per_level

    def level_indices(self, level: int, corners: torch.Tensor) -> torch.Tensor:
        """Table rows for integer corner coordinates (..., 3) at one level."""
        res = self.resolutions[level]
        T = self.config.table_size
        if (res + 1) ** 3 <= T:
            return corners[..., 0] + corners[..., 1] * (res + 1) + corners[..., 2] * (res + 1) ** 2
        h = corners[..., 0] * _PRIMES[0]
        h = torch.bitwise_xor(h, corners[..., 1] * _PRIMES[1])
        h = torch.bitwise_xor(h, corners[..., 2] * _PRIMES[2])
        return torch.remainder(h, T)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        offsets = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long)
        features = []
        for level, res in enumerate(self.resolutions):
            scaled = x * res
            base = torch.floor(scaled).clamp(0, res - 1)
            frac = scaled - base
            corners = base.long()[:, None, :] + offsets[None]  # (N, 8, 3)
            idx = self.level_indices(level, corners)
            w = torch.where(offsets[None].bool(), frac[:, None, :], 1.0 - frac[:, None, :]).prod(dim=-1)
            values = self.tables[level][idx]  # (N, 8, F)
            features.append((w[..., None] * values).sum(dim=1))
        return torch.cat(features, dim=-1)


def _mlp(in_dim: int, width: int, hidden_layers: int, out_dim: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    dim = in_dim
    for _ in range(hidden_layers):
        layers += [nn.Linear(dim, width, dtype=torch.float64), nn.ReLU()]
        dim = width
    head = nn.Linear(dim, out_dim, dtype=torch.float64)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    layers.append(head)
    return nn.Sequential(*layers)


class DeformationField(nn.Module):

    def __init__(
        self,
        config: HashFieldConfig,
        body: BodyModel,
        box_min: torch.Tensor,
        box_max: torch.Tensor,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config
        self.joint_count = body.joint_count
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer("box_min", box_min.to(torch.float64))
        self.register_buffer("box_max", box_max.to(torch.float64))
        self.register_buffer("attention", attention_from_body(body))
        self.geometry_grid = HashGrid(config, generator)
        self.occlusion_grid = HashGrid(config, generator)
        in_dim = self.geometry_grid.output_dim + self.conditioning_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.geometry_mlp = _mlp(in_dim, config.mlp_width, config.mlp_hidden_layers, 7)
            self.occlusion_mlp = _mlp(in_dim, config.mlp_width, config.mlp_hidden_layers, 1)
        self._recorded: Optional[Tuple[FieldOutput, Dict[str, torch.Tensor]]] = None

    @classmethod
    def for_body(cls, config: HashFieldConfig, body: BodyModel, padding: float = 0.1, seed: int = 0) -> "DeformationField":
        """Field whose box tightly encloses the canonical mesh plus padding."""
        verts = body.rest_vertices
        return cls(config, body, verts.min(dim=0).values - padding, verts.max(dim=0).values + padding, seed=seed)

    @property
    def conditioning_dim(self) -> int:
        dim = 0
        if self.config.use_time_encoding:
            dim += 2 * self.config.time_degree
        if self.config.use_pose_encoding:
            dim += 4 * self.joint_count
        return dim

    def reset_heads(self, std: float = 0.0, generator: Optional[torch.Generator] = None):
        """Zero heads give the identity deformation; std > 0 draws random heads."""
        with torch.no_grad():
            for mlp in (self.geometry_mlp, self.occlusion_mlp):
                head = mlp[-1]
                if std == 0.0:
                    head.weight.zero_()
                    head.bias.zero_()
                else:
                    head.weight.copy_(torch.randn(head.weight.shape, generator=generator, dtype=head.weight.dtype) * std)
                    head.bias.copy_(torch.randn(head.bias.shape, generator=generator, dtype=head.bias.dtype) * std)

    def normalize(self, centers: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = (centers - self.box_min) / (self.box_max - self.box_min)
        outside = ((x < 0) | (x > 1)).any(dim=-1)
        return x.clamp(0.0, 1.0), outside

    def forward(self, centers: torch.Tensor, t: float, theta: torch.Tensor, lbs_weights: torch.Tensor) -> FieldOutput:
        x, outside = self.normalize(centers)
        if bool(outside.any()):
            warn("field_query_clamped", count=int(outside.sum()))

        conditioning = []
        if self.config.use_time_encoding:
            gamma_t, _ = encode_time(t, self.config.time_degree)
            conditioning.append(gamma_t.to(centers.dtype).expand(centers.shape[0], -1))
        if self.config.use_pose_encoding:
            conditioning.append(encode_pose(axis_angle_to_quaternion(theta), lbs_weights, self.attention))

        geo_in = torch.cat([self.geometry_grid(x)] + conditioning, dim=-1)
        occ_in = torch.cat([self.occlusion_grid(x)] + conditioning, dim=-1)
        n = centers.shape[0]

        if self.config.enable_deformation:
            raw = self.geometry_mlp(geo_in)
            delta_mu = raw[:, :3]
            delta_R = quat_normalize(raw[:, 3:] + torch.tensor(_IDENTITY_QUAT, dtype=raw.dtype))
        else:
            delta_mu = torch.zeros(n, 3, dtype=centers.dtype)
            delta_R = torch.tensor(_IDENTITY_QUAT, dtype=centers.dtype).expand(n, 4)
        if self.config.enable_occlusion:
            delta_c = 2.0 * torch.sigmoid(self.occlusion_mlp(occ_in))
        else:
            delta_c = torch.ones(n, 1, dtype=centers.dtype)

        out = FieldOutput(delta_mu_prime=delta_mu, delta_R=delta_R, delta_c=delta_c, clamped=outside)
        self._recorded = (out, {"centers": centers, "theta": theta, "lbs_weights": lbs_weights})
        return out

    def backward(self, loss_grad: Dict[str, torch.Tensor]) -> Dict[str, Optional[torch.Tensor]]:
        """Gradients of sum(loss_grad * outputs) for the last recorded forward.

        ``loss_grad`` maps output names (delta_mu_prime, delta_R, delta_c) to
        upstream gradients. Returns gradients for every named parameter and for
        recorded inputs that require grad.
        """
        if self._recorded is None:
            raise ContractViolation("field backward called without a recorded forward pass")
        out, inputs = self._recorded
        outputs, grads = [], []
        for name, grad in loss_grad.items():
            tensor = getattr(out, name)
            if tensor.requires_grad:
                outputs.append(tensor)
                grads.append(grad)
        named = dict(self.named_parameters())
        wrt = list(named.values())
        input_names = [k for k, v in inputs.items() if v.requires_grad]
        wrt += [inputs[k] for k in input_names]
        if not outputs:
            return {name: None for name in list(named) + input_names}
        result = torch.autograd.grad(outputs, wrt, grads, retain_graph=True, allow_unused=True)
        self._recorded = None
        return dict(zip(list(named) + input_names, result))

    def save(self, path: Union[str, Path]):
        torch.save(
            {
                "version": FIELD_CHECKPOINT_VERSION,
                "config": asdict(self.config),
                "joint_count": self.joint_count,
                "state": self.state_dict(),
            },
            path,
        )

    def load(self, path: Union[str, Path]):
        payload = torch.load(path, weights_only=True)
        if payload.get("version") != FIELD_CHECKPOINT_VERSION:
            raise VersionMismatch("field checkpoint", payload.get("version", -1), FIELD_CHECKPOINT_VERSION)
        if HashFieldConfig(**payload["config"]) != self.config:
            raise ContractViolation("checkpoint field configuration differs from this field")
        self.load_state_dict(payload["state"])
        return self


def query_field(field: Optional[DeformationField], canonical_center: torch.Tensor, t: float, theta: torch.Tensor, lbs_weights: torch.Tensor) -> FieldOutput:
    """Field outputs, or the identity deformation when no field is active."""
    if field is None:
        return FieldOutput.identity(canonical_center.shape[0], canonical_center.dtype)
    return field(canonical_center, t, theta, lbs_weights)


def deform_loss(out: FieldOutput) -> torch.Tensor:
    """||dmu'||_2 + ||dR - I||_1 + ||dc - 1||_2, averaged over Gaussians."""
    identity = torch.tensor(_IDENTITY_QUAT, dtype=out.delta_R.dtype)
    per_gaussian = (
        safe_norm(out.delta_mu_prime)
        + (out.delta_R - identity).abs().sum(dim=-1)
        + (out.delta_c[:, 0] - 1.0).abs()
    )
    return per_gaussian.mean()


class PoseSampler:
    """Training poses for field pretraining: a first-frame pose mixed with a motion library, plus noise."""

    def __init__(
        self,
        first_pose: PoseState,
        library: Optional[torch.Tensor] = None,
        noise: float = 0.1,
        seed: int = 0,
        library_fraction: float = 0.5,
    ):
        self.first_theta = first_pose.theta.detach()
        self.library = library  # (K, J, 3)
        self.noise = noise
        self.library_fraction = library_fraction
        self.generator = torch.Generator().manual_seed(seed)

    def __call__(self) -> Tuple[float, torch.Tensor]:
        t = float(torch.rand((), generator=self.generator, dtype=torch.float64))
        use_library = self.library is not None and float(torch.rand((), generator=self.generator)) < self.library_fraction
        if use_library:
            k = int(torch.randint(self.library.shape[0], (), generator=self.generator))
            theta = self.library[k]
        else:
            theta = self.first_theta
        noise = torch.randn(theta.shape, generator=self.generator, dtype=theta.dtype) * self.noise
        return t, theta + noise


def pretrain_field(
    field: DeformationField,
    centers: torch.Tensor,
    lbs_weights: torch.Tensor,
    pose_sampler: Callable[[], Tuple[float, torch.Tensor]],
    iterations: int = 5000,
    lr: float = 1e-4,
    log_every: int = 50,
) -> DeformationField:
    """Drive the field towards the identity deformation over sampled times and poses."""
    optimizer = Adam(field.parameters(), lr=lr)
    for it in range(iterations):
        t, theta = pose_sampler()
        optimizer.zero_grad(set_to_none=True)
        loss = deform_loss(field(centers, t, theta, lbs_weights))
        if not torch.isfinite(loss):
            raise DivergenceError(f"field pretraining diverged at iteration {it} (loss={float(loss)})")
        loss.backward()
        optimizer.step()
        if it % log_every == 0 or it == iterations - 1:
            record_losses("pretrain", it, {"deform": float(loss)})
    field._recorded = None
    return field


def held_out_deform_loss(field: DeformationField, centers: torch.Tensor, lbs_weights: torch.Tensor, samples: List[Tuple[float, torch.Tensor]]) -> float:
    with torch.no_grad():
        losses = [float(deform_loss(field(centers, t, theta, lbs_weights))) for t, theta in samples]
    field._recorded = None
    return sum(losses) / len(losses)
