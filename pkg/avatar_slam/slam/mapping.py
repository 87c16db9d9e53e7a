"""Windowed mapping: Gaussian, field and keyframe-pose optimization with densification."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from ..body import BodyModel, PoseState
from ..errors import ContractViolation
from ..field import deform_loss
from ..optim import Adam
from ..splat import CameraState, Gaussians3D, GradientStats, densify_and_prune, ndc_gradient_norm, seed_scene_from_depth
from ..trace import get_current_trace, record_losses, warn
from .config import SlamConfig
from .keyframes import update_window
from .losses import canonical_covariance, center_loss, depth_loss, lbs_loss, lbs_targets, weighted_l1
from .state import GaussianMap, Keyframe, PoseVariables, render_frame

UNEXPLAINED_OPACITY = 0.5

_RATE_NAMES = {
    "mu": "position",
    "delta_mu": "position",
    "rot": "rotation",
    "scale": "scale",
    "opacity_logit": "opacity",
    "color": "color",
    "lbs_offset": "lbs",
}


@dataclass
class MapSnapshot:
    """What the tracker reads: a frozen map plus the keyframe poses refined so far."""

    map: GaussianMap
    keyframes: Dict[int, Keyframe] = field(default_factory=dict)

    @property
    def version(self) -> int:
        return self.map.version


@dataclass
class StepResult:
    iteration: int
    losses: Dict[str, float]
    frames: List[int]
    rejected: bool = False
    densified: bool = False


def _leaf(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.detach().clone().requires_grad_(True)


def _as_leaves(gaussians):
    return replace(gaussians, **{name: _leaf(getattr(gaussians, name)) for name in gaussians.LEARNABLE})


def scene_extent(scene: Gaussians3D) -> float:
    if len(scene) == 0:
        return 1.0
    mu = scene.mu.detach()
    return max(float((mu - mu.mean(dim=0)).norm(dim=1).max()), 1e-3)


class Mapper:
    """Owns every mutable map parameter; the tracker only sees snapshots."""

    def __init__(
        self,
        gmap: GaussianMap,
        body: BodyModel,
        intrinsics: CameraState,
        config: SlamConfig,
        scale_shift: Tuple[float, float],
        duration: float = 1.0,
    ):
        self.config = config
        self.body = body
        self.intrinsics = intrinsics
        self.scale_shift = scale_shift
        self.duration = duration
        self.generator = torch.Generator().manual_seed(config.seed)
        self.map = gmap
        self.map.scene = _as_leaves(gmap.scene)
        if gmap.avatar is not None:
            self.map.avatar = _as_leaves(gmap.avatar)
        if gmap.field is not None:
            gmap.field.requires_grad_(True)
        self.extent = scene_extent(self.map.scene)

        groups = self._gaussian_groups("scene", self.map.scene)
        if self.map.avatar is not None:
            groups += self._gaussian_groups("avatar", self.map.avatar)
        if self.map.field is not None:
            groups.append({"params": list(self.map.field.parameters()), "lr": config.rates.deformation, "name": "field"})
        self.optimizer = Adam(groups)

        self.keyframes: List[Keyframe] = []
        self.window: List[Keyframe] = []
        self.variables: Dict[int, PoseVariables] = {}
        self.scene_stats = GradientStats(len(self.map.scene))
        self.avatar_stats = GradientStats(0 if self.map.avatar is None else len(self.map.avatar))
        self.steps = 0
        self.halved = False
        self.densify_avatar = False

    def _gaussian_groups(self, prefix: str, gaussians) -> List[dict]:
        rates = self.config.rates.gaussians
        return [
            {"params": [getattr(gaussians, name)], "lr": getattr(rates, _RATE_NAMES[name]), "name": f"{prefix}.{name}"}
            for name in gaussians.LEARNABLE
        ]

    def frame_time(self, timestamp: float) -> float:
        if self.duration <= 0:
            return 0.0
        return min(max(timestamp / self.duration, 0.0), 1.0)

    def keyframe_pose(self, frame_id: int) -> Tuple[torch.Tensor, PoseState]:
        return self.variables[frame_id].values()

    # keyframe insertion

    def _extend_scene(self, new: Gaussians3D):
        old = self.map.scene
        n, m = len(old), len(new)
        rows = {}
        for name in old.row_fields():
            rows[name] = torch.cat([getattr(old, name).detach(), getattr(new, name).to(getattr(old, name).dtype)])
        source = torch.cat([torch.arange(n), torch.full((m,), -1, dtype=torch.long)])
        for name in old.LEARNABLE:
            rows[name] = rows[name].requires_grad_(True)
            self.optimizer.replace_param(getattr(old, name), rows[name], source)
        self.map.scene = replace(old, **rows)
        self.map.scene_ids = torch.cat([self.map.scene_ids, self.map.fresh_ids(m)])
        stats = GradientStats(n + m)
        stats.total[:n], stats.hits[:n] = self.scene_stats.total, self.scene_stats.hits
        self.scene_stats = stats

    def seed_unexplained(self, keyframe: Keyframe) -> int:
        """Add scene Gaussians for static pixels the current map leaves uncovered."""
        bundle = keyframe.bundle
        w, b = self.scale_shift
        aligned = w * bundle.disparity + b
        pixels = (keyframe.opacity < UNEXPLAINED_OPACITY) & bundle.static_mask & bundle.disparity_valid & (aligned > 0)
        if not bool(pixels.any()):
            return 0
        depth = torch.where(pixels, 1.0 / aligned.clamp_min(1e-6), torch.zeros_like(aligned))
        camera = self.intrinsics.with_pose(keyframe.camera_T)
        new = seed_scene_from_depth(depth, pixels, camera, bundle.rgb, stride=self.config.seed_stride)
        if len(new):
            self._extend_scene(new)
        return len(new)

    def insert_keyframe(self, keyframe: Keyframe, reason: str, seed: bool = True) -> Optional[Keyframe]:
        """Register a keyframe, seed its unexplained pixels and update the window; returns the evicted one."""
        if keyframe.frame_id in self.variables:
            raise ContractViolation(f"frame {keyframe.frame_id} is already a keyframe")
        added = self.seed_unexplained(keyframe) if seed else 0
        config = self.config
        refine_camera = config.camera_mode == "track" and bool(self.keyframes)
        variables = PoseVariables.create(keyframe.camera_T, keyframe.pose, camera=refine_camera, human=not config.mask_human)
        for group in variables.param_groups(config.rates.mapping, prefix=f"kf{keyframe.frame_id}.", camera=refine_camera, human=not config.mask_human):
            self.optimizer.add_param_group(group)
        self.variables[keyframe.frame_id] = variables
        self.keyframes.append(keyframe)
        self.window, evicted = update_window(self.window, keyframe, config.keyframes)
        self.map.version += 1

        trace = get_current_trace()
        if trace:
            trace.record_keyframe(
                frame=keyframe.frame_id,
                reason=reason,
                window=[kf.frame_id for kf in self.window],
                evicted=None if evicted is None else evicted.frame_id,
            )
            if added:
                trace.record_event(kind="seeded", frame=keyframe.frame_id, payload={"gaussians": added})
        return evicted

    # optimization

    def select_frames(self) -> List[Keyframe]:
        """The window plus a seeded draw of older keyframes outside it."""
        in_window = {kf.frame_id for kf in self.window}
        past = [kf for kf in self.keyframes if kf.frame_id not in in_window]
        if not past or self.config.past_keyframes <= 0:
            return list(self.window)
        order = torch.randperm(len(past), generator=self.generator)[: self.config.past_keyframes]
        return list(self.window) + [past[int(i)] for i in order]

    def _losses(self, frames: Sequence[Keyframe], use_field: bool, poses_frozen: bool):
        config = self.config
        weights = config.weights.mapping
        gmap = self.map
        terms: Dict[str, torch.Tensor] = {}

        def add(name: str, value: torch.Tensor):
            terms[name] = terms[name] + value if name in terms else value

        renders = []
        for kf in frames:
            variables = self.variables[kf.frame_id]
            if poses_frozen:
                T, pose = variables.values()
            else:
                T, pose = variables.camera_T(), variables.pose()
            camera = self.intrinsics.with_pose(T)
            out, field_output = render_frame(
                gmap, self.body, pose, camera, self.frame_time(kf.timestamp), use_field=use_field, cutoff=config.render_cutoff
            )
            renders.append(out)
            bundle = kf.bundle
            static = bundle.static_mask
            rgb_weight = static.to(out.image.dtype) if config.mask_human else None
            add("rgb", weighted_l1(out.image, bundle.rgb, rgb_weight) / len(frames))
            add("depth", depth_loss(out.depth, bundle.disparity, bundle.disparity_valid, self.scale_shift, static) / len(frames))
            if gmap.avatar is not None:
                add("sil", weighted_l1(out.human_silhouette, bundle.human_mask.to(out.image.dtype)) / len(frames))
                if use_field and field_output is not None:
                    add("deform", deform_loss(field_output) / len(frames))

        if gmap.avatar is not None and len(gmap.avatar):
            avatar = gmap.avatar
            beta = self.variables[frames[0].frame_id].beta
            canonical = self.body.shaped(beta)
            centers = avatar.canonical_centers()
            targets = lbs_targets(centers, canonical_covariance(avatar.rot, avatar.scale), canonical.rest_vertices, canonical.vertex_lbs)
            terms["lbs"] = lbs_loss(avatar.lbs_weights(), targets)
            terms["center"] = center_loss(centers, canonical.rest_vertices, avatar.init_vertex_id)

        total = sum(getattr(weights, name) * value for name, value in terms.items())
        return total, terms, renders

    def _accumulate_stats(self, renders):
        ns = len(self.map.scene)
        for out in renders:
            norms = ndc_gradient_norm(out)
            self.scene_stats.add(norms[:ns], out.visibility[:ns])
            if self.map.avatar is not None:
                self.avatar_stats.add(norms[ns:], out.visibility[ns:])

    def step(
        self,
        frames: Sequence[Keyframe],
        iteration: int,
        use_field: bool = True,
        phase: str = "map",
        poses_frozen: bool = False,
    ) -> StepResult:
        """One optimizer step over ``frames``.

        A non-finite loss or gradient rejects the step without touching any
        parameter and halves every learning rate (once per mapper).
        """
        frame_ids = [kf.frame_id for kf in frames]
        use_field = use_field and self.map.field is not None and self.config.use_field
        self.optimizer.zero_grad(set_to_none=True)
        total, terms, renders = self._losses(frames, use_field, poses_frozen)
        finite = bool(torch.isfinite(total))
        if finite and total.requires_grad:
            total.backward()
            finite = all(bool(torch.isfinite(p.grad).all()) for p in self.optimizer.params() if p.grad is not None)
        if self.map.field is not None:
            self.map.field._recorded = None
        if not finite:
            self.optimizer.zero_grad(set_to_none=True)
            warn("mapping_step_rejected", frame=frame_ids[-1], iteration=iteration, halved=not self.halved)
            if not self.halved:
                self.optimizer.halve_learning_rates()
                self.halved = True
            return StepResult(iteration, {}, frame_ids, rejected=True)

        losses = {name: float(value) for name, value in terms.items()}
        losses["total"] = float(total)
        if total.requires_grad:
            self._accumulate_stats(renders)
            self.optimizer.step()
        record_losses(phase, iteration, losses, frame=frame_ids[0] if phase == "refine" else self.keyframes[-1].frame_id)

        self.steps += 1
        densified = False
        if self.config.densify.interval > 0 and self.steps % self.config.densify.interval == 0:
            self.densify()
            densified = True
        self.map.version += 1
        return StepResult(iteration, losses, frame_ids, densified=densified)

    def map_step(self, iteration: int, budget: int) -> StepResult:
        """Window mapping step; the field stays off for the first half of ``budget``.

        A rejected step is retried once with a fresh draw of past keyframes.
        """
        stage_two = iteration >= budget // 2
        result = self.step(self.select_frames(), iteration, use_field=stage_two)
        if result.rejected:
            result = self.step(self.select_frames(), iteration, use_field=stage_two)
        return result

    def map_keyframe(self, budget: Optional[int] = None, publish: Optional[Callable[[MapSnapshot], None]] = None) -> List[StepResult]:
        budget = self.config.mapping_iterations if budget is None else budget
        results = []
        for it in range(budget):
            results.append(self.map_step(it, budget))
            if publish is not None and (it + 1) % self.config.sync_every == 0:
                publish(self.snapshot())
        return results

    def map_chunk(self, start: int, stop: int, budget: int) -> List[StepResult]:
        return [self.map_step(it, budget) for it in range(start, stop)]

    def refine(self, epochs: int) -> List[StepResult]:
        """Gaussian-only refinement over every keyframe with poses frozen and avatar densification on.

        The field joins for the second half of the epochs, as in ``map_step``.
        """
        if not self.keyframes:
            return []
        self.densify_avatar = True
        results = []
        try:
            for epoch in range(epochs):
                stage_two = epoch >= epochs // 2
                order = torch.randperm(len(self.keyframes), generator=self.generator)
                for k in order.tolist():
                    results.append(self.step([self.keyframes[k]], epoch, use_field=stage_two, phase="refine", poses_frozen=True))
        finally:
            self.densify_avatar = False
        return results

    # density control

    def densify(self):
        config = self.config.densify
        seed = self.config.seed + self.steps
        scene = densify_and_prune(self.map.scene, self.scene_stats, self.extent, config, scene_only=True, optimizer=self.optimizer, seed=seed)
        self.map.scene = scene.gaussians
        self.map.scene_ids = self._remap_ids(self.map.scene_ids, scene.source_rows, scene.moment_rows)
        self.scene_stats.reset(len(self.map.scene))
        if self.map.avatar is not None and self.densify_avatar:
            avatar = densify_and_prune(self.map.avatar, self.avatar_stats, self.extent, config, optimizer=self.optimizer, seed=seed + 1)
            self.map.avatar = avatar.gaussians
            self.map.avatar_ids = self._remap_ids(self.map.avatar_ids, avatar.source_rows, avatar.moment_rows)
            self.avatar_stats.reset(len(self.map.avatar))
        if len(self.map.scene) == 0 and (self.map.avatar is None or len(self.map.avatar) == 0):
            warn("map_empty_after_prune", frame=self.keyframes[-1].frame_id if self.keyframes else None)

    def _remap_ids(self, ids: torch.Tensor, source_rows: torch.Tensor, moment_rows: torch.Tensor) -> torch.Tensor:
        remapped = ids[source_rows].clone()
        fresh = moment_rows < 0
        if bool(fresh.any()):
            remapped[fresh] = self.map.fresh_ids(int(fresh.sum()))
        return remapped

    # publication

    def refined_keyframe(self, keyframe: Keyframe) -> Keyframe:
        T, pose = self.keyframe_pose(keyframe.frame_id)
        return replace(keyframe, camera_T=T, pose=pose)

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(
            map=self.map.snapshot(),
            keyframes={kf.frame_id: self.refined_keyframe(kf) for kf in self.keyframes},
        )

