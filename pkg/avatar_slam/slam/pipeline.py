"""The online loop: initialize on the first frame, then track every frame and map every keyframe.

``run_pipeline`` interleaves tracking and mapping deterministically in one
thread. ``run_pipeline_async`` runs them as two asyncio workers joined by a
keyframe queue; the tracker only ever reads published map snapshots.
"""
from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch

from ..body import PoseState
from ..errors import ContractViolation
from ..field import DeformationField, PoseSampler, pretrain_field
from ..splat import CameraState
from ..synth import SyntheticSequence, motion_library
from ..trace import RunTrace, set_current_trace
from .config import SlamConfig
from .initialization import InitResult, init_first_frame
from .keyframes import keyframe_decision
from .mapping import Mapper, MapSnapshot
from .state import FrameState, GaussianMap, Keyframe, posed_joints, render_frame, visible_ids
from .tracking import FrameDiagnostics, TrackResult, constant_velocity, initial_pose, track_frame


@dataclass
class PipelineResult:
    cameras: torch.Tensor  # (F, 4, 4) world -> camera
    poses: List[PoseState]  # world frame
    joints: torch.Tensor  # (F, J, 3)
    keyframes: List[Keyframe]
    map: GaussianMap
    scale_shift: Tuple[float, float]
    diagnostics: List[FrameDiagnostics]
    prior_cameras: torch.Tensor  # the cameras fed to tracking as initialization
    prior_poses: List[PoseState]
    prior_joints: torch.Tensor
    timestamps: List[float] = field(default_factory=list)
    init_flagged: bool = False

    @property
    def keyframe_ids(self) -> List[int]:
        return [kf.frame_id for kf in self.keyframes]


def _pretrained_field(sequence: SyntheticSequence, init: InitResult, config: SlamConfig) -> Optional[DeformationField]:
    if not config.use_field or config.mask_human:
        return None
    body = sequence.body
    deformation = DeformationField.for_body(config.deformation, body, seed=config.seed)
    if config.field_pretrain_iterations > 0:
        sampler = PoseSampler(init.pose, motion_library(body), seed=config.seed)
        pretrain_field(
            deformation,
            init.avatar.canonical_centers(),
            init.avatar.lbs_weights(),
            sampler,
            iterations=config.field_pretrain_iterations,
            lr=config.rates.deformation,
        )
    return deformation


def _duration(sequence: SyntheticSequence) -> float:
    return sequence.frames[-1].timestamp if len(sequence) > 1 else 0.0


def _check_cameras(sequence: SyntheticSequence, config: SlamConfig, cameras: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    if config.camera_mode == "fixed" and cameras is None:
        cameras = sequence.truth.cameras
    if cameras is not None and cameras.shape != (len(sequence), 4, 4):
        raise ContractViolation(f"expected {len(sequence)} camera poses, got shape {tuple(cameras.shape)}")
    return cameras


class _Session:
    """State shared by both pipeline modes: the tracker's view and the mapper."""

    def __init__(self, sequence: SyntheticSequence, config: SlamConfig, cameras: Optional[torch.Tensor]):
        if len(sequence) == 0:
            raise ContractViolation("the sequence has no frames")
        self.sequence = sequence
        self.config = config
        self.cameras = _check_cameras(sequence, config, cameras)
        self.intrinsics: CameraState = sequence.camera
        self.body = sequence.body
        self.duration = _duration(sequence)

        first = sequence.frames[0]
        T0 = self.intrinsics.T if self.cameras is None else self.cameras[0].to(self.intrinsics.T.dtype)
        self.init = init_first_frame(first, self.body, self.intrinsics.with_pose(T0), config)
        deformation = _pretrained_field(sequence, self.init, config)
        avatar = None if config.mask_human else self.init.avatar
        self.mapper = Mapper(
            GaussianMap.create(self.init.scene, avatar, deformation),
            self.body,
            self.intrinsics,
            config,
            self.init.scale_shift,
            duration=self.duration,
        )

        self.track_T: List[torch.Tensor] = [T0.clone()]
        self.track_poses: List[PoseState] = [self.init.pose.clone()]
        self.prior_T: List[torch.Tensor] = [T0.clone()]
        self.prior_poses: List[PoseState] = [initial_pose(first, T0)]
        self.diagnostics: List[FrameDiagnostics] = [FrameDiagnostics(frame=0, keyframe=True, reason="first", flagged=self.init.flagged)]
        self.first_keyframe = self._keyframe(first.index, T0, self.init.pose)
        self.last_keyframe = self.first_keyframe

    def _keyframe(self, index: int, T: torch.Tensor, pose: PoseState, tracked: Optional[TrackResult] = None) -> Keyframe:
        bundle = self.sequence.frames[index]
        if tracked is None:
            with torch.no_grad():
                out, _ = render_frame(
                    self.mapper.map, self.body, pose, self.intrinsics.with_pose(T), self.mapper.frame_time(bundle.timestamp),
                    use_field=self.config.use_field, cutoff=self.config.render_cutoff,
                )
            visible, depth, opacity = visible_ids(self.mapper.map, out), out.depth.detach(), out.opacity.detach()
        else:
            visible, depth, opacity = tracked.visible, tracked.depth, tracked.opacity
        return Keyframe(
            frame_id=index,
            timestamp=bundle.timestamp,
            camera_T=T,
            joints=posed_joints(self.body, pose).detach(),
            visible=visible,
            bundle=bundle,
            pose=pose,
            depth=depth,
            opacity=opacity,
        )

    def predicted_camera(self, index: int) -> torch.Tensor:
        if self.cameras is not None:
            return self.cameras[index].to(self.intrinsics.T.dtype)
        before = self.track_T[-2] if len(self.track_T) > 1 else None
        return constant_velocity(self.track_T[-1], before)

    def reference_keyframe(self, snapshot: MapSnapshot) -> Keyframe:
        """The last keyframe, with the mapper's refined pose once it has been published."""
        return snapshot.keyframes.get(self.last_keyframe.frame_id, self.last_keyframe)

    def track(self, index: int, snapshot: MapSnapshot) -> Optional[Keyframe]:
        """Track one frame; returns the new keyframe when the frame qualifies."""
        bundle = self.sequence.frames[index]
        init_T = self.predicted_camera(index)
        init_pose = initial_pose(bundle, init_T)
        self.prior_T.append(init_T.clone())
        self.prior_poses.append(init_pose.clone())
        reference = self.reference_keyframe(snapshot)
        flow = self.sequence.flow_between(reference.frame_id, index)
        result = track_frame(
            bundle,
            snapshot.map,
            self.body,
            self.intrinsics,
            init_T,
            init_pose,
            self.mapper.frame_time(bundle.timestamp),
            self.config,
            keyframe=reference,
            flow=flow,
        )
        self.track_T.append(result.camera_T)
        self.track_poses.append(result.pose)
        state = FrameState(
            frame_id=index,
            timestamp=bundle.timestamp,
            camera_T=result.camera_T,
            joints=posed_joints(self.body, result.pose).detach(),
            visible=result.visible,
        )
        is_keyframe, reason = keyframe_decision(state, self.last_keyframe, self.config.keyframes)
        result.diagnostics.keyframe = is_keyframe
        result.diagnostics.reason = reason
        self.diagnostics.append(result.diagnostics)
        if not is_keyframe:
            return None
        self.last_keyframe = self._keyframe(index, result.camera_T, result.pose, tracked=result)
        return self.last_keyframe

    def add_keyframe(self, keyframe: Keyframe, reason: str):
        self.mapper.insert_keyframe(keyframe, reason, seed=keyframe is not self.first_keyframe)

    def after_keyframe(self):
        if self.config.refinement_mode == "distributed":
            self.mapper.refine(self.config.distributed_epochs)

    def finish(self) -> PipelineResult:
        config = self.config
        if config.refinement_mode == "final":
            self.mapper.refine(config.refine_epochs)

        cameras = list(self.track_T)
        poses = list(self.track_poses)
        refined = []
        for kf in self.mapper.keyframes:
            T, pose = self.mapper.keyframe_pose(kf.frame_id)
            cameras[kf.frame_id], poses[kf.frame_id] = T, pose
            refined.append(self.mapper.refined_keyframe(kf))
        joints = torch.stack([posed_joints(self.body, pose).detach() for pose in poses])
        result = PipelineResult(
            cameras=torch.stack(cameras),
            poses=poses,
            joints=joints,
            keyframes=refined,
            map=self.mapper.map.snapshot(),
            scale_shift=self.init.scale_shift,
            diagnostics=self.diagnostics,
            prior_cameras=torch.stack(self.prior_T),
            prior_poses=self.prior_poses,
            prior_joints=torch.stack([posed_joints(self.body, pose).detach() for pose in self.prior_poses]),
            timestamps=[f.timestamp for f in self.sequence.frames],
            init_flagged=self.init.flagged,
        )
        return result


def _bind_trace(trace: Optional[RunTrace]):
    if trace is not None:
        set_current_trace(trace)


def run_pipeline(
    sequence: SyntheticSequence,
    config: Optional[SlamConfig] = None,
    cameras: Optional[torch.Tensor] = None,
    trace: Optional[RunTrace] = None,
) -> PipelineResult:
    """Deterministic single-thread run: track a frame, then fully map it if it became a keyframe.

    ``cameras`` supplies world-to-camera poses for every frame; they are
    held fixed under ``camera_mode="fixed"`` (ground truth is used when
    omitted) and otherwise replace the constant-velocity prediction as the
    tracking initialization.
    """
    config = config or SlamConfig()
    _bind_trace(trace)
    torch.manual_seed(config.seed)
    session = _Session(sequence, config, cameras)
    session.add_keyframe(session.first_keyframe, "first")
    session.mapper.map_keyframe()
    session.after_keyframe()
    snapshot = session.mapper.snapshot()

    for index in range(1, len(sequence)):
        keyframe = session.track(index, snapshot)
        if keyframe is None:
            continue
        session.add_keyframe(keyframe, session.diagnostics[-1].reason)
        session.mapper.map_keyframe()
        session.after_keyframe()
        snapshot = session.mapper.snapshot()
    return session.finish()


async def run_pipeline_async(
    sequence: SyntheticSequence,
    config: Optional[SlamConfig] = None,
    cameras: Optional[torch.Tensor] = None,
    trace: Optional[RunTrace] = None,
) -> PipelineResult:
    """Two-worker run: the tracker produces keyframes, the mapper consumes them.

    The mapper publishes a snapshot every ``sync_every`` iterations and after
    each keyframe insertion. Heavy work runs in worker threads through
    ``asyncio.to_thread``, which carries the current trace along.
    """
    config = config or SlamConfig()
    _bind_trace(trace)
    torch.manual_seed(config.seed)
    session = await asyncio.to_thread(_Session, sequence, config, cameras)
    mapper = session.mapper
    queue: asyncio.Queue = asyncio.Queue()
    published: Dict[str, MapSnapshot] = {"latest": mapper.snapshot()}

    def publish():
        published["latest"] = mapper.snapshot()

    async def map_keyframe(keyframe: Keyframe, reason: str):
        await asyncio.to_thread(session.add_keyframe, keyframe, reason)
        await asyncio.to_thread(publish)
        budget = config.mapping_iterations
        for start in range(0, budget, config.sync_every):
            await asyncio.to_thread(mapper.map_chunk, start, min(start + config.sync_every, budget), budget)
            await asyncio.to_thread(publish)
        if config.refinement_mode == "distributed":
            await asyncio.to_thread(session.after_keyframe)
            await asyncio.to_thread(publish)

    async def mapping_worker():
        while True:
            item = await queue.get()
            try:
                if item is None:
                    return
                await map_keyframe(*item)
            finally:
                queue.task_done()

    async def tracking_worker():
        try:
            for index in range(1, len(sequence)):
                keyframe = await asyncio.to_thread(session.track, index, published["latest"])
                if keyframe is not None:
                    await queue.put((keyframe, session.diagnostics[-1].reason))
                # let the mapper pick up queued work between frames
                await asyncio.sleep(0)
        finally:
            await queue.put(None)

    await queue.put((session.first_keyframe, "first"))
    mapper_task = asyncio.create_task(mapping_worker())
    try:
        await tracking_worker()
        await mapper_task
    except BaseException:
        mapper_task.cancel()
        raise
    return await asyncio.to_thread(session.finish)
