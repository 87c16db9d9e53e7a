"""MiniBody: a parametric articulated body with forward kinematics and LBS.

The model mirrors the SMPL interface (shape ``beta`` in R^10, pose ``theta`` in
R^{3J}, a kinematic tree, a V x J skinning matrix) without the licensed asset.
Rest vertices are sampled on capsules around each bone and remember their
binding (anchor joint, target joint, axial fraction, radial offset) so that
bone-length changes can rebuild the rest mesh exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .container import read_container, write_container
from .errors import ContractViolation
from .geometry import (
    axis_angle_to_quaternion,
    canonicalize_axis_angle,
    make_transform,
    matrix_to_axis_angle,
    skew,
    so3_exp,
    so3_left_jacobian,
)

BODY_MAGIC = b"ABDY"
BODY_VERSION = 1
SHAPE_DIM = 10
DTYPE = torch.float64


# name, parent, rest position (y up, meters), capsule radius of the bone ending here
_MINI16 = [
    ("pelvis", -1, (0.0, 0.0, 0.0), 0.0),
    ("spine", 0, (0.0, 0.25, 0.0), 0.12),
    ("neck", 1, (0.0, 0.5, 0.0), 0.13),
    ("head", 2, (0.0, 0.62, 0.02), 0.06),
    ("l_shoulder", 1, (0.18, 0.45, 0.0), 0.05),
    ("l_elbow", 4, (0.3, 0.2, 0.0), 0.045),
    ("l_wrist", 5, (0.38, -0.03, 0.0), 0.04),
    ("r_shoulder", 1, (-0.18, 0.45, 0.0), 0.05),
    ("r_elbow", 7, (-0.3, 0.2, 0.0), 0.045),
    ("r_wrist", 8, (-0.38, -0.03, 0.0), 0.04),
    ("l_hip", 0, (0.1, -0.05, 0.0), 0.09),
    ("l_knee", 10, (0.1, -0.48, 0.0), 0.07),
    ("l_ankle", 11, (0.1, -0.9, 0.0), 0.05),
    ("r_hip", 0, (-0.1, -0.05, 0.0), 0.09),
    ("r_knee", 13, (-0.1, -0.48, 0.0), 0.07),
    ("r_ankle", 14, (-0.1, -0.9, 0.0), 0.05),
]

_SMPL24 = [
    ("pelvis", -1, (0.0, 0.0, 0.0), 0.0),
    ("l_hip", 0, (0.06, -0.09, 0.0), 0.09),
    ("r_hip", 0, (-0.06, -0.09, 0.0), 0.09),
    ("spine1", 0, (0.0, 0.11, 0.0), 0.12),
    ("l_knee", 1, (0.1, -0.47, 0.0), 0.07),
    ("r_knee", 2, (-0.1, -0.47, 0.0), 0.07),
    ("spine2", 3, (0.0, 0.24, 0.0), 0.12),
    ("l_ankle", 4, (0.09, -0.88, 0.0), 0.05),
    ("r_ankle", 5, (-0.09, -0.88, 0.0), 0.05),
    ("spine3", 6, (0.0, 0.29, 0.0), 0.13),
    ("l_foot", 7, (0.11, -0.94, 0.12), 0.04),
    ("r_foot", 8, (-0.11, -0.94, 0.12), 0.04),
    ("neck", 9, (0.0, 0.5, 0.0), 0.06),
    ("l_collar", 9, (0.08, 0.41, 0.0), 0.05),
    ("r_collar", 9, (-0.08, 0.41, 0.0), 0.05),
    ("head", 12, (0.0, 0.6, 0.03), 0.06),
    ("l_shoulder", 13, (0.18, 0.43, 0.0), 0.05),
    ("r_shoulder", 14, (-0.18, 0.43, 0.0), 0.05),
    ("l_elbow", 16, (0.3, 0.2, 0.0), 0.045),
    ("r_elbow", 17, (-0.3, 0.2, 0.0), 0.045),
    ("l_wrist", 18, (0.38, -0.03, 0.0), 0.04),
    ("r_wrist", 19, (-0.38, -0.03, 0.0), 0.04),
    ("l_hand", 20, (0.4, -0.11, 0.0), 0.035),
    ("r_hand", 21, (-0.4, -0.11, 0.0), 0.035),
]

# Leaf extensions: a capsule continuing past the leaf joint (skull, hands, feet).
_LEAF_EXTENSIONS = {
    "head": ((0.0, 0.16, 0.0), 0.09),
    "l_wrist": ((0.0, -0.08, 0.0), 0.035),
    "r_wrist": ((0.0, -0.08, 0.0), 0.035),
    "l_hand": ((0.0, -0.06, 0.0), 0.03),
    "r_hand": ((0.0, -0.06, 0.0), 0.03),
    "l_ankle": ((0.0, -0.04, 0.13), 0.04),
    "r_ankle": ((0.0, -0.04, 0.13), 0.04),
    "l_foot": ((0.0, 0.0, 0.06), 0.035),
    "r_foot": ((0.0, 0.0, 0.06), 0.035),
}

PRESETS = {"mini16": _MINI16, "smpl24": _SMPL24}

# Shape components as (keywords selecting bones, coefficient); bone j is selected
# when its joint name contains any keyword.
_SHAPE_GROUPS = [
    (("",), 0.1),
    (("hip", "knee", "ankle", "foot"), 0.1),
    (("shoulder", "elbow", "wrist", "hand", "collar"), 0.1),
    (("spine", "neck", "head"), 0.1),
    (("knee", "ankle"), 0.1),
    (("elbow", "wrist"), 0.1),
    (("shoulder", "hip", "collar"), 0.1),
    (("l_",), 0.05),
    (("r_",), 0.05),
    (("neck", "head"), 0.1),
]


@dataclass
class PoseState:
    theta: torch.Tensor  # (J, 3) axis-angle
    beta: torch.Tensor  # (10,)
    root_rotation: torch.Tensor  # (3,)
    root_translation: torch.Tensor  # (3,)

    @classmethod
    def rest(cls, joint_count: int, dtype: torch.dtype = DTYPE) -> "PoseState":
        return cls(
            theta=torch.zeros(joint_count, 3, dtype=dtype),
            beta=torch.zeros(SHAPE_DIM, dtype=dtype),
            root_rotation=torch.zeros(3, dtype=dtype),
            root_translation=torch.zeros(3, dtype=dtype),
        )

    @classmethod
    def from_vector(cls, vector: torch.Tensor, joint_count: int, beta: Optional[torch.Tensor] = None) -> "PoseState":
        """Inverse of :meth:`to_vector` (theta, root_rotation, root_translation)."""
        n = 3 * joint_count
        if beta is None:
            beta = torch.zeros(SHAPE_DIM, dtype=vector.dtype)
        return cls(
            theta=vector[:n].reshape(joint_count, 3),
            beta=beta,
            root_rotation=vector[n:n + 3],
            root_translation=vector[n + 3:n + 6],
        )

    def to_vector(self) -> torch.Tensor:
        return torch.cat([self.theta.reshape(-1), self.root_rotation, self.root_translation])

    def clone(self) -> "PoseState":
        return PoseState(*(t.detach().clone() for t in (self.theta, self.beta, self.root_rotation, self.root_translation)))

    def canonicalized(self) -> "PoseState":
        return replace(
            self,
            theta=canonicalize_axis_angle(self.theta),
            root_rotation=canonicalize_axis_angle(self.root_rotation),
        )

    @property
    def joint_count(self) -> int:
        return self.theta.shape[0]


@dataclass
class JointTransforms:
    M: torch.Tensor  # (J, 4, 4) canonical -> posed
    joints: torch.Tensor  # (J, 3) posed joint positions
    global_rotations: torch.Tensor  # (J, 3, 3) rotation part of each joint's world frame


@dataclass
class BodyModel:
    joint_names: Tuple[str, ...]
    parents: Tuple[int, ...]
    rest_offsets: torch.Tensor  # (J, 3); root row is the root rest position
    rest_vertices: torch.Tensor  # (V, 3)
    vertex_lbs: torch.Tensor  # (V, J)
    shape_basis: torch.Tensor  # (J, 10)
    bind_from: torch.Tensor  # (V,) long
    bind_to: torch.Tensor  # (V,) long
    bind_t: torch.Tensor  # (V,)
    bind_radial: torch.Tensor  # (V, 3)
    keypoint_map: Tuple[int, ...] = ()
    preset: str = "custom"
    _descendants: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        J = len(self.parents)
        if self.parents[0] != -1 or any(p == -1 for p in self.parents[1:]):
            raise ContractViolation("kinematic tree must have a single root at index 0")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ContractViolation(f"joint {j} has parent {p}; parents must precede children")
        if self.rest_offsets.shape != (J, 3) or self.vertex_lbs.shape[1] != J:
            raise ContractViolation("rest offsets / skinning matrix do not match the joint count")
        if self.vertex_lbs.shape[0] != self.rest_vertices.shape[0]:
            raise ContractViolation("skinning matrix rows must match the vertex count")
        if (self.vertex_lbs < 0).any() or ((self.vertex_lbs.sum(dim=1) - 1).abs() > 1e-9).any():
            raise ContractViolation("vertex_lbs rows must be nonnegative and sum to 1")
        if self.rest_vertices.norm(dim=1).max() > 3.0:
            raise ContractViolation("rest vertices must lie within 3 m of the origin")
        if not self.keypoint_map:
            self.keypoint_map = tuple(range(min(25, J)))
        if any(not 0 <= k < J for k in self.keypoint_map):
            raise ContractViolation("keypoint_map references unknown joints")

    @classmethod
    def create(cls, preset: str = "mini16", rings: int = 8, ring_size: int = 8, keypoint_map: Sequence[int] = ()) -> "BodyModel":
        """Build a MiniBody from a skeleton preset ("mini16" or "smpl24")."""
        if preset not in PRESETS:
            raise ContractViolation(f"unknown body preset {preset!r}; expected one of {sorted(PRESETS)}")
        table = PRESETS[preset]
        names = tuple(row[0] for row in table)
        parents = tuple(row[1] for row in table)
        joints = np.array([row[2] for row in table], dtype=np.float64)
        radii = np.array([row[3] for row in table], dtype=np.float64)

        # segments: (anchor, target, start, end, skinning joint, radius)
        segments = []
        for j in range(1, len(table)):
            p = parents[j]
            segments.append((p, j, joints[p], joints[j], p, radii[j]))
        for j, name in enumerate(names):
            if name in _LEAF_EXTENSIONS and j not in parents:
                offset, radius = _LEAF_EXTENSIONS[name]
                segments.append((j, j, joints[j], joints[j] + np.asarray(offset), j, radius))

        verts, bind_from, bind_to, bind_t, bind_radial = [], [], [], [], []
        for anchor, target, start, end, _, radius in segments:
            axis = end - start
            u, v = _perpendicular_basis(axis)
            for k in range(rings):
                t = (k + 0.5) / rings
                center = start + t * axis
                for m in range(ring_size):
                    angle = 2.0 * np.pi * m / ring_size
                    point = center + radius * (np.cos(angle) * u + np.sin(angle) * v)
                    verts.append(point)
                    bind_from.append(anchor)
                    bind_to.append(target)
                    if anchor == target:
                        bind_t.append(0.0)
                        bind_radial.append(point - joints[anchor])
                    else:
                        bind_t.append(t)
                        bind_radial.append(point - center)
        verts = np.asarray(verts)

        weights = _segment_weights(verts, segments, len(table))
        offsets = joints.copy()
        for j in range(1, len(table)):
            offsets[j] = joints[j] - joints[parents[j]]

        basis = np.zeros((len(table), SHAPE_DIM))
        for k, (keywords, coeff) in enumerate(_SHAPE_GROUPS):
            for j in range(1, len(table)):
                if any(word in names[j] for word in keywords):
                    basis[j, k] = coeff

        return cls(
            joint_names=names,
            parents=parents,
            rest_offsets=torch.as_tensor(offsets, dtype=DTYPE),
            rest_vertices=torch.as_tensor(verts, dtype=DTYPE),
            vertex_lbs=torch.as_tensor(weights, dtype=DTYPE),
            shape_basis=torch.as_tensor(basis, dtype=DTYPE),
            bind_from=torch.as_tensor(bind_from, dtype=torch.long),
            bind_to=torch.as_tensor(bind_to, dtype=torch.long),
            bind_t=torch.as_tensor(bind_t, dtype=DTYPE),
            bind_radial=torch.as_tensor(np.asarray(bind_radial), dtype=DTYPE),
            keypoint_map=tuple(keypoint_map),
            preset=preset,
        )

    # --- derived quantities ---

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def vertex_count(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def rest_joints(self) -> torch.Tensor:
        return _accumulate_offsets(self.rest_offsets, self.parents)

    @property
    def descendants(self) -> torch.Tensor:
        """(J, J) indicator: [k, j] = 1 when j lies in the subtree rooted at k."""
        if self._descendants is None:
            J = self.joint_count
            D = torch.eye(J, dtype=DTYPE)
            for j in range(J - 1, 0, -1):
                D[self.parents[j]] += D[j]
            self._descendants = D.clamp(max=1.0)
        return self._descendants

    def adjacency(self) -> torch.Tensor:
        """Symmetric 1-ring kinematic adjacency including self loops."""
        J = self.joint_count
        A = torch.eye(J, dtype=DTYPE)
        for j, p in enumerate(self.parents[1:], start=1):
            A[j, p] = 1.0
            A[p, j] = 1.0
        return A

    def bone_scales(self, beta: torch.Tensor) -> torch.Tensor:
        if beta.shape[-1] != SHAPE_DIM:
            raise ContractViolation(f"beta must have {SHAPE_DIM} entries, got {beta.shape[-1]}")
        scales = (1.0 + self.shape_basis @ beta).clamp(0.7, 1.3)
        scales = scales.clone()
        scales[0] = 1.0
        return scales

    def rescaled(self, bone_scales: torch.Tensor) -> "BodyModel":
        """Model with each bone offset scaled; vertices follow their bindings, weights are kept."""
        if bone_scales.shape != (self.joint_count,):
            raise ContractViolation("bone_scales must have one entry per joint")
        offsets = self.rest_offsets * bone_scales[:, None]
        offsets = torch.cat([self.rest_offsets[:1], offsets[1:]], dim=0)
        joints = _accumulate_offsets(offsets, self.parents)
        start = joints[self.bind_from]
        end = joints[self.bind_to]
        verts = start + self.bind_t[:, None] * (end - start) + self.bind_radial
        return replace(self, rest_offsets=offsets, rest_vertices=verts, _descendants=self._descendants)

    def shaped(self, beta: torch.Tensor) -> "BodyModel":
        if not bool((beta != 0).any()):
            return self
        return self.rescaled(self.bone_scales(beta))

    def keypoints(self, joints: torch.Tensor) -> torch.Tensor:
        return joints[..., list(self.keypoint_map), :]

    def check_pose(self, pose: PoseState):
        J = self.joint_count
        if pose.theta.shape != (J, 3):
            raise ContractViolation(f"theta must be ({J}, 3), got {tuple(pose.theta.shape)}")
        if pose.beta.shape != (SHAPE_DIM,):
            raise ContractViolation(f"beta must be ({SHAPE_DIM},), got {tuple(pose.beta.shape)}")
        if pose.root_rotation.shape != (3,) or pose.root_translation.shape != (3,):
            raise ContractViolation("root rotation and translation must be 3-vectors")


def forward_kinematics(model: BodyModel, pose: PoseState) -> JointTransforms:
    """Per-joint transforms M_j mapping the shaped rest pose to the posed body."""
    model.check_pose(pose)
    shaped = model.shaped(pose.beta)
    rest = shaped.rest_joints
    rotations = so3_exp(pose.theta)
    root_R = so3_exp(pose.root_rotation)

    global_R: List[torch.Tensor] = []
    global_t: List[torch.Tensor] = []
    for j, parent in enumerate(model.parents):
        if parent < 0:
            R = root_R @ rotations[0]
            t = root_R @ rest[0] + pose.root_translation
        else:
            R = global_R[parent] @ rotations[j]
            t = global_R[parent] @ (rest[j] - rest[parent]) + global_t[parent]
        global_R.append(R)
        global_t.append(t)
    G_R = torch.stack(global_R)
    G_t = torch.stack(global_t)
    M_t = G_t - (G_R @ rest[:, :, None])[..., 0]
    return JointTransforms(M=make_transform(G_R, M_t), joints=G_t, global_rotations=G_R)


def skinning_transform(weights: torch.Tensor, transforms: Union[JointTransforms, torch.Tensor], check: bool = True) -> torch.Tensor:
    """Blend joint transforms with per-point weights: P = sum_j w_j M_j (matrix blend)."""
    M = transforms.M if isinstance(transforms, JointTransforms) else transforms
    if weights.shape[-1] != M.shape[0]:
        raise ContractViolation(f"weights have {weights.shape[-1]} entries for {M.shape[0]} joints")
    if check:
        if bool((weights < 0).any()) or bool(((weights.sum(dim=-1) - 1).abs() > 1e-6).any()):
            raise ContractViolation("skinning weights must be nonnegative and sum to 1")
    return torch.einsum("...j,jab->...ab", weights, M)


def apply_transform(P: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return (P[..., :3, :3] @ points[..., None])[..., 0] + P[..., :3, 3]


def pose_vertices(model: BodyModel, pose: PoseState) -> Tuple[torch.Tensor, torch.Tensor]:
    """Posed vertices (V, 3) and posed joint positions (J, 3)."""
    transforms = forward_kinematics(model, pose)
    shaped = model.shaped(pose.beta)
    P = skinning_transform(model.vertex_lbs, transforms, check=False)
    return apply_transform(P, shaped.rest_vertices), transforms.joints


def joint_jacobian(
    model: BodyModel,
    pose: PoseState,
    query_points: torch.Tensor,
    weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """d(posed point)/d(theta, root_rotation, root_translation), shape (N, 3, 3J + 6).

    ``query_points`` live in the shaped canonical frame and are skinned with
    ``weights`` (defaults to the model's vertex weights when N == V).
    """
    if weights is None:
        if query_points.shape[0] != model.vertex_count:
            raise ContractViolation("weights are required unless query_points are the model vertices")
        weights = model.vertex_lbs
    transforms = forward_kinematics(model, pose)
    J = model.joint_count
    per_joint = (transforms.M[None, :, :3, :3] @ query_points[:, None, :, None])[..., 0] + transforms.M[None, :, :3, 3]
    weighted = weights[..., None] * per_joint  # (N, J, 3)
    D = model.descendants
    Q = torch.einsum("kj,njc->nkc", D, weighted)
    s = weights @ D.T  # (N, J)
    lever = Q - s[..., None] * transforms.joints[None]

    parent_R = torch.stack(
        [so3_exp(pose.root_rotation) if p < 0 else transforms.global_rotations[p] for p in model.parents]
    )
    axes = parent_R @ so3_left_jacobian(pose.theta)  # (J, 3, 3), column i is the world axis
    theta_block = -(skew(lever) @ axes[None])  # (N, J, 3, 3)
    theta_block = theta_block.permute(0, 2, 1, 3).reshape(-1, 3, 3 * J)

    posed = (weighted).sum(dim=1)
    root_block = -(skew(posed - pose.root_translation) @ so3_left_jacobian(pose.root_rotation))
    trans_block = torch.eye(3, dtype=query_points.dtype).expand(query_points.shape[0], 3, 3)
    return torch.cat([theta_block, root_block, trans_block], dim=-1)


def pose_quaternions(pose: PoseState) -> torch.Tensor:
    """(J, 4) unit quaternions of the local joint rotations."""
    return axis_angle_to_quaternion(pose.theta)


def transform_pose(pose: PoseState, T: torch.Tensor) -> PoseState:
    """Re-express a body pose in another frame; ``T`` maps the old frame into the new one.

    The pelvis rests at the origin, so the root rotation and translation carry
    over exactly.
    """
    R = T[:3, :3]
    out = pose.clone()
    out.root_rotation = matrix_to_axis_angle(R @ so3_exp(pose.root_rotation))
    out.root_translation = R @ pose.root_translation + T[:3, 3]
    return out


def save_body(model: BodyModel, path: Union[str, Path]):
    meta, arrays = body_payload(model)
    write_container(path, BODY_MAGIC, BODY_VERSION, meta, arrays)


def load_body(path: Union[str, Path]) -> BodyModel:
    meta, arrays = read_container(path, BODY_MAGIC, BODY_VERSION, kind="body model")
    return body_from_payload(meta, arrays)


def body_payload(model: BodyModel, prefix: str = "") -> Tuple[Dict, Dict[str, np.ndarray]]:
    meta = {
        "joint_names": list(model.joint_names),
        "parents": list(model.parents),
        "keypoint_map": list(model.keypoint_map),
        "preset": model.preset,
    }
    names = ("rest_offsets", "rest_vertices", "vertex_lbs", "shape_basis", "bind_from", "bind_to", "bind_t", "bind_radial")
    return meta, {prefix + n: getattr(model, n).numpy() for n in names}


def body_from_payload(meta: Dict, arrays: Dict[str, np.ndarray], prefix: str = "") -> BodyModel:
    def tensor(name, dtype=DTYPE):
        return torch.as_tensor(arrays[prefix + name], dtype=dtype)

    return BodyModel(
        joint_names=tuple(meta["joint_names"]),
        parents=tuple(meta["parents"]),
        rest_offsets=tensor("rest_offsets"),
        rest_vertices=tensor("rest_vertices"),
        vertex_lbs=tensor("vertex_lbs"),
        shape_basis=tensor("shape_basis"),
        bind_from=tensor("bind_from", torch.long),
        bind_to=tensor("bind_to", torch.long),
        bind_t=tensor("bind_t"),
        bind_radial=tensor("bind_radial"),
        keypoint_map=tuple(meta["keypoint_map"]),
        preset=meta.get("preset", "custom"),
    )


def _accumulate_offsets(offsets: torch.Tensor, parents: Sequence[int]) -> torch.Tensor:
    joints: List[torch.Tensor] = []
    for j, p in enumerate(parents):
        joints.append(offsets[j] if p < 0 else joints[p] + offsets[j])
    return torch.stack(joints)


def _perpendicular_basis(axis: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def _segment_weights(verts: np.ndarray, segments, joint_count: int) -> np.ndarray:
    """Inverse squared distance to the two nearest segments, credited to each segment's joint."""
    dist2 = np.empty((verts.shape[0], len(segments)))
    for s, (_, _, start, end, _, _) in enumerate(segments):
        ab = end - start
        t = np.clip(((verts - start) @ ab) / (ab @ ab), 0.0, 1.0)
        closest = start + t[:, None] * ab
        dist2[:, s] = ((verts - closest) ** 2).sum(axis=1)
    nearest = np.argsort(dist2, axis=1, kind="stable")[:, :2]
    weights = np.zeros((verts.shape[0], joint_count))
    rows = np.arange(verts.shape[0])
    for col in range(2):
        seg = nearest[:, col]
        inv = 1.0 / np.maximum(dist2[rows, seg], 1e-12)
        joint = np.array([segments[s][4] for s in seg])
        np.add.at(weights, (rows, joint), inv)
    return weights / weights.sum(axis=1, keepdims=True)
