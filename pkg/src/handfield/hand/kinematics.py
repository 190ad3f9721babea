"""16-joint hand skeleton, poses, forward kinematics and skinning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mathcore import (
    RigidTransform,
    axis_angle_to_matrix,
    blend_transforms,
    apply_affine,
    mirror_axis_angles,
    mirror_points,
)

N_JOINTS = 16
# root, then index, middle, pinky, ring, thumb chains of three joints each
PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11, 0, 13, 14)
FINGERS = {"index": (1, 2, 3), "middle": (4, 5, 6), "pinky": (7, 8, 9), "ring": (10, 11, 12), "thumb": (13, 14, 15)}


@dataclass
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray  # (16, 3) rest offset from parent (root: absolute)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(N_JOINTS, 3)
        if self.parents[0] != -1 or any(
            not (0 <= p < j) for j, p in enumerate(self.parents) if j > 0
        ):
            raise ValueError("parent graph must be a tree rooted at joint 0 with parents before children")
        if not np.isfinite(self.offsets).all():
            raise ValueError("skeleton offsets must be finite")

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((N_JOINTS, 3))
        for j, p in enumerate(self.parents):
            pos[j] = self.offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos

    def children(self, j: int) -> list[int]:
        return [k for k, p in enumerate(self.parents) if p == j]

    def descendants(self, j: int) -> list[int]:
        out = []
        stack = self.children(j)
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children(k))
        return sorted(out)

    def mirrored(self) -> "Skeleton":
        return Skeleton(self.parents, mirror_points(self.offsets))


@dataclass
class Pose:
    joint_rotations: np.ndarray = field(default_factory=lambda: np.zeros((N_JOINTS, 3)))
    root_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64).reshape(N_JOINTS, 3)
        self.root_rotation = np.asarray(self.root_rotation, dtype=np.float64).reshape(3)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        mags = np.linalg.norm(np.vstack([self.joint_rotations, self.root_rotation]), axis=-1)
        if np.any(mags >= 2 * np.pi):
            raise ValueError("axis-angle magnitudes must be below 2*pi")

    @classmethod
    def rest(cls) -> "Pose":
        return cls()

    def flat(self) -> np.ndarray:
        return self.joint_rotations.reshape(-1).copy()

    def to_dict(self):
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_rotation": self.root_rotation.tolist(),
            "root_translation": self.root_translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(d["joint_rotations"], d["root_rotation"], d["root_translation"])


def mirror_map_point(x):
    return mirror_points(x)


def mirror_map_pose(pose: Pose) -> Pose:
    return Pose(
        mirror_axis_angles(pose.joint_rotations),
        mirror_axis_angles(pose.root_rotation),
        mirror_points(pose.root_translation),
    )


def forward_kinematics_matrices(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """World transforms of every joint frame as a (16, 4, 4) array."""
    R = axis_angle_to_matrix(pose.joint_rotations)
    G = np.zeros((N_JOINTS, 4, 4))
    root = np.eye(4)
    root[:3, :3] = axis_angle_to_matrix(pose.root_rotation)
    root[:3, 3] = pose.root_translation
    for j, p in enumerate(skeleton.parents):
        local = np.eye(4)
        local[:3, :3] = R[j]
        local[:3, 3] = skeleton.offsets[j]
        G[j] = (G[p] if p >= 0 else root) @ local
    return G


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> list[RigidTransform]:
    return [RigidTransform.from_matrix(m) for m in forward_kinematics_matrices(skeleton, pose)]


def skinning_matrices(skeleton: Skeleton, pose: Pose, canonical_pose: Pose | None = None) -> np.ndarray:
    """Per-joint canonical->posed transforms G_j(p) G_j(p_bar)^-1, shape (16, 4, 4)."""
    canonical_pose = canonical_pose or Pose.rest()
    G = forward_kinematics_matrices(skeleton, pose)
    Gc = forward_kinematics_matrices(skeleton, canonical_pose)
    return G @ np.linalg.inv(Gc)


def observation_to_canonical_matrices(skeleton: Skeleton, pose: Pose, canonical_pose: Pose | None = None) -> np.ndarray:
    """Per-joint posed->canonical transforms G_j(p_bar) G_j(p)^-1, shape (16, 4, 4)."""
    canonical_pose = canonical_pose or Pose.rest()
    G = forward_kinematics_matrices(skeleton, pose)
    Gc = forward_kinematics_matrices(skeleton, canonical_pose)
    return Gc @ _rigid_inverse(G)


def observation_to_canonical_joint_transforms(skeleton, pose, canonical_pose=None) -> list[RigidTransform]:
    return [RigidTransform.from_matrix(m) for m in observation_to_canonical_matrices(skeleton, pose, canonical_pose)]


def _rigid_inverse(G: np.ndarray) -> np.ndarray:
    out = np.zeros_like(G)
    Rt = np.swapaxes(G[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, G[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def skin_points(points: np.ndarray, weights: np.ndarray, skeleton: Skeleton, pose: Pose, canonical_pose: Pose | None = None) -> np.ndarray:
    A = blend_transforms(weights, skinning_matrices(skeleton, pose, canonical_pose))
    return apply_affine(A, points)


def skin_vertices(mesh, skeleton: Skeleton, pose: Pose, canonical_pose: Pose | None = None) -> np.ndarray:
    return skin_points(mesh.vertices, mesh.weights, skeleton, pose, canonical_pose)
