"""Numerical primitives: rigid transforms, encodings, conical-frustum Gaussians.

Everything here is pure and works on batches. The encoders accept either
numpy arrays or torch tensors so the same code serves geometry preprocessing
and the differentiable network path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

MIRROR = np.diag([-1.0, 1.0, 1.0])
WEIGHT_SUM_TOLERANCE = 1e-4


def _xp(x):
    return torch if isinstance(x, torch.Tensor) else np


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula for an array of axis-angle vectors shaped (..., 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta[..., 0] < 1e-12
    axis = aa / np.where(theta > 1e-12, theta, 1.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(theta)[..., None]
    c = np.cos(theta)[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    R = eye + s * K + (1.0 - c) * (K @ K)
    R[small] = np.eye(3)
    return R


def polar_rotation(M: np.ndarray) -> np.ndarray:
    """Closest proper rotation to each 3x3 matrix (orthonormal polar factor)."""
    U, _, Vt = np.linalg.svd(M)
    det = np.linalg.det(U @ Vt)
    D = np.ones(M.shape[:-2] + (3,))
    D[..., 2] = np.sign(det)
    D[D == 0] = 1.0
    return (U * D[..., None, :]) @ Vt


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def affine(self) -> np.ndarray:
        return self.matrix()[:3]

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_orthonormal(self, tol: float = 1e-6) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
        )


@dataclass
class FrustumGaussian:
    mean: np.ndarray
    cov: np.ndarray
    t0: float
    t1: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(3, 3)
        if not self.t0 < self.t1:
            raise ValueError(f"frustum requires t0 < t1, got {self.t0} >= {self.t1}")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)
    radius: float = 0.0

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def positional_encoding(x, degree: int):
    """Sinusoidal encoding of (..., k) inputs into (..., 2*k*degree).

    Layout is all sines followed by all cosines; within each block the
    frequency index is the slow axis and the input component the fast one.
    """
    xp = _xp(x)
    scales = 2.0 ** np.arange(degree)
    if xp is torch:
        scales = torch.as_tensor(scales, dtype=x.dtype, device=x.device)
    else:
        x = np.asarray(x, dtype=np.float64)
    scaled = (x[..., None, :] * scales[:, None]).reshape(*x.shape[:-1], -1)
    if xp is torch:
        return torch.cat([torch.sin(scaled), torch.cos(scaled)], dim=-1)
    return np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)


def integrated_positional_encoding(mean, cov, degree: int):
    """Expected sinusoids of a Gaussian; returns (..., 6*degree) for 3D input.

    ``cov`` may be full (..., 3, 3) covariances or per-axis variances (..., 3).
    Each frequency 2^j is attenuated by exp(-0.5 * 4^j * var) per axis.
    """
    xp = _xp(mean)
    if xp is np:
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
    var = cov
    if cov.ndim == mean.ndim + 1:
        var = xp.diagonal(cov, axis1=-2, axis2=-1) if xp is np else torch.diagonal(cov, dim1=-2, dim2=-1)
    scales = 2.0 ** np.arange(degree)
    if xp is torch:
        scales = torch.as_tensor(scales, dtype=mean.dtype, device=mean.device)
        var = torch.as_tensor(var, dtype=mean.dtype, device=mean.device)
    mu = (mean[..., None, :] * scales[:, None]).reshape(*mean.shape[:-1], -1)
    s2 = (var[..., None, :] * (scales**2)[:, None]).reshape(*mean.shape[:-1], -1)
    damp = xp.exp(-0.5 * s2)
    if xp is torch:
        return torch.cat([torch.sin(mu) * damp, torch.cos(mu) * damp], dim=-1)
    return np.concatenate([np.sin(mu) * damp, np.cos(mu) * damp], axis=-1)


def frustum_moments(origins, directions, radii, t0, t1):
    """Batched conical-frustum mean and covariance.

    ``origins``/``directions``/``radii`` broadcast against ``t0``/``t1``
    (directions are unit). Cone radius grows as radius * t. Returns
    (mean (..., 3), cov (..., 3, 3)).
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    mu = 0.5 * (t0 + t1)
    hw = 0.5 * (t1 - t0)
    denom = 3.0 * mu**2 + hw**2
    t_mean = mu + 2.0 * mu * hw**2 / denom
    t_var = hw**2 / 3.0 - (4.0 / 15.0) * (hw**4 * (12.0 * mu**2 - hw**2)) / denom**2
    r_var = radii**2 * (mu**2 / 4.0 + (5.0 / 12.0) * hw**2 - (4.0 / 15.0) * hw**4 / denom)
    d = np.asarray(directions, dtype=np.float64)
    o = np.asarray(origins, dtype=np.float64)
    mean = o + t_mean[..., None] * d
    ddT = d[..., :, None] * d[..., None, :]
    perp = np.eye(3) - ddT
    cov = t_var[..., None, None] * ddT + r_var[..., None, None] * perp
    return mean, cov


def frustum_to_gaussian(ray: Ray, t0: float, t1: float) -> FrustumGaussian:
    if not (0 < t0 < t1):
        raise ValueError(f"frustum bounds must satisfy 0 < t0 < t1, got t0={t0}, t1={t1}")
    mean, cov = frustum_moments(ray.origin, ray.direction, ray.radius, t0, t1)
    return FrustumGaussian(mean, cov, t0, t1)


def stack_affines(transforms: Sequence[RigidTransform] | np.ndarray) -> np.ndarray:
    if isinstance(transforms, np.ndarray):
        return transforms[..., :3, :]
    return np.stack([t.affine() for t in transforms])


def blend_transforms(weights, transforms) -> np.ndarray:
    """Weighted entrywise sum of 3x4 rigid matrices.

    ``weights`` is (16,) or (n, 16); ``transforms`` a sequence of
    RigidTransform or an array (16, 3, 4) / (16, 4, 4).
    """
    w = np.asarray(weights, dtype=np.float64)
    A = stack_affines(transforms)
    if w.shape[-1] != A.shape[0]:
        raise ValueError(f"{w.shape[-1]} weights for {A.shape[0]} transforms")
    if np.any(w < -1e-12):
        raise ValueError("blend weights must be nonnegative")
    dev = np.abs(w.sum(axis=-1) - 1.0)
    if np.any(dev > WEIGHT_SUM_TOLERANCE):
        raise ValueError(f"blend weights must sum to 1 (max deviation {dev.max():.3g})")
    return np.tensordot(w, A, axes=([-1], [0]))


def apply_affine(A: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A[..., :3], points) + A[..., 3]


def mirror_points(x):
    """Reflection through the x = 0 plane; works for numpy and torch."""
    if isinstance(x, torch.Tensor):
        sign = torch.tensor([-1.0, 1.0, 1.0], dtype=x.dtype, device=x.device)
        return x * sign
    return np.asarray(x) * np.array([-1.0, 1.0, 1.0])


def mirror_axis_angles(aa):
    """Conjugate rotations by diag(-1, 1, 1): (a1, a2, a3) -> (a1, -a2, -a3)."""
    if isinstance(aa, torch.Tensor):
        sign = torch.tensor([1.0, -1.0, -1.0], dtype=aa.dtype, device=aa.device)
        return aa * sign
    return np.asarray(aa) * np.array([1.0, -1.0, -1.0])


def ray_aabb(origins, directions, lo, hi):
    """Slab intersection. Returns (near, far, hit) with near clipped at 0."""
    d = np.where(np.abs(directions) < 1e-12, 1e-12, directions)
    inv = 1.0 / d
    ta = (lo - origins) * inv
    tb = (hi - origins) * inv
    near = np.maximum(np.minimum(ta, tb).max(axis=-1), 0.0)
    far = np.maximum(ta, tb).min(axis=-1)
    return near, far, far > near


def pixel_radius(focal: float) -> float:
    """Base radius of a pixel footprint at unit distance (variance-matched)."""
    return (1.0 / focal) * 2.0 / math.sqrt(12.0)
