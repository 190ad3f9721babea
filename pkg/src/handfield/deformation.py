"""Pose-driven warp from observation space into the shared canonical space.

A ray sample is first warped by blend skinning (nearest-facet weights,
per-joint observation->canonical transforms), then nudged by a learned
residual. Left hands are reflected through x = 0 so both hands share the
right hand's canonical field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .hand.kinematics import Pose, Skeleton, observation_to_canonical_matrices, skin_vertices
from .hand.mesh import BOUNDS_INFLATION, FacetLocator, SkinnedHandMesh, scene_bounds
from .mathcore import (
    FrustumGaussian,
    Ray,
    apply_affine,
    blend_transforms,
    frustum_moments,
    mirror_axis_angles,
    mirror_points,
    polar_rotation,
    positional_encoding,
    ray_aabb,
)
from .nn import MlpSpec, ParameterStore, init_mlp, mlp_forward

EMPTY_SPACE_FACTOR = 1.5
JITTER = 0.4
MIRROR = np.diag([-1.0, 1.0, 1.0])


@dataclass
class CanonicalBox:
    """Axis-aligned box mapped affinely onto [-pi, pi]^3 for the encoders."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("canonical box must have positive extent")

    @classmethod
    def from_vertices(cls, vertices, scale: float = 2.0) -> "CanonicalBox":
        """AABB of ``vertices`` scaled about its center by ``scale``."""
        v = np.asarray(vertices)
        c = 0.5 * (v.min(0) + v.max(0))
        h = 0.5 * (v.max(0) - v.min(0)) * scale
        return cls(c - h, c + h)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def scale(self):
        """Per-axis factor taking scene units to encoder units."""
        return math.pi / (0.5 * (self.hi - self.lo))

    def normalize(self, x):
        if isinstance(x, torch.Tensor):
            c = torch.as_tensor(self.center, dtype=x.dtype)
            s = torch.as_tensor(self.scale, dtype=x.dtype)
            return (x - c) * s
        return (np.asarray(x) - self.center) * self.scale

    def normalize_var(self, var):
        """Per-axis variances in encoder units."""
        if isinstance(var, torch.Tensor):
            return var * torch.as_tensor(self.scale**2, dtype=var.dtype)
        return np.asarray(var) * self.scale**2

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "CanonicalBox":
        return cls(d["lo"], d["hi"])


def side_map_points(x, side: str):
    """The hand mapping on points: reflection for the left hand, identity for the right."""
    return mirror_points(x) if side == "left" else x


def side_map_pose(flat_pose, side: str):
    """The hand mapping on a flattened (48,) joint-rotation vector."""
    if side != "left":
        return flat_pose
    return mirror_axis_angles(np.asarray(flat_pose).reshape(-1, 3)).reshape(-1)


@dataclass
class PosedHand:
    """One hand in one frame: posed mesh, nearest-facet index and joint transforms."""

    side: str
    skeleton: Skeleton
    mesh: SkinnedHandMesh
    pose: Pose
    vertices: np.ndarray
    obs_to_can: np.ndarray  # (16, 4, 4)
    lo: np.ndarray
    hi: np.ndarray
    margin: float
    locator: FacetLocator

    @classmethod
    def build(cls, skeleton: Skeleton, mesh: SkinnedHandMesh, pose: Pose, canonical_pose: Pose | None = None):
        verts = skin_vertices(mesh, skeleton, pose, canonical_pose)
        lo, hi = scene_bounds(verts)
        margin = BOUNDS_INFLATION * float(np.linalg.norm(verts.max(0) - verts.min(0)))
        return cls(
            mesh.side, skeleton, mesh, pose, verts,
            observation_to_canonical_matrices(skeleton, pose, canonical_pose),
            lo, hi, margin, FacetLocator(verts, mesh.triangles, mesh.weights),
        )

    @property
    def empty_threshold(self) -> float:
        return EMPTY_SPACE_FACTOR * self.margin


def lbs_warp(x_ob, hand: PosedHand, joint_transforms=None):
    """Blend-skinning warp of observation points. Returns (x_hat_can, weights, distance)."""
    T = hand.obs_to_can if joint_transforms is None else joint_transforms
    x = np.atleast_2d(np.asarray(x_ob, dtype=np.float64))
    q = hand.locator.query(x)
    A = blend_transforms(q.weights, T)
    x_hat = apply_affine(A, x)
    if np.ndim(x_ob) == 1:
        return x_hat[0], q.weights[0], float(q.distance[0])
    return x_hat, q.weights, q.distance


@dataclass
class CorrectorConfig:
    pos_degree: int = 6
    width: int = 128
    depth: int = 4
    activation: str = "relu"

    def spec(self) -> MlpSpec:
        n_in = 6 * self.pos_degree + 48
        return MlpSpec((n_in,) + (self.width,) * self.depth + (3,), activation=self.activation, zero_final=True)


class ErrorCorrector:
    """Residual MLP on [PE(mapped point), mapped pose]; last layer starts at zero."""

    prefix = "correction"

    def __init__(self, store: ParameterStore, box: CanonicalBox, config: CorrectorConfig | None = None, generator=None):
        self.config = config or CorrectorConfig()
        self.spec = self.config.spec()
        self.store = store
        self.box = box
        if f"{self.prefix}.0.weight" not in store:
            init_mlp(self.spec, store, self.prefix, generator or torch.Generator().manual_seed(0))

    def residual(self, x_mapped, pose_mapped):
        """F(psi(x_hat), psi(p)) for mapped inputs of shape (n, 3) and (48,)."""
        x_mapped = torch.as_tensor(x_mapped, dtype=self.store.dtype)
        enc = positional_encoding(self.box.normalize(x_mapped), self.config.pos_degree)
        p = torch.as_tensor(np.asarray(pose_mapped), dtype=self.store.dtype).reshape(1, 48)
        inp = torch.cat([enc, p.expand(len(x_mapped), 48)], dim=-1)
        return mlp_forward(self.spec, self.store, inp, self.prefix)[0]

    def __call__(self, x_hat, pose: Pose, side: str):
        return correct(x_hat, pose, side, self)


def correct(x_hat, pose: Pose, side: str, corrector: ErrorCorrector):
    """x_can = psi(x_hat + F(psi(x_hat), psi(p))); returns (x_can, residual) as tensors."""
    if not isinstance(x_hat, torch.Tensor):
        x_hat = torch.as_tensor(np.asarray(x_hat, dtype=np.float64))
    x = x_hat.to(corrector.store.dtype)
    single = x.ndim == 1
    if single:
        x = x[None]
    r = corrector.residual(side_map_points(x, side), side_map_pose(pose.flat(), side))
    x_can = side_map_points(x + r, side)
    if single:
        return x_can[0], r[0]
    return x_can, r


@dataclass
class HandSamples:
    """Stratified frustum samples of a ray batch against one hand.

    Per-ray arrays are (R, N); the ``active`` subset (samples near the
    surface whose skinned position lands in the canonical box) carries the
    canonical Gaussians, ordered like ``np.nonzero(active)``.
    """

    side: str
    pose: Pose
    t: np.ndarray
    t0: np.ndarray
    t1: np.ndarray
    hit: np.ndarray  # (R,) ray meets the hand box
    far: np.ndarray  # (R,) box exit
    distance: np.ndarray  # (R, N) nearest-facet distance (inf for rays that miss)
    active: np.ndarray  # (R, N)
    x_hat: np.ndarray  # (K, 3) skinned position in the hand's own canonical frame
    cov: np.ndarray  # (K, 3, 3) canonical covariance in the shared (right) frame
    weights: np.ndarray  # (K, 16)
    degenerate: np.ndarray  # (R, N) near the surface but skinned outside the box

    @property
    def n_samples(self) -> int:
        return self.t.shape[1]

    def active_index(self):
        return np.nonzero(self.active)


def stratified_edges(near, far, n: int, rng: np.random.Generator | None = None):
    """(R, n+1) segment edges; interior edges jittered by up to 0.4 bin when ``rng`` is given."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    u = np.linspace(0.0, 1.0, n + 1)
    edges = near[:, None] + (far - near)[:, None] * u
    if rng is not None and n > 1:
        width = (far - near) / n
        edges[:, 1:-1] += rng.uniform(-JITTER, JITTER, size=(len(near), n - 1)) * width[:, None]
    return edges


def deform_ray_samples(
    origins,
    directions,
    radii,
    hand: PosedHand,
    box: CanonicalBox,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
) -> HandSamples:
    """Sample a ray batch inside one hand's inflated box and skin the samples to canonical space."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (len(o),))
    R, N = len(o), n_samples
    near, far, hit = ray_aabb(o, d, hand.lo, hand.hi)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 1.0)
    edges = stratified_edges(near, far, N, rng)
    t0, t1 = edges[:, :-1], edges[:, 1:]
    t = 0.5 * (t0 + t1)

    distance = np.full((R, N), np.inf)
    active = np.zeros((R, N), dtype=bool)
    degenerate = np.zeros((R, N), dtype=bool)
    x_hat = np.zeros((0, 3))
    cov = np.zeros((0, 3, 3))
    weights = np.zeros((0, 16))
    rows = np.flatnonzero(hit)
    if len(rows):
        mean, cov_ob = frustum_moments(o[rows, None], d[rows, None], radii[rows, None], t0[rows], t1[rows])
        q = hand.locator.query(mean.reshape(-1, 3), far_threshold=hand.empty_threshold)
        distance[rows] = q.distance.reshape(len(rows), N)
        near_surface = ~q.far.reshape(len(rows), N)
        mean = mean[near_surface]
        cov_ob = cov_ob[near_surface]
        w = q.weights.reshape(len(rows), N, 16)[near_surface]
        A = blend_transforms(w, hand.obs_to_can)
        xh = apply_affine(A, mean)
        Rb = polar_rotation(A[:, :, :3])
        c = Rb @ cov_ob @ np.swapaxes(Rb, -1, -2)
        if hand.side == "left":
            c = MIRROR @ c @ MIRROR
        inside = box.contains(side_map_points(xh, hand.side))
        sub = np.zeros((len(rows), N), dtype=bool)
        sub[near_surface] = inside
        active[rows] = sub
        deg = np.zeros((len(rows), N), dtype=bool)
        deg[near_surface] = ~inside
        degenerate[rows] = deg
        x_hat, cov, weights = xh[inside], c[inside], w[inside]
    return HandSamples(hand.side, hand.pose, t, t0, t1, hit, far, distance, active, x_hat, cov, weights, degenerate)


@dataclass
class DeformedSample:
    gaussian: FrustumGaussian  # canonical mean (corrected) and covariance
    t: float
    side: str
    residual: np.ndarray
    weights: np.ndarray
    distance: float
    degenerate: bool = False


def deform_ray(ray: Ray, hand: PosedHand, box: CanonicalBox, corrector: ErrorCorrector, n_samples: int = 64, rng=None) -> list[DeformedSample]:
    """Single-ray form of deform_ray_samples; returns [] when the ray misses the hand box.

    Samples treated as empty space (far from the surface) are omitted; samples
    that skin outside the canonical box are returned flagged ``degenerate``.
    """
    s = deform_ray_samples(ray.origin, ray.direction, ray.radius, hand, box, n_samples, rng)
    if not s.hit[0]:
        return []
    out = []
    with torch.no_grad():
        x_can, res = correct(s.x_hat, s.pose, s.side, corrector) if len(s.x_hat) else (None, None)
    k = 0
    for i in range(n_samples):
        if s.active[0, i]:
            g = FrustumGaussian(x_can[k].double().numpy(), s.cov[k], s.t0[0, i], s.t1[0, i])
            out.append(DeformedSample(g, float(s.t[0, i]), s.side, res[k].double().numpy(), s.weights[k], float(s.distance[0, i])))
            k += 1
        elif s.degenerate[0, i]:
            g = FrustumGaussian(np.full(3, np.nan), np.zeros((3, 3)), s.t0[0, i], s.t1[0, i])
            out.append(DeformedSample(g, float(s.t[0, i]), s.side, np.zeros(3), np.zeros(16), float(s.distance[0, i]), True))
    return out
