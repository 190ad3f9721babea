"""Slow per-pixel renderer used as a test oracle.

It rebuilds every step from first principles with plain loops: camera
rays, slab test, skeleton chains (via scipy rotations), skinning,
brute-force nearest facets, frustum moments (textbook power form),
encodings, merging and compositing. Only the network layers are shared
with the fast path.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

from .hand.mesh import point_triangle_distance
from .nn import MlpSpec, mlp_forward
from .radiance import NOVEL


def _pixel_ray(camera, row, col):
    K = np.array([[camera.fx, 0, camera.cx], [0, camera.fy, camera.cy], [0, 0, 1.0]])
    E = np.eye(4)
    E[:3, :3] = camera.world_to_camera.rotation
    E[:3, 3] = camera.world_to_camera.translation
    cam_to_world = np.linalg.inv(E)
    p_cam = np.linalg.inv(K) @ np.array([col + 0.5, row + 0.5, 1.0])
    origin = cam_to_world[:3, 3]
    target = cam_to_world[:3, :3] @ p_cam + origin
    d = target - origin
    return origin, d / math.sqrt(float(d @ d))


def _slab(o, d, lo, hi):
    t_enter, t_exit = -math.inf, math.inf
    for k in range(3):
        dk = d[k] if abs(d[k]) >= 1e-12 else 1e-12
        a = (lo[k] - o[k]) / dk
        b = (hi[k] - o[k]) / dk
        t_enter = max(t_enter, min(a, b))
        t_exit = min(t_exit, max(a, b))
    t_enter = max(t_enter, 0.0)
    return t_enter, t_exit, t_exit > t_enter


def _world_frames(skeleton, pose):
    frames = []
    root = np.eye(4)
    root[:3, :3] = Rotation.from_rotvec(pose.root_rotation).as_matrix()
    root[:3, 3] = pose.root_translation
    for j, parent in enumerate(skeleton.parents):
        local = np.eye(4)
        local[:3, :3] = Rotation.from_rotvec(pose.joint_rotations[j]).as_matrix()
        local[:3, 3] = skeleton.offsets[j]
        frames.append((root if parent < 0 else frames[parent]) @ local)
    return frames


class _ReferenceHand:
    def __init__(self, hand):
        rest = _world_frames(hand.skeleton, type(hand.pose)())
        posed = _world_frames(hand.skeleton, hand.pose)
        mesh = hand.mesh
        self.side = hand.side
        self.pose = hand.pose
        self.mesh = mesh
        self.to_canonical = [rest[j] @ np.linalg.inv(posed[j]) for j in range(16)]
        to_posed = [posed[j] @ np.linalg.inv(rest[j]) for j in range(16)]
        A = np.einsum("vj,jab->vab", mesh.weights, np.stack(to_posed))
        verts = np.einsum("vab,vb->va", A[:, :3, :3], mesh.vertices) + A[:, :3, 3]
        self.vertices = verts
        lo, hi = verts.min(0), verts.max(0)
        diag = math.sqrt(float(((hi - lo) ** 2).sum()))
        self.margin = 0.05 * diag
        self.lo, self.hi = lo - self.margin, hi + self.margin
        self.tris = verts[mesh.triangles]

    def nearest(self, x):
        d, bary = point_triangle_distance(np.repeat(x[None], len(self.tris), 0), self.tris)
        f = int(np.argmin(d))
        w = sum(bary[f][k] * self.mesh.weights[self.mesh.triangles[f][k]] for k in range(3))
        return float(d[f]), w


def _frustum(o, d, radius, t0, t1):
    """Mean and covariance of a cone segment from the raw power-sum moments."""
    t_mean = 3.0 * (t1**4 - t0**4) / (4.0 * (t1**3 - t0**3))
    t_sq = 3.0 * (t1**5 - t0**5) / (5.0 * (t1**3 - t0**3))
    t_var = t_sq - t_mean**2
    r_var = radius**2 * 3.0 / 20.0 * (t1**5 - t0**5) / (t1**3 - t0**3)
    mean = o + t_mean * d
    cov = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            along = d[a] * d[b]
            cov[a, b] = t_var * along + r_var * ((1.0 if a == b else 0.0) - along)
    return mean, cov


def _encode(values, degree, damping=None):
    sins, coss = [], []
    for j in range(degree):
        for k, v in enumerate(values):
            att = 1.0 if damping is None else math.exp(-0.5 * (4.0**j) * damping[k])
            sins.append(math.sin((2.0**j) * v) * att)
            coss.append(math.cos((2.0**j) * v) * att)
    return sins + coss


def _mirror(x, side):
    return np.array([-x[0], x[1], x[2]]) if side == "left" else np.array(x, dtype=np.float64)


@torch.no_grad()
def reference_render(state, camera, pixel):
    """Color, depth and feature of one pixel computed the slow way."""
    row, col = int(pixel[0]), int(pixel[1])
    field = state.field
    cfg = field.config
    box = field.box
    dtype = field.dtype
    center = (box.lo + box.hi) / 2.0
    half = (box.hi - box.lo) / 2.0
    o, d = _pixel_ray(camera, row, col)
    radius = (2.0 / math.sqrt(12.0)) / ((camera.fx + camera.fy) / 2.0)
    N = state.n_samples
    corr = state.corrector

    entries = []  # (t, hand order, sigma, color, feature, spacing)
    for order, hand in enumerate(state.hands):
        ref = _ReferenceHand(hand)
        near, far, hit = _slab(o, d, ref.lo, ref.hi)
        if not hit:
            continue
        step = (far - near) / N
        hand_entries = []
        for i in range(N):
            t0 = near + i * step if i else near
            t1 = near + (i + 1) * step if i < N - 1 else far
            t_mid = 0.5 * (t0 + t1)
            mean, cov = _frustum(o, d, radius, t0, t1)
            dist, w = ref.nearest(mean)
            sigma = color = feat = None
            if dist <= 1.5 * ref.margin:
                A = np.zeros((4, 4))
                for j in range(16):
                    A = A + w[j] * ref.to_canonical[j]
                x_hat = A[:3, :3] @ mean + A[:3, 3]
                Rp, _ = polar(A[:3, :3])
                cov_c = Rp @ cov @ Rp.T
                mapped = _mirror(x_hat, ref.side)
                if ref.side == "left":
                    cov_c = np.diag([-1.0, 1, 1]) @ cov_c @ np.diag([-1.0, 1, 1])
                inside = all(box.lo[k] <= mapped[k] <= box.hi[k] for k in range(3))
                if inside:
                    sigma, color, feat = _query(state, mapped, x_hat, cov_c, d, ref, center, half)
            hand_entries.append([t_mid, order, sigma, color, feat])
        # spacing to the next sample of the same hand; the last one runs to this hand's far bound
        for i, e in enumerate(hand_entries):
            nxt = hand_entries[i + 1][0] if i + 1 < len(hand_entries) else None
            e.append(nxt - e[0] if nxt is not None else max(far - e[0], 1e-4))
            entries.append(tuple(e))

    D = cfg.feature_dim
    entries.sort(key=lambda e: (e[0], e[1]))
    C = np.zeros(3)
    Z = 0.0
    Fh = np.zeros(D)
    acc = 0.0
    wsum = 0.0
    for t, _, sigma, color, feat, delta in entries:
        if sigma is None:
            continue
        Ti = math.exp(-acc)
        wi = Ti * (1.0 - math.exp(-sigma * delta))
        C += wi * color
        Z += wi * t
        Fh += wi * feat
        wsum += wi
        acc += sigma * delta
    C += (1.0 - wsum) * np.asarray(state.background, dtype=np.float64)
    return C, Z, Fh


def _query(state, mapped, x_hat, cov_c, d, ref, center, half):
    field = state.field
    cfg = field.config
    corr = state.corrector
    dtype = field.dtype
    # residual correction
    xn = [(mapped[k] - center[k]) * math.pi / half[k] for k in range(3)]
    pose = ref.pose.joint_rotations.reshape(-1)
    if ref.side == "left":
        pose = np.concatenate([[p[0], -p[1], -p[2]] for p in ref.pose.joint_rotations])
    inp = torch.tensor([_encode(xn, corr.config.pos_degree) + list(pose)], dtype=dtype)
    res = mlp_forward(corr.spec, corr.store, inp, corr.prefix)[0][0].double().numpy()
    x_can = _mirror(x_hat + res, ref.side)
    # density
    mn = [(x_can[k] - center[k]) * math.pi / half[k] for k in range(3)]
    var = [cov_c[k, k] * (math.pi / half[k]) ** 2 for k in range(3)]
    enc = torch.tensor([_encode(mn, cfg.pos_degree, var)], dtype=dtype)
    f_sigma = mlp_forward(cfg.density_spec(), field.density_store, enc, "density")[0]
    raw = mlp_forward(MlpSpec((cfg.width, 1)), field.density_store, f_sigma, "sigma")[0]
    x = float(raw[0, 0])
    sigma = max(x, 0.0) + math.log1p(math.exp(-abs(x)))
    # color
    table = field.latent_store["latent"]
    if state.frame is None or state.frame == NOVEL:
        code = table.mean(0)
    else:
        code = table[field.frame_ids.index(int(state.frame))]
    pe_d = torch.tensor([_encode(list(d), cfg.dir_degree)], dtype=dtype)
    h = mlp_forward(cfg.color_spec(), field.color_store, torch.cat([pe_d, f_sigma, code[None]], -1), "color")[0]
    rgb = mlp_forward(MlpSpec((cfg.color_width, 3)), field.color_store, h, "rgb")[0][0].double().numpy()
    feat = mlp_forward(MlpSpec((cfg.color_width, cfg.feature_dim)), field.color_store, h, "feature")[0][0].double().numpy()
    color = 1.0 / (1.0 + np.exp(-rgb))
    return sigma, color, feat
