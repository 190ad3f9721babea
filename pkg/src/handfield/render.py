"""Pixel sampling, two-hand sample merging and volume rendering."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .deformation import CanonicalBox, ErrorCorrector, HandSamples, PosedHand, correct, deform_ray_samples, side_map_points
from .radiance import NOVEL, CanonicalField

MIN_DELTA = 1e-4


def sample_pixels(mask, budget_fraction: float, rng: np.random.Generator, foreground_fraction: float = 0.8) -> np.ndarray:
    """ceil(budget*H*W) distinct (row, col) pixels, mostly from the foreground mask."""
    if not 0.0 < budget_fraction <= 1.0:
        raise ValueError(f"budget fraction must lie in (0, 1], got {budget_fraction}")
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    n = int(math.ceil(budget_fraction * H * W - 1e-9))
    fg = np.flatnonzero(mask.ravel())
    bg = np.flatnonzero(~mask.ravel())
    if len(fg) == 0:
        warnings.warn("empty foreground mask; sampling background only", RuntimeWarning, stacklevel=2)
    n_fg = min(int(round(foreground_fraction * n)), len(fg))
    n_bg = min(n - n_fg, len(bg))
    n_fg = min(n - n_bg, len(fg))
    pick = np.concatenate([
        rng.choice(fg, size=n_fg, replace=False) if n_fg else np.zeros(0, dtype=np.int64),
        rng.choice(bg, size=n_bg, replace=False) if n_bg else np.zeros(0, dtype=np.int64),
    ])
    return np.stack([pick // W, pick % W], axis=1)


# ---------------------------------------------------------------------------
# list form, one ray at a time


@dataclass
class MergedSample:
    t: float
    sigma: float
    color: np.ndarray
    feature: np.ndarray
    side: str = "right"
    delta: float | None = None  # spacing within the sample's own hand; None falls back to the merged list


def compose_hands(samples_left: list, samples_right: list) -> list:
    """Stable merge by t; on equal t the left-hand sample comes first."""
    return sorted(list(samples_left) + list(samples_right), key=lambda s: s.t)


def deltas(t, far: float):
    """Spacing to the next sample; the last spacing runs to ``far`` (at least MIN_DELTA)."""
    t = np.asarray(t, dtype=np.float64)
    if len(t) == 0:
        return t
    return np.append(np.diff(t), max(far - t[-1], MIN_DELTA))


def volume_render(merged: list, far: float, background=(0.0, 0.0, 0.0)):
    """Composite a merged sample list. Returns (C, Z, F, weights, transmittance)."""
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64))
    if not merged:
        return bg.clone(), torch.zeros(()), None, torch.zeros(0), torch.zeros(0)
    t = torch.as_tensor([s.t for s in merged], dtype=torch.float64)
    fallback = deltas(t.numpy(), far)
    delta = torch.as_tensor([fb if s.delta is None else s.delta for s, fb in zip(merged, fallback)], dtype=torch.float64)
    sigma = torch.stack([torch.as_tensor(s.sigma, dtype=torch.float64) for s in merged])
    color = torch.stack([torch.as_tensor(s.color, dtype=torch.float64) for s in merged])
    feat = torch.stack([torch.as_tensor(s.feature, dtype=torch.float64) for s in merged])
    C, Z, Fh, w, T = composite(sigma[None], delta[None], t[None], color[None], feat[None], bg)
    return C[0], Z[0], Fh[0], w[0], T[0]


def composite(sigma, delta, t, color, feature, background):
    """Batched alpha compositing over the last sample axis.

    sigma, delta, t: (R, M); color (R, M, 3); feature (R, M, D).
    Returns (C (R, 3), Z (R,), F (R, D), weights (R, M), transmittance (R, M)).
    """
    if torch.any(sigma < 0) or torch.any(torch.as_tensor(delta) < 0):
        raise ValueError("volume rendering requires nonnegative density and spacing")
    tau = sigma * delta
    before = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau, dim=-1)[..., :-1]], dim=-1)
    T = torch.exp(-before)
    alpha = 1.0 - torch.exp(-tau)
    w = T * alpha
    bg = torch.as_tensor(background, dtype=w.dtype)
    C = (w[..., None] * color).sum(-2) + (1.0 - w.sum(-1, keepdim=True)) * bg
    Z = (w * t).sum(-1)
    Fh = (w[..., None] * feature).sum(-2)
    return C, Z, Fh, w, T


# ---------------------------------------------------------------------------
# batched ray rendering


@dataclass
class SceneState:
    """Everything needed to render one frame: field, corrector and posed hands."""

    field: CanonicalField
    corrector: ErrorCorrector
    hands: list  # PosedHand, at most one per side
    frame: object = NOVEL
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_samples: int = 64

    def __post_init__(self):
        sides = [h.side for h in self.hands]
        if len(set(sides)) != len(sides):
            raise ValueError("at most one hand per side")
        # left first: merge ties resolve to the left hand
        self.hands = sorted(self.hands, key=lambda h: h.side != "left")
        self.background = np.asarray(self.background, dtype=np.float64)

    @property
    def box(self) -> CanonicalBox:
        return self.field.box


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    depth: torch.Tensor  # (R,)
    feature: torch.Tensor  # (R, D)
    weights: torch.Tensor  # (R, M) in merged order
    transmittance: torch.Tensor
    t: np.ndarray  # (R, M) merged t, +inf for padding
    real: np.ndarray  # (R, M) bool, not padding
    source: np.ndarray  # (R, M) index into state.hands, -1 for padding
    residuals: torch.Tensor  # (K, 3) over all corrected samples
    samples: list  # HandSamples per hand

    @property
    def weight_sum(self):
        return self.weights.sum(-1)


def _field_at_samples(state: SceneState, samples: list, directions):
    """Run correction and radiance queries on the active samples of every hand."""
    dtype = state.field.dtype
    x_can, var, dirs, residuals = [], [], [], []
    for s in samples:
        if not len(s.x_hat):
            continue
        xc, r = correct(s.x_hat, s.pose, s.side, state.corrector)
        x_can.append(xc)
        residuals.append(r)
        var.append(torch.as_tensor(np.diagonal(s.cov, axis1=-2, axis2=-1).copy(), dtype=dtype))
        rows, _ = s.active_index()
        dirs.append(directions[rows])
    D = state.field.config.feature_dim
    if not x_can:
        empty = torch.zeros(0, dtype=dtype)
        return empty, torch.zeros(0, 3, dtype=dtype), torch.zeros(0, D, dtype=dtype), torch.zeros(0, 3, dtype=dtype)
    x_can = torch.cat(x_can)
    var = torch.cat(var)
    sigma, f_sigma = state.field.density(state.box.normalize(x_can), state.box.normalize_var(var))
    c, f_c = state.field.color(np.concatenate(dirs), f_sigma, state.frame)
    return sigma, c, f_c, torch.cat(residuals)


def render_rays(state: SceneState, origins, directions, radii, rng: np.random.Generator | None = None) -> RenderOutput:
    """Deform, query, merge and composite a batch of rays for every hand in the state."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    R, N = len(o), state.n_samples
    dtype = state.field.dtype
    D = state.field.config.feature_dim
    samples = [deform_ray_samples(o, d, radii, h, state.box, N, rng) for h in state.hands]
    sigma_a, c_a, f_a, residuals = _field_at_samples(state, samples, d)

    H = len(samples)
    sigma = torch.zeros(R, H * N, dtype=dtype)
    color = torch.zeros(R, H * N, 3, dtype=dtype)
    feat = torch.zeros(R, H * N, D, dtype=dtype)
    t = np.full((R, H * N), np.inf)
    source = np.full((R, H * N), -1, dtype=np.int64)
    delta = np.zeros((R, H * N))
    k = 0
    for h, s in enumerate(samples):
        cols = slice(h * N, (h + 1) * N)
        t[:, cols] = np.where(s.hit[:, None], s.t, np.inf)
        source[:, cols] = np.where(s.hit[:, None], h, -1)
        # spacing within the hand's own samples, so another hand's samples never split it
        own = np.concatenate([np.diff(s.t, axis=1), np.maximum(s.far - s.t[:, -1], MIN_DELTA)[:, None]], axis=1)
        delta[:, cols] = np.where(s.hit[:, None], own, 0.0)
        rows, idx = s.active_index()
        n = len(rows)
        if n:
            flat = torch.as_tensor(rows * (H * N) + h * N + idx)
            sel = slice(k, k + n)
            sigma = sigma.reshape(-1).index_put((flat,), sigma_a[sel]).reshape(R, H * N)
            color = color.reshape(-1, 3).index_put((flat,), c_a[sel]).reshape(R, H * N, 3)
            feat = feat.reshape(-1, D).index_put((flat,), f_a[sel]).reshape(R, H * N, D)
            k += n

    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, 1)
    source = np.take_along_axis(source, order, 1)
    delta = np.take_along_axis(delta, order, 1)
    real = np.isfinite(t)
    idx = torch.as_tensor(order)
    sigma = torch.gather(sigma, 1, idx)
    color = torch.gather(color, 1, idx[..., None].expand(-1, -1, 3))
    feat = torch.gather(feat, 1, idx[..., None].expand(-1, -1, D))

    t_depth = np.where(real, t, 0.0)
    C, Z, Fh, w, T = composite(
        sigma, torch.as_tensor(delta, dtype=dtype), torch.as_tensor(t_depth, dtype=dtype), color, feat, state.background
    )
    return RenderOutput(C, Z, Fh, w, T, t, real, source, residuals, samples)


@dataclass
class ImageBuffers:
    color: np.ndarray
    depth: np.ndarray
    feature: np.ndarray
    weight_sum: np.ndarray
    failed: list = field(default_factory=list)


def render_image(state: SceneState, camera, mode: str = "full", pixels=None, chunk: int = 2048, rng=None) -> ImageBuffers:
    """Render every pixel (``full``, deterministic midpoints) or a given pixel subset (``train-subset``)."""
    if mode not in ("full", "train-subset"):
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "full":
        pixels = camera.pixel_grid()
        rng = None
    elif pixels is None:
        raise ValueError("train-subset mode needs explicit pixels")
    pixels = np.atleast_2d(np.asarray(pixels))
    Hh, Ww = camera.height, camera.width
    D = state.field.config.feature_dim
    color = np.broadcast_to(state.background, (Hh, Ww, 3)).copy()
    depth = np.zeros((Hh, Ww))
    feat = np.zeros((Hh, Ww, D))
    wsum = np.zeros((Hh, Ww))
    failed = []

    def run(px):
        o, d = camera.rays(px)
        with torch.no_grad():
            out = render_rays(state, o, d, camera.radius, rng)
        r, c = px[:, 0], px[:, 1]
        color[r, c] = out.color.double().numpy()
        depth[r, c] = out.depth.double().numpy()
        feat[r, c] = out.feature.double().numpy()
        wsum[r, c] = out.weight_sum.double().numpy()

    for start in range(0, len(pixels), chunk):
        px = pixels[start:start + chunk]
        try:
            run(px)
        except Exception:  # isolate the failing pixels
            for p in px:
                try:
                    run(p[None])
                except Exception as exc:
                    failed.append((int(p[0]), int(p[1]), repr(exc)))
    return ImageBuffers(color, depth, feat, wsum, failed)
