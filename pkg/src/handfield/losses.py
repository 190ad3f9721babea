"""Training objectives. All terms are mean-reduced so their scale does not depend on batch size."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch


class NonFiniteLossError(FloatingPointError):
    def __init__(self, terms: dict):
        self.terms = terms
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        super().__init__(f"non-finite loss terms: {', '.join(bad)} ({terms})")


@dataclass
class LossWeights:
    depth: float = 0.1
    distill: float = 0.1
    deform: float = 0.01
    hard_surface: float = 0.001
    color_variance: float = 0.01
    beta: float = 0.01  # smooth-L1 threshold for depth, scene units
    cvar_beta: float = 0.01  # smooth-L1 threshold for the variance gap

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {k} must be a finite nonnegative number, got {v}")
        if self.beta <= 0 or self.cvar_beta <= 0:
            raise ValueError("smooth-L1 thresholds must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainBatch:
    """Targets and rendered quantities for a set of rays."""

    target_color: torch.Tensor  # (R, 3)
    target_depth: torch.Tensor  # (R,), +inf where there is no pseudo depth
    rendered_color: torch.Tensor
    rendered_depth: torch.Tensor
    weights: torch.Tensor  # (R, M) per-sample weights in merged order
    real: torch.Tensor  # (R, M) bool, excludes padding
    residuals: torch.Tensor  # (K, 3)
    target_feature: torch.Tensor | None = None  # (R, D)
    rendered_feature: torch.Tensor | None = None
    foreground: torch.Tensor | None = None  # (R,) bool; defaults to finite target depth

    def __post_init__(self):
        R = len(self.target_color)
        for name in ("target_depth", "rendered_color", "rendered_depth", "weights"):
            if len(getattr(self, name)) != R:
                raise ValueError(f"{name} has {len(getattr(self, name))} rays, expected {R}")
        if self.foreground is None:
            self.foreground = torch.isfinite(self.target_depth)
        if not torch.isfinite(self.target_color).all():
            raise ValueError("target colors must be finite")

    @property
    def n_rays(self) -> int:
        return len(self.target_color)


def smooth_l1(e, beta: float):
    a = e.abs()
    return torch.where(a <= beta, 0.5 * e**2 / beta, a - 0.5 * beta)


def loss_rgb(batch: TrainBatch):
    if batch.n_rays == 0:
        raise ValueError("empty batch")
    return ((batch.rendered_color - batch.target_color) ** 2).sum(-1).mean()


def loss_depth(batch: TrainBatch, beta: float = 0.01):
    m = batch.foreground & torch.isfinite(batch.target_depth)
    if not bool(m.any()):
        warnings.warn("no rays with pseudo depth in batch; depth loss is 0", RuntimeWarning, stacklevel=2)
        return batch.rendered_depth.sum() * 0.0
    return smooth_l1(batch.target_depth[m] - batch.rendered_depth[m], beta).mean()


def loss_distill(batch: TrainBatch):
    if batch.target_feature is None or batch.rendered_feature is None:
        raise KeyError("no teacher feature map loaded for this batch")
    # silhouette rays only: an empty ray renders a zero feature, which no teacher target of the background matches
    m = batch.foreground & torch.isfinite(batch.target_depth)
    if not bool(m.any()):
        return batch.rendered_feature.sum() * 0.0
    return ((batch.rendered_feature[m] - batch.target_feature[m]) ** 2).mean()


def loss_deform(batch: TrainBatch):
    r = batch.residuals
    if len(r) == 0:
        return r.sum() * 0.0
    return torch.linalg.norm(r, dim=-1).mean()


def hard_surface_term(w):
    return -torch.logaddexp(-w.abs(), -(1.0 - w).abs())


def loss_hard_surface(batch: TrainBatch):
    w = batch.weights[batch.real]
    if w.numel() == 0:
        return batch.weights.sum() * 0.0
    return hard_surface_term(w).mean()


def loss_color_variance(batch: TrainBatch, beta: float = 0.01):
    m = batch.foreground
    if int(m.sum()) < 2:
        warnings.warn("fewer than 2 foreground rays; color variance loss is 0", RuntimeWarning, stacklevel=2)
        return batch.rendered_color.sum() * 0.0
    var_t = batch.target_color[m].var(dim=0, unbiased=False)
    var_p = batch.rendered_color[m].var(dim=0, unbiased=False)
    return smooth_l1(var_t - var_p, beta).sum()


TERMS = ("rgb", "depth", "distill", "deform", "hard_surface", "color_variance")


def loss_terms(batch: TrainBatch, weights: LossWeights) -> dict:
    out = {
        "rgb": loss_rgb(batch),
        "depth": loss_depth(batch, weights.beta),
        "deform": loss_deform(batch),
        "hard_surface": loss_hard_surface(batch),
        "color_variance": loss_color_variance(batch, weights.cvar_beta),
    }
    if batch.target_feature is not None:
        out["distill"] = loss_distill(batch)
    elif weights.distill > 0:
        loss_distill(batch)  # raises: features required
    return out


def total_loss(batch: TrainBatch, weights: LossWeights, rgb_weight: float = 1.0):
    """Weighted objective and a float breakdown of every computed term."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        terms = loss_terms(batch, weights)
    lam = {
        "rgb": rgb_weight,
        "depth": weights.depth,
        "distill": weights.distill,
        "deform": weights.deform,
        "hard_surface": weights.hard_surface,
        "color_variance": weights.color_variance,
    }
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    if not all(math.isfinite(v) for v in breakdown.values()):
        raise NonFiniteLossError(breakdown)
    total = None
    for k, v in terms.items():
        if lam[k] > 0:
            total = lam[k] * v if total is None else total + lam[k] * v
    if total is None:
        total = terms["rgb"] * 0.0
    breakdown["total"] = float(total.detach())
    return total, breakdown
