"""Image and depth metrics: PSNR, Gaussian-window SSIM and mean absolute depth error."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MODES = ("novel-view", "novel-pose-generalize", "novel-pose-adapt")


def _check_same(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(pred, target, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels with peak value 1; MSE of 0 reports the 99 dB cap."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[: mask.ndim]:
            raise ValueError(f"mask shape {mask.shape} does not match image {pred.shape}")
        if not mask.any():
            raise ValueError("empty mask")
        pred, target = pred[mask], target[mask]
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    # separable valid-mode correlation
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = len(g) // 2
    return out[h:-h or None, h:-h or None]


def ssim_map(pred, target) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    if pred.ndim == 3:
        pred, target = pred.mean(-1), target.mean(-1)
    if min(pred.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {pred.shape}")
    g = gaussian_window()
    mx, my = _filter(pred, g), _filter(target, g)
    sxx = _filter(pred * pred, g) - mx * mx
    syy = _filter(target * target, g) - my * my
    sxy = _filter(pred * target, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(pred, target) -> float:
    """Mean local SSIM of the channel-mean grayscale images (11x11 Gaussian window, sigma 1.5)."""
    return float(np.clip(ssim_map(pred, target).mean(), -1.0, 1.0))


def depth_error(pred, target, mask=None) -> float:
    """Mean |pred - target| over masked pixels with finite target depth."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_same(pred, target)
    m = np.isfinite(target)
    if mask is not None:
        m &= np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty depth mask")
    return float(np.mean(np.abs(pred[m] - target[m])))


@dataclass
class ImageMetrics:
    frame: int
    camera: str
    psnr: float
    psnr_masked: float
    ssim: float
    depth_error: float


@dataclass
class EvalReport:
    mode: str
    images: list = field(default_factory=list)  # ImageMetrics
    lpips: None = None  # reserved, not computed

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def add(self, m: ImageMetrics):
        if not -1.0 <= m.ssim <= 1.0 or m.depth_error < 0:
            raise ValueError("metric out of range")
        self.images.append(m)

    @property
    def count(self) -> int:
        return len(self.images)

    def aggregate(self) -> dict:
        keys = ("psnr", "psnr_masked", "ssim", "depth_error")
        if not self.images:
            return {k: float("nan") for k in keys}
        return {k: float(np.mean([getattr(m, k) for m in self.images])) for k in keys}

    def to_dict(self):
        return {"mode": self.mode, "count": self.count, "aggregate": self.aggregate(), "lpips": None, "images": [asdict(m) for m in self.images]}

    def table(self) -> str:
        rows = [f"{'frame':>5} {'camera':<10} {'PSNR':>7} {'PSNR(m)':>7} {'SSIM':>6} {'DE':>7}"]
        for m in self.images:
            rows.append(f"{m.frame:>5} {m.camera:<10} {m.psnr:7.2f} {m.psnr_masked:7.2f} {m.ssim:6.3f} {m.depth_error:7.4f}")
        a = self.aggregate()
        rows.append(f"{'mean':>5} {'':<10} {a['psnr']:7.2f} {a['psnr_masked']:7.2f} {a['ssim']:6.3f} {a['depth_error']:7.4f}")
        return "\n".join(rows)
