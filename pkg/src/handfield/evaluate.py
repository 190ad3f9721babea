"""Render held-out views of a trained model and score them against ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import EvalReport, ImageMetrics, depth_error, psnr, ssim
from .radiance import NOVEL
from .render import ImageBuffers, render_image
from .train import Model, posed_hands, scene_state


@dataclass
class RenderedView:
    frame: int
    camera: str
    image: ImageBuffers


def render_views(model: Model, scene, frames=None, cameras=None, novel: bool = False) -> list:
    """Deterministic full renders for (frame, camera) pairs; test cameras by default."""
    frames = scene.frames if frames is None else frames
    cameras = scene.split("test") if cameras is None else cameras
    out = []
    for f in frames:
        hands = posed_hands(scene, f.poses)
        state = scene_state(model, scene, f.poses, NOVEL if novel else f.frame_id, hands=hands)
        for c in cameras:
            out.append(RenderedView(f.frame_id, c.name, render_image(state, c)))
    return out


def score(rendered: list, views: dict, mode: str = "novel-view") -> EvalReport:
    """EvalReport from renders and ground-truth ViewImages keyed by (frame, camera)."""
    report = EvalReport(mode)
    for r in rendered:
        gt = views[(r.frame, r.camera)]
        silhouette = np.isfinite(gt.depth)
        report.add(ImageMetrics(
            frame=r.frame,
            camera=r.camera,
            psnr=psnr(r.image.color, gt.color),
            psnr_masked=psnr(r.image.color, gt.color, gt.mask) if gt.mask.any() else float("nan"),
            ssim=ssim(r.image.color, gt.color),
            depth_error=depth_error(r.image.depth, gt.depth, silhouette) if silhouette.any() else float("nan"),
        ))
    return report


def evaluate(model: Model, scene, frames=None, cameras=None, mode: str = "novel-view", views: dict | None = None):
    """Render and score. ``views`` overrides the scene's stored ground truth (e.g. for novel poses)."""
    novel = mode != "novel-view"
    rendered = render_views(model, scene, frames, cameras, novel)
    return score(rendered, scene.views if views is None else views, mode), rendered


def region_depth_error(rendered: list, views: dict, region: str = "occlusion") -> float:
    """Mean |dZ| over the union of a per-view region mask (``occlusion`` or ``mask``) with finite target depth."""
    errs = []
    for r in rendered:
        gt = views[(r.frame, r.camera)]
        m = getattr(gt, region)
        if m is None:
            raise ValueError(f"views carry no {region!r} masks")
        m = m & np.isfinite(gt.depth)
        errs.append(np.abs(r.image.depth[m] - gt.depth[m]))
    errs = np.concatenate(errs)
    if errs.size == 0:
        raise ValueError(f"empty {region} region")
    return float(errs.mean())
