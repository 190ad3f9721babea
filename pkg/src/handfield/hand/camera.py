"""Pinhole cameras (OpenCV axes: x right, y down, z forward) and ray generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mathcore import RigidTransform, pixel_radius


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: RigidTransform
    height: int
    width: int
    name: str = "cam"
    split: str = "train"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.split not in ("train", "test"):
            raise ValueError(f"camera split must be 'train' or 'test', got {self.split!r}")
        if not self.world_to_camera.is_orthonormal():
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        R, t = self.world_to_camera.rotation, self.world_to_camera.translation
        return -R.T @ t

    @property
    def radius(self) -> float:
        return pixel_radius(0.5 * (self.fx + self.fy))

    def pixel_grid(self) -> np.ndarray:
        """All (row, col) pairs in raster order."""
        rr, cc = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def rays(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through pixel centers (row, col)."""
        pixels = np.atleast_2d(np.asarray(pixels))
        u = pixels[:, 1] + 0.5
        v = pixels[:, 0] + 0.5
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(len(u))], axis=1)
        d = d_cam @ self.world_to_camera.rotation  # R^T applied row-wise
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coords (u=col, v=row) and camera z for world points."""
        pc = self.world_to_camera.apply(np.asarray(points, dtype=np.float64))
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_dict(self):
        return {
            "name": self.name,
            "split": self.split,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "height": self.height,
            "width": self.width,
            "rotation": self.world_to_camera.rotation.tolist(),
            "translation": self.world_to_camera.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "CameraModel":
        return cls(
            d["fx"], d["fy"], d["cx"], d["cy"],
            RigidTransform(d["rotation"], d["translation"]),
            int(d["height"]), int(d["width"]), d.get("name", "cam"), d.get("split", "train"),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World->camera transform looking from ``eye`` at ``target``; image y points against ``up``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(r) < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    return RigidTransform(R, -R @ eye)


def ring_cameras(
    n: int,
    target,
    distance: float = 3.0,
    elevation: float = 0.25,
    size: int = 64,
    extent: float = 1.3,
    phase: float = 0.0,
    split: str = "train",
    prefix: str = "cam",
) -> list[CameraModel]:
    """``n`` cameras evenly spaced on a horizontal ring around ``target``.

    The focal length is chosen so a region ``extent`` units wide at the
    target fills the frame.
    """
    target = np.asarray(target, dtype=np.float64)
    fx = size * distance / extent
    cams = []
    for k in range(n):
        az = phase + 2 * np.pi * k / n
        offset = distance * np.array(
            [np.cos(elevation) * np.sin(az), np.sin(elevation), np.cos(elevation) * np.cos(az)]
        )
        cams.append(
            CameraModel(
                fx, fx, size / 2.0, size / 2.0, look_at(target + offset, target), size, size,
                f"{prefix}{k}", split,
            )
        )
    return cams
