"""Teacher feature maps: a built-in 3x3-neighborhood teacher or precomputed raw maps, then normalize + PCA."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .formats import FeatureMap, FormatError, load_feature_map, save_feature_map

MAX_FIT_PIXELS = 100_000


def toy_teacher(image: np.ndarray) -> np.ndarray:
    """27-channel raw features: the RGB values of each pixel's 3x3 neighborhood (edge-padded)."""
    img = np.asarray(image, dtype=np.float64)
    H, W, _ = img.shape
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    patches = [pad[dr:dr + H, dc:dc + W] for dr in range(3) for dc in range(3)]
    return np.concatenate(patches, axis=-1)


def l2_normalize(raw: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-norm feature vectors; all-zero vectors stay zero."""
    n = np.linalg.norm(raw, axis=-1, keepdims=True)
    return np.where(n > eps, raw / np.maximum(n, eps), 0.0)


@dataclass
class PcaBasis:
    mean: np.ndarray  # (C,)
    components: np.ndarray  # (C, D), orthonormal columns
    variances: np.ndarray  # (C,) all eigenvalues, descending

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def project(self, x):
        return (np.asarray(x) - self.mean) @ self.components

    def reconstruct(self, z):
        return np.asarray(z) @ self.components.T + self.mean

    def save(self, path):
        np.savez(path, mean=self.mean, components=self.components, variances=self.variances)

    @classmethod
    def load(cls, path) -> "PcaBasis":
        with np.load(path) as z:
            return cls(z["mean"], z["components"], z["variances"])


def fit_pca(samples: np.ndarray, dim: int) -> PcaBasis:
    """Principal axes of (n, C) samples via SVD of the centered data."""
    X = np.asarray(samples, dtype=np.float64)
    C = X.shape[1]
    if dim > C:
        raise ValueError(f"cannot keep {dim} components of {C}-channel features")
    mean = X.mean(0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    var = np.zeros(C)
    var[: len(s)] = s**2 / len(X)
    comps = Vt[:dim].T
    # fix the sign of each axis for reproducibility
    sign = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(dim)])
    return PcaBasis(mean, comps * np.where(sign == 0, 1.0, sign), var)


@dataclass
class FeatureSet:
    basis: PcaBasis
    maps: dict = field(default_factory=dict)  # (frame_id, camera name) -> (H, W, D) float32

    def get(self, frame_id, camera) -> np.ndarray:
        try:
            return self.maps[(frame_id, camera)]
        except KeyError:
            raise KeyError(f"no teacher feature map for frame {frame_id}, camera {camera!r}") from None


def extract_teacher_features(scene, dim: int = 16, teacher: str = "toy", raw_maps: dict | None = None, seed: int = 0, cameras=None) -> FeatureSet:
    """Raw features per training view, L2-normalized, reduced to ``dim`` channels by one shared PCA.

    ``teacher="external"`` takes ``raw_maps`` {(frame, camera): (H, W, C)} instead of the toy teacher.
    """
    cameras = [c.name for c in scene.split("train")] if cameras is None else cameras
    keys = [(f.frame_id, c) for f in scene.frames for c in cameras]
    raw = {}
    for k in keys:
        if teacher == "toy":
            raw[k] = toy_teacher(scene.color(*k))
        elif teacher == "external":
            if raw_maps is None or k not in raw_maps:
                raise KeyError(f"no external raw feature map for frame {k[0]}, camera {k[1]!r}")
            raw[k] = np.asarray(raw_maps[k], dtype=np.float64)
        else:
            raise ValueError(f"unknown teacher {teacher!r}")
    normed = {k: l2_normalize(v) for k, v in raw.items()}
    channels = {v.shape[-1] for v in normed.values()}
    if len(channels) != 1:
        raise ValueError(f"raw maps disagree on channel count: {sorted(channels)}")
    if dim > channels.pop():
        raise ValueError(f"feature dimension {dim} exceeds raw channel count")
    fg = [normed[k][scene.mask(*k)] for k in keys]
    pool = np.concatenate(fg) if fg and sum(len(x) for x in fg) else np.concatenate([v.reshape(-1, v.shape[-1]) for v in normed.values()])
    if len(pool) > MAX_FIT_PIXELS:
        pool = pool[np.random.default_rng(seed).choice(len(pool), MAX_FIT_PIXELS, replace=False)]
    basis = fit_pca(pool, dim)
    maps = {k: basis.project(v).astype(np.float32) for k, v in normed.items()}
    return FeatureSet(basis, maps)


def random_features(like: FeatureSet, seed: int = 0) -> FeatureSet:
    """Targets of identical shape and overall scale drawn at random (a control for distillation)."""
    rng = np.random.default_rng(seed)
    scale = float(np.std(np.concatenate([m.ravel() for m in like.maps.values()]))) if like.maps else 1.0
    maps = {k: (scale * rng.standard_normal(m.shape)).astype(np.float32) for k, m in like.maps.items()}
    return FeatureSet(like.basis, maps)


def save_features(fs: FeatureSet, directory, camera_ids: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fs.basis.save(d / "pca_basis.npz")
    for (fid, cam), m in fs.maps.items():
        save_feature_map(d / f"f{fid:03d}_{cam}.hffm", FeatureMap(m, fid, camera_ids[cam]))


def load_features(directory, camera_names: dict) -> FeatureSet:
    """``camera_names`` maps the integer camera id stored in each file back to a camera name."""
    d = Path(directory)
    if not (d / "pca_basis.npz").exists():
        raise FileNotFoundError(f"no PCA basis in {d}")
    basis = PcaBasis.load(d / "pca_basis.npz")
    maps = {}
    for p in sorted(d.glob("*.hffm")):
        fm = load_feature_map(p)
        if fm.camera_id not in camera_names:
            raise FormatError(f"{p}: unknown camera id {fm.camera_id}")
        maps[(fm.frame_id, camera_names[fm.camera_id])] = fm.data
    return FeatureSet(basis, maps)
