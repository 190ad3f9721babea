"""Synthetic multi-view hand scenes: generation, storage and loading.

A scene directory holds ``scene.json`` (cameras, frames, poses, file
references), one ``.npz`` per hand asset and per-view images: color and
mask as PNG, pseudo depth as PFM with +inf background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..hand.camera import CameraModel, ring_cameras
from ..hand.kinematics import FINGERS, PARENTS, Pose, Skeleton, mirror_map_pose, skin_vertices
from ..hand.mesh import Capsule, SkinnedHandMesh, generate_procedural_hand
from ..hand.raster import PosedMesh, dilate_mask, rasterize
from .formats import FormatError, load_pfm, load_png, save_pfm, save_png

SCENE_VERSION = 1
SIDES = ("left", "right")
MIN_OCCLUSION_PIXELS = 50


class SceneError(ValueError):
    pass


@dataclass
class Frame:
    frame_id: int
    poses: dict  # side -> Pose

    def to_dict(self):
        return {"id": self.frame_id, "poses": {s: p.to_dict() for s, p in self.poses.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), {s: Pose.from_dict(p) for s, p in d["poses"].items()})


@dataclass
class ViewImages:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W), +inf background
    mask: np.ndarray  # (H, W) bool, silhouette dilated by 3 px
    occlusion: np.ndarray | None = None  # (H, W) bool, both hands' silhouettes overlap


@dataclass
class SceneData:
    hands: dict  # side -> (Skeleton, SkinnedHandMesh)
    frames: list
    cameras: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    views: dict = field(default_factory=dict)  # (frame_id, camera name) -> ViewImages
    meta: dict = field(default_factory=dict)
    color_reads: int = 0

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        self.validate()

    def validate(self):
        if not self.hands:
            raise SceneError("scene declares no hands")
        for s in self.hands:
            if s not in SIDES:
                raise SceneError(f"unknown hand side {s!r}")
        names = [c.name for c in self.cameras]
        if len(set(names)) != len(names):
            raise SceneError("camera ids must be unique")
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise SceneError("frame ids must be unique")
        for f in self.frames:
            missing = set(self.hands) - set(f.poses)
            if missing:
                raise SceneError(f"frame {f.frame_id} lacks a pose for {sorted(missing)}")

    @property
    def sides(self) -> list:
        return sorted(self.hands, key=lambda s: s != "left")

    def split(self, name: str) -> list:
        return [c for c in self.cameras if c.split == name]

    def camera(self, name: str) -> CameraModel:
        for c in self.cameras:
            if c.name == name:
                return c
        raise KeyError(f"unknown camera {name!r}")

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"unknown frame {frame_id!r}")

    def color(self, frame_id: int, camera: str) -> np.ndarray:
        """Ground-truth color image; reads are counted so RGB-free paths can be audited."""
        self.color_reads += 1
        return self.views[(frame_id, camera)].color

    def depth(self, frame_id: int, camera: str) -> np.ndarray:
        return self.views[(frame_id, camera)].depth

    def mask(self, frame_id: int, camera: str) -> np.ndarray:
        return self.views[(frame_id, camera)].mask

    def canonical_vertices(self) -> np.ndarray:
        """Rest vertices in the shared (right-hand) canonical frame."""
        side = "right" if "right" in self.hands else "left"
        v = self.hands[side][1].vertices
        return v if side == "right" else v * np.array([-1.0, 1.0, 1.0])


# ---------------------------------------------------------------------------
# pose families


def _flex(amount, rng, spread=0.15):
    """Right-hand pose curling each finger toward the palm (-x) by about ``amount`` rad per joint."""
    aa = np.zeros((16, 3))
    for name, joints in FINGERS.items():
        base = amount * (1.0 + spread * rng.standard_normal())
        for k, j in enumerate(joints):
            a = max(base * (0.8 + 0.2 * k), 0.0)
            if name == "thumb":
                aa[j] = [0.0, 0.5 * a, 0.6 * a]
            else:
                aa[j] = [0.0, 0.0, a]
    return aa


def _pose_right(amount, rng, root_rot=0.15, root_trans=(0.0, 0.0, 0.0)):
    return Pose(_flex(amount, rng), rng.normal(0.0, root_rot, 3), np.asarray(root_trans, dtype=np.float64))


def wave_poses(n, rng):
    """Single-hand sequence with varied finger flexion."""
    return [{"right": _pose_right(rng.uniform(0.05, 0.45), rng)} for _ in range(n)]


def interlock_poses(n, rng):
    """Two hands, palms facing across x = 0, fingers curled toward each other."""
    frames = []
    for _ in range(n):
        gap = rng.uniform(0.16, 0.28)
        amount = rng.uniform(0.25, 0.55)
        right = _pose_right(amount, rng, 0.08, (gap / 2, 0.0, 0.0))
        left_r = _pose_right(amount, rng, 0.08, (gap / 2, 0.0, -0.045))
        # a right-hand pose mirrored onto the left skeleton gives the mirror-image shape
        left = mirror_map_pose(left_r)
        frames.append({"left": left, "right": right})
    return frames


def bent_finger_pose(base: Pose | None = None, finger: str = "index", angle: float = 1.1) -> Pose:
    """Copy of ``base`` with one finger strongly curled (a pose unseen in training)."""
    base = base or Pose()
    aa = base.joint_rotations.copy()
    for j in FINGERS[finger]:
        aa[j] = [0.0, 0.0, angle]
    return Pose(aa, base.root_rotation.copy(), base.root_translation.copy())


# ---------------------------------------------------------------------------
# generation


@dataclass
class SceneSpec:
    hands: str = "right"  # "right" | "left" | "both"
    n_frames: int = 3
    n_train_views: int = 4
    n_test_views: int = 2
    image_size: int = 64
    distance: float = 3.0
    elevation: float = 0.25
    test_elevation: float = -0.1
    extent: float = 1.3
    pose_family: str = "wave"  # "wave" | "interlock"
    background: tuple = (0.0, 0.0, 0.0)
    asset_seed: int = 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return cls(**d)


def _sides(spec: SceneSpec):
    if spec.hands == "both":
        return ["left", "right"]
    if spec.hands in SIDES:
        return [spec.hands]
    raise SceneError(f"hands must be 'left', 'right' or 'both', got {spec.hands!r}")


def render_views(scene: SceneData, frames=None, cameras=None, with_occlusion=None) -> dict:
    """Rasterize ground truth for every (frame, camera); adds occlusion masks for two-hand scenes."""
    frames = scene.frames if frames is None else frames
    cameras = scene.cameras if cameras is None else cameras
    with_occlusion = len(scene.hands) == 2 if with_occlusion is None else with_occlusion
    views = {}
    for f in frames:
        posed = {
            s: PosedMesh.from_hand(scene.hands[s][1], skin_vertices(scene.hands[s][1], scene.hands[s][0], f.poses[s]))
            for s in scene.sides
        }
        for cam in cameras:
            r = rasterize(cam, list(posed.values()), scene.background)
            occ = None
            if with_occlusion:
                single = [rasterize(cam, posed[s]).mask for s in scene.sides]
                occ = single[0] & single[1]
            # stored precision, so an in-memory scene equals its saved copy
            color = np.round(r.color * 255.0) / 255.0
            depth = r.depth.astype(np.float32).astype(np.float64)
            views[(f.frame_id, cam.name)] = ViewImages(color, depth, dilate_mask(r.mask), occ)
    return views


def occlusion_audit(scene: SceneData) -> dict:
    """Per-frame maximum over cameras of pixels where both hands' silhouettes overlap."""
    counts = {}
    for (fid, _), v in scene.views.items():
        if v.occlusion is not None:
            counts[fid] = max(counts.get(fid, 0), int(v.occlusion.sum()))
    return counts


def generate_dataset(spec: SceneSpec, seed: int = 0) -> SceneData:
    if spec.n_frames < 1 or spec.n_train_views < 1 or spec.image_size < 11:
        raise SceneError("need at least one frame, one training view and 11x11 images")
    rng = np.random.default_rng(seed)
    sides = _sides(spec)
    hands = {s: generate_procedural_hand(s, spec.asset_seed) for s in sides}
    if spec.pose_family == "interlock":
        if len(sides) != 2:
            raise SceneError("the interlock family needs both hands")
        seq = interlock_poses(spec.n_frames, rng)
    elif spec.pose_family == "wave":
        seq = wave_poses(spec.n_frames, rng)
        if "left" in sides:
            for p in seq:
                right = p["right"]
                p["left"] = mirror_map_pose(right)
                p["left"].root_translation[0] -= 0.2
                p["right"].root_translation[0] += 0.2
            if "right" not in sides:
                for p in seq:
                    del p["right"]
    else:
        raise SceneError(f"unknown pose family {spec.pose_family!r}")
    frames = [Frame(i, {s: p[s] for s in sides}) for i, p in enumerate(seq)]

    target = np.array([0.0, 0.4, 0.0])
    cams = ring_cameras(spec.n_train_views, target, spec.distance, spec.elevation, spec.image_size, spec.extent, 0.3, "train", "train")
    step = 2 * np.pi / max(spec.n_test_views, 1)
    cams += ring_cameras(spec.n_test_views, target, spec.distance, spec.test_elevation, spec.image_size, spec.extent, 0.3 + 0.5 * step + 0.2, "test", "test")
    for c in cams:
        if not np.all(np.isfinite(c.world_to_camera.matrix())):
            raise SceneError("degenerate camera")
    scene = SceneData(hands, frames, cams, np.asarray(spec.background, dtype=np.float64), meta={"spec": spec.to_dict(), "seed": seed, "units": "scene units; hand length about 1"})
    scene.views = render_views(scene)
    if len(sides) == 2 and spec.pose_family == "interlock":
        counts = occlusion_audit(scene)
        scene.meta["occlusion_pixels"] = {str(k): v for k, v in counts.items()}
        if max(counts.values(), default=0) < MIN_OCCLUSION_PIXELS:
            raise SceneError(f"interlock scene has no frame with >= {MIN_OCCLUSION_PIXELS} occlusion pixels: {counts}")
    return scene


# ---------------------------------------------------------------------------
# storage


def _hand_to_npz(path, skeleton: Skeleton, mesh: SkinnedHandMesh):
    caps = mesh.capsules
    np.savez(
        path,
        offsets=skeleton.offsets,
        parents=np.asarray(skeleton.parents),
        vertices=mesh.vertices,
        triangles=mesh.triangles,
        weights=mesh.weights,
        albedo=mesh.albedo,
        capsule_joint=np.array([c.joint for c in caps], dtype=np.int64),
        capsule_a=np.array([c.a for c in caps]).reshape(-1, 3),
        capsule_b=np.array([c.b for c in caps]).reshape(-1, 3),
        capsule_radius=np.array([c.radius for c in caps]),
    )


def _hand_from_npz(path, side):
    with np.load(path) as z:
        skel = Skeleton(tuple(int(p) for p in z["parents"]), z["offsets"])
        caps = [Capsule(int(j), a, b, float(r)) for j, a, b, r in zip(z["capsule_joint"], z["capsule_a"], z["capsule_b"], z["capsule_radius"])]
        mesh = SkinnedHandMesh(z["vertices"], z["triangles"], z["weights"], z["albedo"], side, caps)
    mesh.validate()
    return skel, mesh


def save_scene(scene: SceneData, directory) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    hands = {}
    for s, (skel, mesh) in scene.hands.items():
        name = f"hand_{s}.npz"
        _hand_to_npz(d / name, skel, mesh)
        hands[s] = name
    views = []
    for (fid, cam), v in sorted(scene.views.items()):
        stem = f"images/f{fid:03d}_{cam}"
        save_png(d / f"{stem}_color.png", v.color)
        save_pfm(d / f"{stem}_depth.pfm", v.depth)
        save_png(d / f"{stem}_mask.png", v.mask)
        entry = {"frame": fid, "camera": cam, "color": f"{stem}_color.png", "depth": f"{stem}_depth.pfm", "mask": f"{stem}_mask.png"}
        if v.occlusion is not None:
            save_png(d / f"{stem}_occlusion.png", v.occlusion)
            entry["occlusion"] = f"{stem}_occlusion.png"
        views.append(entry)
    doc = {
        "version": SCENE_VERSION,
        "hands": hands,
        "frames": [f.to_dict() for f in scene.frames],
        "cameras": [c.to_dict() for c in scene.cameras],
        "background": scene.background.tolist(),
        "views": views,
        "meta": scene.meta,
    }
    (d / "scene.json").write_text(json.dumps(doc, indent=1))
    return d / "scene.json"


def load_scene(path) -> SceneData:
    p = Path(path)
    if p.is_dir():
        p = p / "scene.json"
    if not p.exists():
        raise FileNotFoundError(f"scene file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed scene file {p}: {exc}") from None
    if doc.get("version") != SCENE_VERSION:
        raise FormatError(f"scene version {doc.get('version')!r}, expected {SCENE_VERSION}")
    root = p.parent
    hands = {s: _hand_from_npz(root / name, s) for s, name in doc["hands"].items()}
    frames = [Frame.from_dict(f) for f in doc["frames"]]
    cams = [CameraModel.from_dict(c) for c in doc["cameras"]]
    views = {}
    for v in doc["views"]:
        color = load_png(root / v["color"])
        depth = load_pfm(root / v["depth"]).astype(np.float64)
        mask = load_png(root / v["mask"], mask=True)
        occ = load_png(root / v["occlusion"], mask=True) if "occlusion" in v else None
        views[(int(v["frame"]), v["camera"])] = ViewImages(color, depth, mask, occ)
    return SceneData(hands, frames, cams, np.asarray(doc["background"]), views, doc.get("meta", {}))
