"""Optimization loop, checkpoints and pose-adaptation fine-tuning."""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .deformation import CanonicalBox, CorrectorConfig, ErrorCorrector, PosedHand
from .losses import LossWeights, NonFiniteLossError, TrainBatch, total_loss
from .metrics import psnr
from .nn import NonFiniteGradientError, Optimizer, ParameterStore, StepConfig
from .radiance import NOVEL, CanonicalField, FieldConfig
from .render import SceneState, render_image, render_rays, sample_pixels

FORMAT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    """Raised when a step produces non-finite losses or gradients; carries the last good checkpoint."""

    def __init__(self, message, checkpoint, step: int, log: list):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step
        self.log = log


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    budget: float = 0.05  # fraction of each image's pixels per step
    images_per_step: int = 2
    foreground_fraction: float = 0.8
    lr: float = 2e-3
    lr_final: float = 2e-4
    n_samples: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    radiance: FieldConfig = field(default_factory=FieldConfig)
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    dtype: str = "float32"
    val_every: int = 0  # 0 disables periodic validation
    val_camera: str | None = None
    single_thread: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.radiance, dict):
            self.radiance = FieldConfig.from_dict(self.radiance)
        if isinstance(self.corrector, dict):
            self.corrector = CorrectorConfig(**self.corrector)
        if self.iterations < 0:
            raise ConfigurationError("iterations must be nonnegative")
        if self.images_per_step < 1 or self.n_samples < 1:
            raise ConfigurationError("images_per_step and n_samples must be positive")
        if not 0.0 < self.budget <= 1.0:
            raise ConfigurationError(f"budget must lie in (0, 1], got {self.budget}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}")
        if self.lr < 0 or self.lr_final < 0 or (self.lr > 0) != (self.lr_final > 0):
            raise ConfigurationError("learning rates must be nonnegative and both zero or both positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class AdaptConfig:
    iterations: int = 200
    seed: int = 0
    budget: float = 0.05
    images_per_step: int = 2
    foreground_fraction: float = 0.8
    lr: float = 1e-3
    lr_final: float = 1e-4
    weights: LossWeights = field(default_factory=lambda: LossWeights(distill=0.0, hard_surface=0.0, color_variance=0.0))
    rgb_weight: float = 0.0
    single_thread: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if self.rgb_weight != 0.0:
            raise ConfigurationError("pose adaptation uses no RGB supervision; rgb_weight must be 0")
        w = self.weights
        if w.distill or w.hard_surface or w.color_variance:
            raise ConfigurationError("pose adaptation optimizes only the depth and deformation terms")
        if self.iterations < 0 or not 0.0 < self.budget <= 1.0:
            raise ConfigurationError("bad iteration count or budget")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# model and checkpoints


@dataclass
class Model:
    field: CanonicalField
    corrector: ErrorCorrector
    corrector_store: ParameterStore

    @property
    def box(self) -> CanonicalBox:
        return self.field.box

    @property
    def stores(self) -> dict[str, ParameterStore]:
        return {**self.field.stores, "correction": self.corrector_store}


def build_model(scene, config: TrainConfig) -> Model:
    box = CanonicalBox.from_vertices(scene.canonical_vertices())
    dtype = DTYPES[config.dtype]
    fld = CanonicalField(config.radiance, [f.frame_id for f in scene.frames], box, dtype, seed=config.seed)
    store = ParameterStore(dtype)
    corr = ErrorCorrector(store, box, config.corrector, torch.Generator().manual_seed(config.seed + 1))
    return Model(fld, corr, store)


@dataclass
class Checkpoint:
    arrays: dict  # "store/param" -> ndarray
    meta: dict  # config, box, frame ids, iteration, rng state, version

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def save(self, path):
        from .io.formats import save_checkpoint_file

        save_checkpoint_file(path, self.arrays, self.meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from .io.formats import FormatError, load_checkpoint_file

        arrays, meta = load_checkpoint_file(path)
        if meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"checkpoint layout version {meta.get('format_version')}, expected {FORMAT_VERSION}")
        return cls(arrays, meta)

    def equal(self, other: "Checkpoint") -> bool:
        if set(self.arrays) != set(other.arrays) or self.meta != other.meta:
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


def capture(model: Model, config: TrainConfig, iteration: int, rng: np.random.Generator | None = None, extra: dict | None = None) -> Checkpoint:
    arrays = {}
    for sname, store in model.stores.items():
        for k, v in store.state().items():
            arrays[f"{sname}/{k}"] = v
    meta = {
        "format_version": FORMAT_VERSION,
        "config": config.to_dict(),
        "box": model.box.to_dict(),
        "frame_ids": list(model.field.frame_ids),
        "iteration": int(iteration),
        "rng_state": None if rng is None else rng.bit_generator.state,
    }
    if extra:
        meta.update(extra)
    return Checkpoint(arrays, meta)


def restore(ckpt: Checkpoint) -> Model:
    config = ckpt.config
    box = CanonicalBox.from_dict(ckpt.meta["box"])
    dtype = DTYPES[config.dtype]
    fld = CanonicalField(config.radiance, ckpt.meta["frame_ids"], box, dtype, seed=config.seed)
    store = ParameterStore(dtype)
    corr = ErrorCorrector(store, box, config.corrector, torch.Generator().manual_seed(0))
    model = Model(fld, corr, store)
    for sname, st in model.stores.items():
        prefix = sname + "/"
        st.load_state({k[len(prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)})
    return model


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    if ckpt.meta.get("rng_state") is not None:
        rng.bit_generator.state = ckpt.meta["rng_state"]
    return rng


# ---------------------------------------------------------------------------
# scene plumbing


def posed_hands(scene, poses: dict) -> list:
    return [PosedHand.build(scene.hands[s][0], scene.hands[s][1], poses[s]) for s in scene.sides]


def scene_state(model: Model, scene, poses: dict, frame=NOVEL, n_samples: int = 64, hands=None) -> SceneState:
    hands = posed_hands(scene, poses) if hands is None else hands
    return SceneState(model.field, model.corrector, hands, frame, scene.background, n_samples)


def _seed_everything(seed: int, single_thread: bool):
    torch.manual_seed(seed)
    if single_thread:
        torch.set_num_threads(1)


def _targets(views, key, px, features=None, with_color=True):
    v = views[key]
    r, c = px[:, 0], px[:, 1]
    color = v.color[r, c] if with_color else np.zeros((len(px), 3))
    depth = v.depth[r, c]
    fg = v.mask[r, c]
    feat = None if features is None else features.get(*key)[r, c]
    return color, depth, fg, feat


def _batch(outs, targets, dtype, with_color=True):
    cat = torch.cat
    tc = np.concatenate([t[0] for t in targets])
    return TrainBatch(
        target_color=torch.as_tensor(tc if with_color else np.zeros_like(tc), dtype=dtype),
        target_depth=torch.as_tensor(np.concatenate([t[1] for t in targets]), dtype=dtype),
        rendered_color=cat([o.color for o in outs]),
        rendered_depth=cat([o.depth for o in outs]),
        weights=cat([o.weights for o in outs]),
        real=torch.as_tensor(np.concatenate([o.real for o in outs])),
        residuals=cat([o.residuals for o in outs]),
        target_feature=None if targets[0][3] is None else torch.as_tensor(np.concatenate([t[3] for t in targets]), dtype=dtype),
        rendered_feature=cat([o.feature for o in outs]) if targets[0][3] is not None else None,
        foreground=torch.as_tensor(np.concatenate([t[2] for t in targets])),
    )


def validate(model: Model, scene, camera: str, frame_id: int, n_samples: int = 64) -> float:
    f = scene.frame(frame_id)
    state = scene_state(model, scene, f.poses, frame_id, n_samples)
    img = render_image(state, scene.camera(camera))
    return psnr(img.color, scene.color(frame_id, camera), scene.mask(frame_id, camera))


# ---------------------------------------------------------------------------
# training


def train(scene, config: TrainConfig | None = None, features=None, callback=None, model: Model | None = None):
    """Fit the field and corrector to a scene. Returns (checkpoint, log).

    ``features`` is a FeatureSet of teacher maps; it is required when the
    distillation weight is positive. ``log`` holds one dict per step.
    """
    config = config or TrainConfig()
    if len(scene.split("train")) < 1 or len(scene.cameras) < 2 or not scene.frames:
        raise ConfigurationError("training needs at least 2 cameras (1 for training) and 1 frame")
    if config.weights.distill > 0 and features is None:
        raise ConfigurationError("distillation weight is positive but no teacher features were given")
    if features is not None and features.basis.dim != config.radiance.feature_dim:
        raise ConfigurationError(f"teacher features have {features.basis.dim} channels, field predicts {config.radiance.feature_dim}")
    _seed_everything(config.seed, config.single_thread)
    rng = np.random.default_rng(config.seed)
    model = model or build_model(scene, config)
    use_features = features if config.weights.distill > 0 else None

    train_cams = scene.split("train")
    keys = [(f.frame_id, c.name) for f in scene.frames for c in train_cams]
    hands = {f.frame_id: posed_hands(scene, f.poses) for f in scene.frames}
    views = {k: scene.views[k] for k in keys}
    scene.color_reads += len(keys)
    step_cfg = StepConfig(config.lr, config.lr_final, total_steps=config.iterations)
    opt = Optimizer(list(model.stores.values()), step_cfg)
    val_cam = config.val_camera or (scene.split("test") or train_cams)[0].name
    dtype = DTYPES[config.dtype]
    log = []

    for it in range(config.iterations):
        t_start = time.perf_counter()
        pick = rng.choice(len(keys), size=min(config.images_per_step, len(keys)), replace=False)
        outs, targets = [], []
        for i in pick:
            key = keys[i]
            cam = scene.camera(key[1])
            px = sample_pixels(views[key].mask, config.budget, rng, config.foreground_fraction)
            o, d = cam.rays(px)
            state = SceneState(model.field, model.corrector, hands[key[0]], key[0], scene.background, config.n_samples)
            outs.append(render_rays(state, o, d, cam.radius, rng))
            targets.append(_targets(views, key, px, use_features))
        batch = _batch(outs, targets, dtype)
        try:
            loss, terms = total_loss(batch, config.weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
        except (NonFiniteLossError, NonFiniteGradientError) as exc:
            opt.zero_grad()
            ckpt = capture(model, config, it, rng)
            raise TrainingDivergedError(f"training diverged at step {it}: {exc}", ckpt, it, log) from exc
        rec = {"step": it, "lr": step_cfg.lr_at(it), **terms, "seconds": time.perf_counter() - t_start}
        if config.val_every and (it + 1) % config.val_every == 0:
            rec["val_psnr_masked"] = validate(model, scene, val_cam, scene.frames[0].frame_id, config.n_samples)
        log.append(rec)
        if callback is not None:
            callback(rec)
    return capture(model, config, config.iterations, rng), log


# ---------------------------------------------------------------------------
# pose adaptation


def pose_adapt(checkpoint: Checkpoint, scene, poses: dict, cameras, config: AdaptConfig | None = None, callback=None):
    """Fine-tune only the corrector on novel poses with depth and deformation losses.

    Depth targets are rasterized from the posed meshes; no ground-truth
    color is read. Returns (checkpoint, log).
    """
    from .io.scene import Frame, render_views

    config = config or AdaptConfig()
    _seed_everything(config.seed, config.single_thread)
    rng = np.random.default_rng(config.seed)
    model = restore(checkpoint)
    train_cfg = checkpoint.config
    for st in model.field.stores.values():
        for t in st.tensors():
            t.requires_grad_(False)

    cameras = list(cameras)
    if not cameras:
        raise ConfigurationError("pose adaptation needs at least one camera")
    frame = Frame(-1, poses)
    views = render_views(scene, [frame], cameras, with_occlusion=False)
    hands = posed_hands(scene, poses)
    keys = [(-1, c.name) for c in cameras]
    cam_by_name = {c.name: c for c in cameras}
    step_cfg = StepConfig(config.lr, config.lr_final, total_steps=config.iterations)
    opt = Optimizer(model.corrector_store, step_cfg)
    dtype = model.field.dtype
    log = []
    for it in range(config.iterations):
        pick = rng.choice(len(keys), size=min(config.images_per_step, len(keys)), replace=False)
        outs, targets = [], []
        for i in pick:
            key = keys[i]
            cam = cam_by_name[key[1]]
            px = sample_pixels(views[key].mask, config.budget, rng, config.foreground_fraction)
            o, d = cam.rays(px)
            state = SceneState(model.field, model.corrector, hands, NOVEL, scene.background, train_cfg.n_samples)
            outs.append(render_rays(state, o, d, cam.radius, rng))
            targets.append(_targets(views, key, px, with_color=False))
        batch = _batch(outs, targets, dtype, with_color=False)
        try:
            loss, terms = total_loss(batch, config.weights, rgb_weight=0.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
        except (NonFiniteLossError, NonFiniteGradientError) as exc:
            ckpt = capture(model, train_cfg, checkpoint.iteration, None, {"adapted_steps": it})
            raise TrainingDivergedError(f"adaptation diverged at step {it}: {exc}", ckpt, it, log) from exc
        rec = {"step": it, "lr": step_cfg.lr_at(it), **{k: terms[k] for k in ("depth", "deform", "total")}}
        log.append(rec)
        if callback is not None:
            callback(rec)
    extra = {"adapted_steps": config.iterations, "adapt_config": config.to_dict()}
    return capture(model, train_cfg, checkpoint.iteration, restore_rng(checkpoint), extra), log


def frozen_arrays(ckpt: Checkpoint) -> dict:
    """The radiance-field parameters (everything except the corrector)."""
    return {k: v for k, v in ckpt.arrays.items() if not k.startswith("correction/")}


def clone_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in ckpt.arrays.items()}, copy.deepcopy(ckpt.meta))
