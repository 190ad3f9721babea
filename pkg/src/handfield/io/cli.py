"""Command-line interface.

Every failure prints one machine-parsable line to stderr::

    handfield-error {"code": 3, "message": "...", "type": "FileNotFoundError"}

and exits with that nonzero code (2 usage, 3 missing file, 4 bad file, 1 other).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OTHER, EXIT_USAGE, EXIT_MISSING, EXIT_FORMAT = 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(code: int, exc_type: str, message: str):
    print("handfield-error " + json.dumps({"code": code, "type": exc_type, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {p}")
    return json.loads(p.read_text())


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()] if text else None


def _str_list(text):
    return [x.strip() for x in text.split(",") if x.strip()] if text else None


def _setup(args):
    import torch

    if args.single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(args.seed)


def _camera_ids(scene):
    return {c.name: i for i, c in enumerate(scene.cameras)}


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    from .scene import SceneSpec, generate_dataset, save_scene

    spec = SceneSpec.from_dict(_read_json(args.config)) if args.config else SceneSpec()
    if args.frames is not None:
        spec.n_frames = int(args.frames)
    if args.views is not None:
        spec.n_train_views = int(args.views)
    if args.hands:
        spec.hands = args.hands
    if args.family:
        spec.pose_family = args.family
    scene = generate_dataset(spec, args.seed)
    path = save_scene(scene, args.out)
    print(json.dumps({"scene": str(path), "views": len(scene.views), "meta": scene.meta}, sort_keys=True))


def _train_config(args):
    from ..train import TrainConfig

    d = _read_json(args.config) if args.config else {}
    d.setdefault("seed", args.seed)
    if args.iterations is not None:
        d["iterations"] = args.iterations
    if args.single_thread:
        d["single_thread"] = True
    if args.seed_given:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _features(scene, args, config):
    from .features import extract_teacher_features, load_features

    if config.weights.distill <= 0:
        return None
    if args.features:
        names = {i: n for n, i in _camera_ids(scene).items()}
        return load_features(args.features, names)
    return extract_teacher_features(scene, dim=config.radiance.feature_dim, seed=config.seed)


def cmd_train(args):
    from ..train import train
    from .report import plot_loss_curves, write_json, write_log
    from .scene import load_scene

    scene = load_scene(args.scene)
    config = _train_config(args)
    feats = _features(scene, args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = train(scene, config, feats)
    ckpt.save(out / "checkpoint.hfck")
    write_log(out / "train_log.jsonl", log)
    write_json(out / "config.json", config.to_dict())
    if log:
        plot_loss_curves(out / "loss_curves.png", log)
    print(json.dumps({"checkpoint": str(out / "checkpoint.hfck"), "iterations": config.iterations, "final": log[-1] if log else None}, sort_keys=True))


def _load(args):
    from ..train import Checkpoint, restore
    from .scene import load_scene

    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt = Checkpoint.load(args.checkpoint)
    return ckpt, restore(ckpt), load_scene(args.scene)


def _novel_poses(scene, args):
    from .scene import Frame, bent_finger_pose

    if args.poses:
        return Frame.from_dict(_read_json(args.poses)).poses
    base = scene.frames[0].poses
    return {s: bent_finger_pose(p, args.finger, args.bend) for s, p in base.items()}


def cmd_render(args):
    from ..render import render_image
    from ..train import scene_state
    from .formats import save_pfm, save_png

    _setup(args)
    ckpt, model, scene = _load(args)
    frame = scene.frame(args.frame)
    cam = scene.camera(args.camera)
    img = render_image(scene_state(model, scene, frame.poses, frame.frame_id, ckpt.config.n_samples), cam)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"f{frame.frame_id:03d}_{cam.name}"
    save_png(out / f"{stem}_color.png", img.color)
    save_pfm(out / f"{stem}_depth.pfm", np.where(img.weight_sum > 0.5, img.depth, np.inf))
    np.save(out / f"{stem}_feature.npy", img.feature.astype(np.float32))
    print(json.dumps({"color": str(out / f"{stem}_color.png"), "failed_pixels": len(img.failed)}, sort_keys=True))


def cmd_adapt(args):
    from ..train import AdaptConfig, pose_adapt
    from .report import write_log

    _setup(args)
    ckpt, _, scene = _load(args)
    poses = _novel_poses(scene, args)
    d = _read_json(args.config) if args.config else {}
    d.setdefault("seed", args.seed)
    if args.iterations is not None:
        d["iterations"] = args.iterations
    config = AdaptConfig.from_dict(d)
    names = _str_list(args.views)
    cams = [scene.camera(n) for n in names] if names else scene.split("train")
    adapted, log = pose_adapt(ckpt, scene, poses, cams, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    adapted.save(out / "adapted.hfck")
    write_log(out / "adapt_log.jsonl", log)
    (out / "poses.json").write_text(json.dumps({"id": -1, "poses": {s: p.to_dict() for s, p in poses.items()}}))
    print(json.dumps({"checkpoint": str(out / "adapted.hfck"), "final": log[-1] if log else None}, sort_keys=True))


def cmd_eval(args):
    from ..evaluate import evaluate
    from .report import write_eval_outputs
    from .scene import Frame, render_views

    _setup(args)
    ckpt, model, scene = _load(args)
    names = _str_list(args.views)
    cams = [scene.camera(n) for n in names] if names else scene.split(args.split)
    if not cams:
        raise UsageError(f"no cameras in split {args.split!r}")
    if args.poses or args.novel_pose:
        poses = _novel_poses(scene, args)
        frame = Frame(-1, poses)
        views = render_views(scene, [frame], cams, with_occlusion=False)
        mode = "novel-pose-adapt" if ckpt.meta.get("adapted_steps") else "novel-pose-generalize"
        report, rendered = evaluate(model, scene, [frame], cams, mode, views)
    else:
        ids = _int_list(args.frames)
        frames = [scene.frame(i) for i in ids] if ids else scene.frames
        views = scene.views
        report, rendered = evaluate(model, scene, frames, cams, "novel-view")
    paths = write_eval_outputs(args.out, report, rendered, views)
    print(report.table())
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True))


def cmd_extract_features(args):
    from .features import extract_teacher_features, save_features
    from .formats import load_feature_map
    from .scene import load_scene

    scene = load_scene(args.scene)
    raw = None
    if args.teacher == "external":
        if not args.raw:
            raise UsageError("--raw DIR is required for the external teacher")
        names = {i: n for n, i in _camera_ids(scene).items()}
        raw = {}
        for p in sorted(Path(args.raw).glob("*.hffm")):
            fm = load_feature_map(p)
            raw[(fm.frame_id, names[fm.camera_id])] = fm.data
    fs = extract_teacher_features(scene, args.dim, args.teacher, raw, args.seed)
    save_features(fs, args.out, _camera_ids(scene))
    print(json.dumps({"maps": len(fs.maps), "dim": fs.basis.dim, "out": str(args.out)}, sort_keys=True))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--single-thread", action="store_true")
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None, help="JSON configuration file")

    p = _Parser(prog="handfield", description="Articulated two-hand radiance fields on synthetic scenes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", parents=[common], help="synthesize a multi-view hand dataset")
    g.add_argument("--frames", type=int, default=None, help="number of frames")
    g.add_argument("--views", type=int, default=None, help="number of training views")
    g.add_argument("--hands", choices=["left", "right", "both"], default=None)
    g.add_argument("--family", choices=["wave", "interlock"], default=None)

    t = sub.add_parser("train", parents=[common], help="fit a model to a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--features", default=None, help="directory of teacher feature maps")

    def with_ckpt(sp):
        sp.add_argument("--scene", required=True)
        sp.add_argument("--checkpoint", required=True)

    def with_pose(sp):
        sp.add_argument("--poses", default=None, help="JSON file with one novel pose per hand")
        sp.add_argument("--finger", default="index")
        sp.add_argument("--bend", type=float, default=1.1)

    r = sub.add_parser("render", parents=[common], help="render one view of a frame")
    with_ckpt(r)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--camera", default="test0")

    a = sub.add_parser("adapt", parents=[common], help="fine-tune the deformation corrector on novel poses")
    with_ckpt(a)
    with_pose(a)
    a.add_argument("--iterations", type=int, default=None)
    a.add_argument("--views", default=None, help="comma-separated camera names (default: training cameras)")

    e = sub.add_parser("eval", parents=[common], help="score renders against ground truth")
    with_ckpt(e)
    with_pose(e)
    e.add_argument("--split", default="test")
    e.add_argument("--views", default=None, help="comma-separated camera names")
    e.add_argument("--frames", default=None, help="comma-separated frame ids")
    e.add_argument("--novel-pose", action="store_true", help="evaluate on a bent-finger pose of frame 0")

    x = sub.add_parser("extract-features", parents=[common], help="teacher features with normalize + PCA")
    x.add_argument("--scene", required=True)
    x.add_argument("--dim", type=int, default=16)
    x.add_argument("--teacher", choices=["toy", "external"], default="toy")
    x.add_argument("--raw", default=None, help="directory of raw external feature maps")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "render": cmd_render,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "extract-features": cmd_extract_features,
}


def main(argv=None) -> int:
    from .formats import FormatError

    try:
        args = build_parser().parse_args(argv)
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = 0
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _emit_error(EXIT_USAGE, "UsageError", str(exc))
    except FileNotFoundError as exc:
        return _emit_error(EXIT_MISSING, "FileNotFoundError", str(exc))
    except FormatError as exc:
        return _emit_error(EXIT_FORMAT, type(exc).__name__, str(exc))
    except (ValueError, KeyError, FloatingPointError) as exc:
        return _emit_error(EXIT_OTHER, type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
