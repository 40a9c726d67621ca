"""Command-line driver: synth, train-stage1, train-stage2, render, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write
from .cma import cma_forward, load_cma, save_cma
from .dataio import generate_synthetic, load_dataset, read_cameras, read_image, write_image
from .exceptions import (CheckpointError, DatasetError, ImageDecodeError, InvalidParameterError,
                         SceneFormatError, ShapeError, TrainingError, ValidationError)
from .metrics import evaluate_fused, report
from .optimizer import TrainConfig, train_stage1, train_stage2
from .rasterizer import render, render_fused, set_num_threads
from .scene import Modality, concat_modalities, load_scene, save_scene

log = logging.getLogger("fusesplat")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
INPUT_ERRORS = (DatasetError, ImageDecodeError, SceneFormatError, CheckpointError, ShapeError,
                ValidationError, InvalidParameterError, FileNotFoundError, NotADirectoryError)

SCENE_FILE = "scene.ply"
CMA_FILE = "cma.bin"
_OPTIONAL_TYPES = {"densify_until": int, "init_radius": float}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p, skip=()):
    """One flag per TrainConfig field, defaults taken from the dataclass."""
    defaults = TrainConfig()
    group = p.add_argument_group("training options")
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if isinstance(default, bool):
            group.add_argument(flag, action=argparse.BooleanOptionalAction, default=None,
                               help=f"(default: {default})")
        elif isinstance(default, tuple):
            kind = int if all(isinstance(v, int) for v in default) else float
            group.add_argument(flag, type=kind, nargs=len(default), default=None,
                               metavar=f.name.upper(), help=f"(default: {' '.join(map(str, default))})")
        else:
            kind = _OPTIONAL_TYPES.get(f.name, type(default))
            group.add_argument(flag, type=kind, default=None, help=f"(default: {default})")


def _config_from_args(args, **extra):
    values = {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = tuple(v) if isinstance(v, list) else v
    values.update({k: v for k, v in extra.items() if v is not None})
    return TrainConfig(**values)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fusesplat", description="Multimodal (visible + infrared) Gaussian splatting with fused rendering.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for rendering kernels")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic visible/infrared dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=12)
    p.add_argument("--gaussians", type=int, default=30)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--test-every", type=int, default=4, help="every n-th view goes to the test split (0: none)")
    p.add_argument("--save-ground-truth", action="store_true", help="also write the ground-truth scene PLY")

    p = sub.add_parser("train-stage1", help="reconstruct both modalities")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--iters", type=int, default=None, help="alias for --stage1-iters")
    p.add_argument("--init-scene", type=Path, default=None, help="start from this PLY instead of a random cloud")
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_config_flags(p)

    p = sub.add_parser("train-stage2", help="train the cross-modal adjustment network")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--iters", type=int, default=None, help="alias for --stage2-iters")
    p.add_argument("--init-cma", type=Path, default=None)
    p.add_argument("--checkpoint-every", type=int, default=0)
    _add_config_flags(p)

    p = sub.add_parser("render", help="render fused or per-modality images")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--cma", type=Path, default=None, help="CMA checkpoint (required for fused output)")
    p.add_argument("--out", required=True, type=Path)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="dataset directory; renders the views of --split")
    src.add_argument("--cameras", type=Path, help="cameras manifest with the poses to render")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--modality", choices=("fused", "visible", "infrared"), default="fused")
    p.add_argument("--tau-override", type=float, default=None,
                   help="use this constant opacity scale for every primitive instead of the network")
    p.add_argument("--raw", action="store_true", help="also write unquantized float images as .npy")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))

    p = sub.add_parser("evaluate", help="score fused renders against both sources")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--renders", required=True, type=Path, help="directory produced by 'render'")
    p.add_argument("--out", required=True, type=Path, help="report path prefix or directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--against", choices=("gt", "rendered"), default="gt",
                   help="compare with ground-truth images or with per-modality renders of --scene")
    p.add_argument("--scene", type=Path, default=None, help="scene PLY (needed for --against rendered)")
    p.add_argument("--quantize", action="store_true", help="round all images to 8 bits before scoring")
    p.add_argument("--name", default=None, help="scene name in the report (default: dataset dir name)")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _write_json(path, doc):
    atomic_write(path, (json.dumps(doc, indent=1, allow_nan=False, default=_json_default) + "\n").encode())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _finite(x):
    return x if x is None or np.isfinite(x) else None


def _clean_history(history):
    return [{k: (_finite(v) if isinstance(v, float) else v) for k, v in rec.items()} for rec in history]


def _split(index, name):
    return index.load(None if name == "all" else name)


def _training_split(index):
    data = index.load("train")
    if len(data) == 0:
        raise DatasetError(f"{index.root}: no views in the train split")
    return data


class _RunLog:
    """JSON training log whose ``status`` says whether the outputs are final."""

    def __init__(self, path, command, config, extra=None):
        self.path = path
        self.doc = {"command": command, "status": "running", "config": config.to_dict(), **(extra or {}),
                    "history": []}
        self.t0 = time.time()
        self.flush()

    def flush(self, history=None, **fields_):
        if history is not None:
            self.doc["history"] = _clean_history(history)
        self.doc.update(fields_)
        self.doc["elapsed_seconds"] = time.time() - self.t0
        _write_json(self.path, self.doc)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    index, synth = generate_synthetic(args.seed, n_views=args.views, n_gaussians=args.gaussians, out_dir=args.out,
                                      width=args.width, height=args.height, sh_degree=args.sh_degree,
                                      test_every=args.test_every)
    if args.save_ground_truth:
        save_scene(synth.scene, Path(args.out) / "ground_truth.ply")
        np.save(Path(args.out) / "ground_truth_hot.npy", synth.hot)
    print(f"wrote {len(index)} views to {args.out}")
    return EXIT_OK


def cmd_train_stage1(args):
    index = load_dataset(args.data)
    config = _config_from_args(args, stage1_iters=args.iters)
    init = load_scene(args.init_scene) if args.init_scene else None
    data = _training_split(index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _RunLog(out / "stage1_log.json", "train-stage1", config, {"dataset": str(args.data)})
    history = []

    def checkpoint(it, scene, record):
        history.append(record)
        if args.checkpoint_every and (it + 1) % args.checkpoint_every == 0 and it + 1 < config.stage1_iters:
            save_scene(scene, out / "stage1_checkpoint.ply")
            run.flush(history, status="partial", checkpoint="stage1_checkpoint.ply", checkpoint_iteration=it + 1)

    try:
        result = train_stage1(data, config, scene=init, callback=checkpoint)
    except BaseException as exc:
        run.flush(history, status="failed", error=str(exc))
        raise
    save_scene(result.scene, out / SCENE_FILE)
    run.flush(result.history, status="complete", scene=SCENE_FILE,
              n_visible=result.scene.n_visible, n_infrared=result.scene.n_infrared)
    last = result.history[-1]
    print(f"stage 1 done: loss {last['loss']:.5f}, N={result.scene.n_visible}, M={result.scene.n_infrared}")
    return EXIT_OK


def cmd_train_stage2(args):
    index = load_dataset(args.data)
    config = _config_from_args(args, stage2_iters=args.iters)
    scene = load_scene(args.scene)
    params = load_cma(args.init_cma, d_c=scene.d_c) if args.init_cma else None
    data = _training_split(index)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _RunLog(out / "stage2_log.json", "train-stage2", config,
                  {"dataset": str(args.data), "scene": str(args.scene)})
    history = []

    def checkpoint(it, p, record):
        history.append(record)
        if args.checkpoint_every and (it + 1) % args.checkpoint_every == 0 and it + 1 < config.stage2_iters:
            save_cma(p, out / "cma_checkpoint.bin")
            run.flush(history, status="partial", checkpoint="cma_checkpoint.bin", checkpoint_iteration=it + 1)

    try:
        result = train_stage2(scene, data, config, params=params, callback=checkpoint)
    except BaseException as exc:
        run.flush(history, status="failed", error=str(exc))
        raise
    save_cma(result.params, out / CMA_FILE)
    extra = {}
    if config.joint_finetune:
        save_scene(result.scene, out / SCENE_FILE)
        extra["scene_out"] = SCENE_FILE
    run.flush(result.history, status="complete", cma=CMA_FILE, **extra)
    print(f"stage 2 done: loss {result.history[-1]['loss']:.5f}")
    return EXIT_OK


def _render_views(args):
    if args.data is not None:
        index = load_dataset(args.data, check_images=False)
        views = index.views if args.split == "all" else index.split(args.split)
        return [(v.name, v.camera) for v in views]
    return [(name, cam) for name, cam, split in read_cameras(args.cameras)
            if args.split == "all" or split == args.split]


def cmd_render(args):
    scene = load_scene(args.scene)
    tau = None
    if args.modality == "fused":
        if args.tau_override is not None:
            if not 0.0 <= args.tau_override <= 1.0:
                raise UsageError("--tau-override must lie in [0, 1]")
            tau = np.full(len(scene), float(args.tau_override))
        elif args.cma is not None:
            tau = cma_forward(load_cma(args.cma, d_c=scene.d_c), concat_modalities(scene).sh_flat)
        else:
            raise UsageError("fused rendering needs --cma or --tau-override")
    elif args.tau_override is not None or args.cma is not None:
        raise UsageError("--cma and --tau-override only apply to --modality fused")
    views = _render_views(args)
    if not views:
        raise DatasetError(f"no views in split '{args.split}'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bg = tuple(args.background)
    for name, cam in views:
        if tau is not None:
            img = render_fused(scene, cam, tau, background=bg).image
        else:
            img = render(scene.modality_set(Modality[args.modality.upper()]), cam, background=bg).image
        write_image(out / f"{name}.png", np.clip(img, 0.0, 1.0))
        if args.raw:
            buf = io.BytesIO()
            np.save(buf, img)
            atomic_write(out / f"{name}.npy", buf.getvalue())
    _write_json(out / "render_info.json", {
        "scene": str(args.scene), "cma": str(args.cma) if args.cma else None, "modality": args.modality,
        "tau_override": args.tau_override, "views": [n for n, _ in views], "background": list(bg)})
    print(f"rendered {len(views)} views to {out}")
    return EXIT_OK


def _load_render(directory, name):
    raw = directory / f"{name}.npy"
    if raw.is_file():
        return np.load(raw)
    png_path = directory / f"{name}.png"
    if not png_path.is_file():
        raise DatasetError(f"no render found for view '{name}' in {directory}")
    return read_image(png_path)


def cmd_evaluate(args):
    index = load_dataset(args.data)
    data = _split(index, args.split)
    if len(data) == 0:
        raise DatasetError(f"no views in split '{args.split}'")
    if args.against == "rendered":
        if args.scene is None:
            raise UsageError("--against rendered requires --scene")
        scene = load_scene(args.scene)
    renders = Path(args.renders)
    if not renders.is_dir():
        raise DatasetError(f"render directory not found: {renders}")
    scene_name = args.name or Path(args.data).resolve().name
    scores = []
    for name, cam, V, T in zip(data.names, data.cameras, data.visible, data.infrared):
        F = _load_render(renders, name)
        if args.against == "rendered":
            V = np.clip(render(scene.visible, cam).image, 0.0, 1.0)
            T = np.clip(render(scene.infrared, cam).image, 0.0, 1.0)
        scores.append(evaluate_fused(np.clip(F, 0.0, 1.0), V, T, quantize=args.quantize,
                                     scene=scene_name, view=name))
    json_path, txt_path = report(scores, args.out)
    with open(txt_path) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "render": cmd_render, "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            parser.error("--threads must be at least 1")
        set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fusesplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as exc:
        print(f"fusesplat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, RuntimeError, ValueError) as exc:
        print(f"fusesplat {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
