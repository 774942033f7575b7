"""``headnerf`` command line: dataset generation, training, rendering, evaluation, ablations, selftest.

Exit codes: 0 success, 1 selftest failure, 2 I/O or configuration error,
3 checkpoint incompatible with the dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointFormatError
from .dataset import SPLITS, DatasetConfig, SceneManifest, generate_dataset, quantize
from .model import IncompatibleCheckpoint
from .render import Pose, render_image
from .tensor import ContractError
from .train import (
    PRESETS,
    TrainConfig,
    ablation_suite,
    analytic_renderer,
    evaluate,
    load_model,
    merge_settings,
    model_renderer,
    train,
)

log = logging.getLogger("headnerf")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_INCOMPATIBLE = 0, 1, 2, 3
LOG_ENV = "HEADNERF_LOG"


class ConfigError(Exception):
    """Bad config file, bad flag value or unusable path."""


# -- configuration ------------------------------------------------------------------------


def read_config(path: str | None) -> dict:
    """YAML file with optional ``data:`` and ``train:`` sections."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from exc
    if not isinstance(doc, dict) or not set(doc) <= {"data", "train"}:
        raise ConfigError(f"config file {p} must be a mapping with 'data' and/or 'train' sections")
    return doc


def _check_keys(cls, d: dict, where: str) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def dataset_config(args) -> DatasetConfig:
    settings = dict(read_config(args.config).get("data") or {})
    _check_keys(DatasetConfig, settings, "data")
    for key in ("seed", "n_train", "n_test_seen", "n_test_unseen"):
        if getattr(args, key, None) is not None:
            settings[key] = getattr(args, key)
    if args.size is not None:
        settings["height"] = settings["width"] = args.size
    try:
        return DatasetConfig(**settings)
    except TypeError as exc:
        raise ConfigError(f"bad data settings: {exc}") from exc


TRAIN_FLAGS = ("iterations", "lr", "rays_per_batch", "checkpoint_interval", "num_coarse", "num_fine",
               "no_semantic", "no_expression", "no_reg_losses", "no_displacement", "seed")


def train_config(args, run_dir: Path | None = None) -> TrainConfig:
    """Resolve a TrainConfig: preset, then a stored run.json, then the config file, then flags."""
    settings = merge_settings(TrainConfig().to_dict(), PRESETS[getattr(args, "preset", None) or "full"])
    if run_dir is not None and (run_dir / "run.json").is_file():
        settings = merge_settings(settings, json.loads((run_dir / "run.json").read_text())["config"])
    from_file = read_config(args.config).get("train") or {}
    _check_keys(TrainConfig, from_file, "train")
    settings = merge_settings(settings, from_file)
    for key in TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    try:
        return TrainConfig.from_dict(settings)
    except TypeError as exc:
        raise ConfigError(f"bad train settings: {exc}") from exc


def load_manifest(path: str) -> SceneManifest:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"no dataset manifest in {root}")
    return SceneManifest.load(root)


def out_dir(args) -> Path:
    path = Path(args.out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory is not writable: {path}")
    return path


def _frame(manifest: SceneManifest, ref: str, what: str):
    try:
        n = int(ref.split(":", 1)[1])
        return manifest.frames[n]
    except (ValueError, IndexError):
        raise ConfigError(f"{what}: no frame {ref!r} (dataset has {len(manifest.frames)})") from None


def parse_floats(text: str, count: int, what: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"{what}: expected {count} comma-separated numbers, got {text!r}") from None
    if len(values) != count:
        raise ConfigError(f"{what}: expected {count} values, got {len(values)}")
    return np.array(values)


def parse_pose(text: str, manifest: SceneManifest) -> Pose:
    """``frame:N`` or ``yaw,pitch,roll,tx,ty,tz`` with angles in degrees."""
    if text.startswith("frame:"):
        return _frame(manifest, text, "--pose").pose
    v = parse_floats(text, 6, "--pose")
    return Pose.from_euler(*np.radians(v[:3]), translation=v[3:])


def parse_psi(text: str, manifest: SceneManifest) -> np.ndarray:
    if text.startswith("frame:"):
        return _frame(manifest, text, "--psi").psi.copy()
    return parse_floats(text, manifest.head.expression_dim, "--psi")


# -- subcommands --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = dataset_config(args)
    manifest = generate_dataset(cfg, out_dir(args))
    counts = manifest.counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()), f"-> {args.out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    cfg = train_config(args)
    out = out_dir(args)
    res = train(manifest, cfg, out_dir=out, resume=args.resume)
    if res.log:
        print(f"trained {len(res.log)} steps in {res.seconds:.1f}s; "
              f"photometric {res.log[0]['photometric']:.5f} -> {res.log[-1]['photometric']:.5f}")
    print(f"checkpoint: {res.checkpoint}")
    return EXIT_OK


def _load(args, manifest):
    ckpt = Path(args.checkpoint)
    cfg = train_config(args, ckpt.parent)
    return load_model(ckpt, manifest, cfg), cfg


def cmd_render(args) -> int:
    manifest = load_manifest(args.data)
    pose = parse_pose(args.pose, manifest)
    psi = parse_psi(args.psi, manifest)
    model, cfg = _load(args, manifest)
    # a training frame referenced for both pose and expression keeps its own appearance code
    frame_index = None
    if args.psi == args.pose and args.psi.startswith("frame:"):
        frame = _frame(manifest, args.psi, "--psi")
        if frame.split == "train":
            frame_index = frame.index
    mode = "train" if frame_index is not None else "test"
    fn = model.field_fn(psi, frame_index, mode)
    rgb, _ = render_image(fn, manifest.camera, pose, cfg.render_settings(False), manifest.bound_radius,
                          seed=args.seed or 0)
    path = out_dir(args) / args.name
    Image.fromarray(quantize(rgb)).save(path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.data)
    if args.checkpoint is None:
        renderer = analytic_renderer(manifest)
    else:
        model, cfg = _load(args, manifest)
        renderer = model_renderer(model, manifest, cfg.render_settings(False), seed=args.seed or 0)
    path = out_dir(args) / f"metrics_{args.split}.csv"
    table = evaluate(renderer, manifest, args.split, path)
    mean = table.mean
    print(f"{args.split}: {len(table.rows) - 1} frames, PSNR {mean['psnr']:.3f} dB, SSIM {mean['ssim']:.4f}"
          if not math.isnan(mean["psnr"]) else f"{args.split}: no frames")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest = load_manifest(args.data)
    cfg = train_config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    out = out_dir(args)
    result = ablation_suite(manifest, cfg, seeds=seeds, split=args.split, out_dir=out)
    for row in result.table():
        print(f"{row['variant']:<22} PSNR {row['psnr']:7.3f}  SSIM {row['ssim']:.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    results = selftest.run_checks()
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name} ({r.seconds:.2f}s){': ' + r.detail if r.detail else ''}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="YAML file with 'data:' and/or 'train:' sections; flags win")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=out_required, help="all outputs are written here")
    p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP threads (default: all cores)")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(PRESETS), help="starting configuration (default: full)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rays", dest="rays_per_batch", type=int)
    p.add_argument("--num-coarse", type=int)
    p.add_argument("--num-fine", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    for flag in ("no-semantic", "no-expression", "no-reg-losses", "no-displacement"):
        p.add_argument(f"--{flag}", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="headnerf", description="Train and render expression-driven head radiance fields.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic head dataset")
    _common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test-seen", type=int)
    p.add_argument("--n-test-unseen", type=int)
    p.add_argument("--size", type=int, help="image height and width")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a model to a dataset")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one image for an arbitrary pose and expression")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--psi", required=True, help="comma-separated expression vector or frame:N")
    p.add_argument("--pose", required=True, help="yaw,pitch,roll,tx,ty,tz (degrees) or frame:N")
    p.add_argument("--name", default="render.png", help="output file name inside --out-dir")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("evaluate", help="per-frame PSNR/SSIM on a split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="omit to score the analytic ground truth against itself")
    p.add_argument("--split", choices=SPLITS, default="test_unseen_expr")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the ablation variants and tabulate them")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed or the config seed)")
    p.add_argument("--split", choices=SPLITS, default="test_unseen_expr")
    _training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="closed-form and oracle checks")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = getattr(logging, os.environ.get(LOG_ENV, "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except IncompatibleCheckpoint as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (ConfigError, ContractError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
