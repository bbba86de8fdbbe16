"""Command-line driver: train, evaluate, explain, report.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from . import cam
from .data import (list_dataset, load_dataset, load_image, read_split_manifest, resize_bilinear,
                   split_dataset, split_from_manifest, write_split_manifest)
from .errors import DimensionError, XaiKitError
from .lime import LimeConfig, explain_lime, render_lime_overlay
from .losses import ClassWeights
from .metrics import write_metrics_json, write_roc_csv
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, train

logger = logging.getLogger("xai_kit")

METHODS = ["saliency", "smoothgrad", "grad-cam", "grad-cam++", "score-cam", "faster-score-cam", "lime", "class-model"]


class UsageError(Exception):
    pass


def write_atomic(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path, command: str, argv: Sequence[str], config: dict, seed: int,
                   data_root: Optional[str], artifacts: List[str], started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": json.dumps(config, sort_keys=True),
        "seed": seed,
        "data_root": data_root,
        "artifacts": [str(a) for a in artifacts],
        "wall_time": time.time() - started,
    }
    write_atomic(path, json.dumps(manifest, indent=2))


def _int_list(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _weights(text: str) -> ClassWeights:
    parts = text.split(",")
    try:
        w0, w1 = (float(p) for p in parts)
        # index 0 is the negative class, 1 the positive class
        return ClassWeights(positive=w1, negative=w0)
    except (ValueError, XaiKitError):
        raise argparse.ArgumentTypeError(f"expected two positive weights 'w0,w1', got {text!r}")


def _class_arg(text: str):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a class index, got {text!r}")


def _with_suffix(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


# -- train -----------------------------------------------------------------

def cmd_train(args, argv) -> int:
    started = time.time()
    entries = list_dataset(args.data_dir)
    n_pos = sum(1 for _, label in entries if label == 1)
    n_neg = len(entries) - n_pos
    if args.cost_sensitive is not None:
        cost_sensitive = args.cost_sensitive
        logger.info("class counts %d/%d; branch forced by flag", n_pos, n_neg)
    elif args.weights is not None:
        cost_sensitive = True
        logger.info("class counts %d/%d; explicit weights select the cost-sensitive branch", n_pos, n_neg)
    elif n_pos == n_neg:
        cost_sensitive = False
        logger.info("balanced: %d tumor / %d no-tumor, standard branch", n_pos, n_neg)
    else:
        cost_sensitive = True
        logger.info("imbalanced: %d tumor / %d no-tumor, cost-sensitive branch", n_pos, n_neg)
    if not cost_sensitive and args.weights is not None:
        logger.warning("--weights ignored on the standard branch")

    model_cfg = ModelConfig(args.image_size, args.image_size, 3, args.conv_filters, args.kernel_size,
                            args.dense_units, args.dropout, 2)
    samples = load_dataset(args.data_dir, (args.image_size, args.image_size))
    if args.split_manifest_in:
        split = split_from_manifest(samples, read_split_manifest(args.split_manifest_in))
    else:
        split = split_dataset(samples, seed=args.seed)
    train_cfg = TrainConfig(args.epochs, args.batch_size, args.lr, cost_sensitive,
                            args.weights if cost_sensitive else None, args.seed)
    model, report = train(build_model(model_cfg, args.seed), split, train_cfg)

    out = Path(args.out)
    history = Path(args.history) if args.history else _with_suffix(out, ".history.csv")
    split_path = Path(args.split_manifest) if args.split_manifest else _with_suffix(out, ".split.json")
    manifest_path = Path(args.manifest) if args.manifest else _with_suffix(out, ".manifest.json")
    save_checkpoint(model, out)
    report.write_csv(history)
    write_split_manifest(split, split_path)
    artifacts = [out, history, split_path]
    config = {"model": json.loads(model_cfg.to_json()),
              "train": {k: v for k, v in asdict(train_cfg).items() if k != "weights"},
              "weights": asdict(report.class_weights) if report.class_weights else None}
    if args.report:
        summary = {
            "branch": "cost-sensitive" if cost_sensitive else "standard",
            "class_counts": {"tumor": n_pos, "no_tumor": n_neg},
            "class_weights": config["weights"],
            "epochs": report.epochs,
            "train_loss": report.train_loss,
            "train_acc": report.train_accuracy,
            "val_loss": report.val_loss,
            "val_acc": report.val_accuracy,
        }
        Path(args.report).write_text(json.dumps(summary, indent=2))
        artifacts.append(Path(args.report))
    write_manifest(manifest_path, "train", argv, config, args.seed, str(args.data_dir), artifacts, started)
    print(f"trained {report.epochs} epochs; final val_acc {report.val_accuracy[-1] if report.epochs else float('nan'):.4f}")
    return 0


# -- evaluate --------------------------------------------------------------

def cmd_evaluate(args, argv) -> int:
    started = time.time()
    model = load_checkpoint(args.model)
    size = (model.config.input_height, model.config.input_width)
    samples = load_dataset(args.data_dir, size)
    if args.split_manifest:
        split = split_from_manifest(samples, read_split_manifest(args.split_manifest))
    else:
        split = split_dataset(samples, seed=args.seed)
    part = split.part(args.split)
    cm, m, roc = evaluate(model, part, args.threshold)
    out = Path(args.out)
    roc_path = Path(args.roc) if args.roc else _with_suffix(out, ".roc.csv")
    write_metrics_json(out, cm, m, roc, args.threshold)
    write_roc_csv(roc_path, roc)
    for name in m.undefined:
        logger.warning("%s undefined (zero denominator), reported as 0", name)
    print(f"samples {cm.total}")
    for name in ("accuracy", "precision", "recall", "f1", "specificity"):
        print(f"{name} {getattr(m, name):.4f}")
    print(f"auc {roc.auc:.4f}")
    if args.manifest:
        write_manifest(args.manifest, "evaluate", argv, {"split": args.split, "threshold": args.threshold},
                       args.seed, str(args.data_dir), [out, roc_path], started)
    return 0


# -- explain ---------------------------------------------------------------

def _prepare_image(path, model) -> np.ndarray:
    cfg = model.config
    pixels = resize_bilinear(load_image(path), cfg.input_height, cfg.input_width)
    if cfg.input_channels == 1:
        pixels = pixels.mean(axis=0, keepdims=True)
    elif cfg.input_channels != pixels.shape[0]:
        raise DimensionError(f"model expects {cfg.input_channels} channels, image has {pixels.shape[0]}")
    return pixels.astype(model.dtype)


def to_png(rgb: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def _normalized_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return img.transpose(1, 2, 0)


def run_method(method: str, model, image: np.ndarray, c: int, cam_cfg: cam.CamConfig,
               lime_cfg: LimeConfig, alpha: float):
    """Returns (rgb overlay, sidecar details)."""
    layer = cam_cfg.layer
    if method == "lime":
        explanation, spmap = explain_lime(model, image, c, lime_cfg)
        rgb = render_lime_overlay(image, spmap, explanation, min(lime_cfg.top_regions, spmap.count), alpha)
        return rgb, {"lime": explanation.to_json(lime_cfg)}
    if method == "class-model":
        result = cam.class_model_visualization(model, c, cam_cfg)
        return _normalized_rgb(result.image), {"objective": result.objective, "config": asdict(cam_cfg)}
    if method == "saliency":
        hm = cam.vanilla_saliency(model, image, c)
    elif method == "smoothgrad":
        hm = cam.smoothgrad(model, image, c, cam_cfg)
    elif method == "grad-cam":
        hm = cam.grad_cam(model, image, c, layer)
    elif method == "grad-cam++":
        hm = cam.grad_cam_pp(model, image, c, layer)
    elif method == "score-cam":
        hm = cam.score_cam(model, image, c, layer)
    elif method == "faster-score-cam":
        name = layer or model.conv_layers[-1]
        channels = model.feature_maps(image[None], name).shape[1]
        hm = cam.faster_score_cam(model, image, c, layer, min(cam_cfg.scorecam_top_k, channels))
    else:
        raise UsageError(f"unknown method {method!r}")
    return cam.render_overlay(image, hm, alpha), {
        "layer": hm.layer, "raw_min": hm.raw_min, "raw_max": hm.raw_max, "config": asdict(cam_cfg)}


def cmd_explain(args, argv) -> int:
    model = load_checkpoint(args.model)
    image = _prepare_image(args.image, model)
    probs = model.predict_proba(image[None])[0]
    if args.class_index == "auto":
        c = int(np.argmax(probs))  # first maximum, so ties go to the lower index
    else:
        c = args.class_index
        if not 0 <= c < model.num_classes:
            raise DimensionError(f"class {c} outside [0, {model.num_classes})")
    cam_cfg = cam.CamConfig(args.layer, args.samples, args.sigma_fraction, args.top_k, args.steps,
                            args.class_lambda, args.step_size, args.seed)
    fill = args.fill_value if args.fill_value == "mean" else float(args.fill_value)
    lime_cfg = LimeConfig(args.num_regions, args.num_samples, args.kernel_width, args.ridge_lambda,
                          args.top_regions, fill, args.seed)
    methods = METHODS if args.method == "all" else [args.method]
    out = Path(args.out)
    panels = [_normalized_rgb(image) if image.shape[0] == 1 else np.asarray(image, np.float64).transpose(1, 2, 0)]
    for method in methods:
        path = out if len(methods) == 1 else _with_suffix(out, f"-{method}.png")
        rgb, details = run_method(method, model, image, c, cam_cfg, lime_cfg, args.alpha)
        to_png(rgb, path)
        sidecar = {"method": method, "image": str(args.image), "class": c,
                   "class_source": "auto" if args.class_index == "auto" else "explicit",
                   "probabilities": [float(p) for p in probs], **details}
        Path(path).with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
        panels.append(rgb)
        print(f"{method}: class {c} -> {path}")
    if args.panel:
        h = max(p.shape[0] for p in panels)
        padded = [np.pad(p, ((0, h - p.shape[0]), (0, 0), (0, 0)), constant_values=1.0) for p in panels]
        to_png(np.concatenate(padded, axis=1), args.panel)
        print(f"panel -> {args.panel}")
    return 0


# -- report ----------------------------------------------------------------

REPORT_FIELDS = ["accuracy", "precision", "recall", "f1", "specificity", "auc"]


def cmd_report(args, argv) -> int:
    rows = []
    for path in args.inputs:
        try:
            data = json.loads(Path(path).read_text())
            rows.append([Path(path).stem] + [float(data[k]) for k in REPORT_FIELDS])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise XaiKitError(f"malformed metrics file {path}: {exc}") from exc
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + REPORT_FIELDS)
        w.writerows(rows)
    print(f"{len(rows)} rows -> {args.out}")
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xai-kit", description="Brain-tumour MRI classifier with explanations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a CNN on a yes/no image directory")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    cs = p.add_mutually_exclusive_group()
    cs.add_argument("--cost-sensitive", dest="cost_sensitive", action="store_true", default=None)
    cs.add_argument("--no-cost-sensitive", dest="cost_sensitive", action="store_false")
    p.add_argument("--weights", type=_weights, help="class weights w0,w1 (no-tumor, tumor)")
    p.add_argument("--report", help="training summary JSON")
    p.add_argument("--history", help="per-epoch CSV (default: <out>.history.csv)")
    p.add_argument("--split-manifest", help="where to write the split manifest (default: <out>.split.json)")
    p.add_argument("--split-manifest-in", help="replay an existing split manifest")
    p.add_argument("--manifest", help="run manifest (default: <out>.manifest.json)")
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--conv-filters", type=_int_list, default=(32, 64))
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--dense-units", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.25)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split part")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-manifest", help="use a stored split instead of regenerating it")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--roc", help="ROC CSV (default: <out>.roc.csv)")
    p.add_argument("--manifest", help="run manifest path")
    p.set_defaults(func=cmd_evaluate)

    d_cam, d_lime = cam.CamConfig(), LimeConfig()
    p = sub.add_parser("explain", help="explain one prediction")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=METHODS + ["all"], required=True)
    p.add_argument("--class", dest="class_index", type=_class_arg, default="auto")
    p.add_argument("--layer", default=None, help="conv layer (default: last)")
    p.add_argument("--out", required=True, help="overlay PNG")
    p.add_argument("--panel", help="side-by-side PNG of the original and every overlay")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=d_cam.seed)
    p.add_argument("--samples", type=int, default=d_cam.smoothgrad_samples, help="smoothgrad samples")
    p.add_argument("--sigma-fraction", type=float, default=d_cam.smoothgrad_sigma_fraction)
    p.add_argument("--top-k", type=int, default=d_cam.scorecam_top_k, help="faster score-cam channels")
    p.add_argument("--steps", type=int, default=d_cam.classmodel_steps, help="class-model ascent steps")
    p.add_argument("--class-lambda", type=float, default=d_cam.classmodel_lambda)
    p.add_argument("--step-size", type=float, default=d_cam.classmodel_step_size)
    p.add_argument("--num-regions", type=int, default=d_lime.num_regions)
    p.add_argument("--num-samples", type=int, default=d_lime.num_samples)
    p.add_argument("--kernel-width", type=float, default=None)
    p.add_argument("--ridge-lambda", type=float, default=d_lime.ridge_lambda)
    p.add_argument("--top-regions", type=int, default=d_lime.top_regions)
    p.add_argument("--fill-value", default=str(d_lime.fill_value), help="number in [0, 1] or 'mean'")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("report", help="collect metrics JSONs into one CSV")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (XaiKitError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
