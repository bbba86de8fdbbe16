"""Image loading, resizing and the stratified train/validation/test split."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, IngestError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
CLASS_DIRS = {"yes": 1, "no": 0}


@dataclass
class ImageSample:
    pixels: np.ndarray  # [3, H, W] in [0, 1]
    label: int  # 1 = Tumor, 0 = No-Tumor
    source_path: str


@dataclass
class DatasetSplit:
    train: List[ImageSample]
    validation: List[ImageSample]
    test: List[ImageSample]
    seed: int = 0

    def part(self, name: str) -> List[ImageSample]:
        aliases = {"train": self.train, "val": self.validation, "validation": self.validation, "test": self.test}
        if name not in aliases:
            raise ContractError(f"unknown split part {name!r}")
        return aliases[name]

    def manifest(self) -> Dict[str, object]:
        return {
            "seed": self.seed,
            "train": [s.source_path for s in self.train],
            "validation": [s.source_path for s in self.validation],
            "test": [s.source_path for s in self.test],
        }


def worker_count() -> int:
    env = os.environ.get("XAI_KIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def load_image(path) -> np.ndarray:
    """Decode a PNG/JPEG into a float32 [3, H, W] array scaled by 1/255.

    Grayscale sources are replicated across the three channels.
    """
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestError(f"cannot decode image {path}: {exc}") from exc
    return (rgb / 255.0).transpose(2, 0, 1).copy()


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: s = (d + 0.5) * in/out - 0.5, clamped to [0, in-1]
    s = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    lo = np.floor(s).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = s - lo
    return lo, hi, frac


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] (or [H, W]) array with half-pixel centres."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"target size must be positive, got {out_h}x{out_w}")
    arr = np.asarray(pixels)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ContractError(f"expected [C, H, W] input, got shape {arr.shape}")
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    _, h, w = arr.shape
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    fy = fy.astype(dtype)[None, :, None]
    fx = fx.astype(dtype)[None, None, :]
    a = arr.astype(dtype, copy=False)
    top = a[:, y0][:, :, x0] * (1 - fx) + a[:, y0][:, :, x1] * fx
    bottom = a[:, y1][:, :, x0] * (1 - fx) + a[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out[0] if squeeze else out


def list_dataset(root) -> List[Tuple[str, int]]:
    """(path, label) pairs from ``<root>/yes`` and ``<root>/no``, sorted by path."""
    root = Path(root)
    entries: List[Tuple[str, int]] = []
    for dirname, label in CLASS_DIRS.items():
        d = root / dirname
        if not d.is_dir():
            raise IngestError(f"dataset root {root} lacks a '{dirname}' directory")
        for p in sorted(d.iterdir()):
            if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
                entries.append((str(p), label))
    if not entries:
        raise IngestError(f"no images found under {root}")
    return entries


def load_dataset(root, size: Tuple[int, int] = (224, 224)) -> List[ImageSample]:
    """Load and resize every image under ``root`` (layout ``yes/``, ``no/``)."""
    entries = list_dataset(root)

    def load(entry):
        path, label = entry
        pixels = load_image(path)
        if pixels.shape[1:] != tuple(size):
            pixels = resize_bilinear(pixels, *size)
        return ImageSample(pixels.astype(np.float32), label, path)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(load, entries))


def _round_half_down(x: Fraction) -> int:
    return math.ceil(x - Fraction(1, 2))


def split_counts(n: int, ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> Tuple[int, int, int]:
    """Floor for train, round-half-down for validation, remainder for test."""
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    n_train = math.floor(fr[0] * n)
    n_val = min(_round_half_down(fr[1] * n), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples: Iterable, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Stratified, seeded split applied independently to each class.

    ``samples`` are anything carrying ``label`` and ``source_path`` attributes.
    Within a class, samples are ordered by source path before the seeded
    shuffle so the result does not depend on input order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must be three nonnegative values summing to 1, got {ratios}")
    by_class: Dict[int, list] = {}
    for s in samples:
        by_class.setdefault(int(s.label), []).append(s)
    if not by_class:
        raise ContractError("cannot split an empty sample set")
    train, val, test = [], [], []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda s: s.source_path)
        rng = np.random.default_rng([seed, label])
        order = rng.permutation(len(group))
        n_train, n_val, _ = split_counts(len(group), ratios)
        shuffled = [group[i] for i in order]
        train += shuffled[:n_train]
        val += shuffled[n_train:n_train + n_val]
        test += shuffled[n_train + n_val:]
    return DatasetSplit(train, val, test, seed)


def split_from_manifest(samples: Iterable, manifest: Dict[str, object]) -> DatasetSplit:
    by_path = {s.source_path: s for s in samples}
    try:
        parts = [[by_path[p] for p in manifest[k]] for k in ("train", "validation", "test")]
    except KeyError as exc:
        raise IngestError(f"split manifest refers to a missing sample: {exc}") from exc
    return DatasetSplit(*parts, seed=int(manifest.get("seed", 0)))


def write_split_manifest(split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(split.manifest(), indent=2))


def read_split_manifest(path) -> Dict[str, object]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"cannot read split manifest {path}: {exc}") from exc
