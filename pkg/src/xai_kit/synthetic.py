"""Synthetic "bright square" images for desk-scale experiments.

Class 1 images contain one bright square on a dark noisy background; class 0
images are background only. Square boxes are returned so localisation can be
scored.
"""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from .data import ImageSample

Box = Tuple[int, int, int, int]  # top, left, bottom (exclusive), right (exclusive)


def square_image(rng: np.random.Generator, size: int = 28, square: int = 8, positive: bool = True,
                 background: float = 0.2, brightness: Tuple[float, float] = (0.8, 1.0)
                 ) -> Tuple[np.ndarray, Optional[Box]]:
    img = rng.uniform(0.0, background, size=(size, size))
    box = None
    if positive:
        top = int(rng.integers(0, size - square + 1))
        left = int(rng.integers(0, size - square + 1))
        img[top:top + square, left:left + square] = rng.uniform(*brightness, size=(square, square))
        box = (top, left, top + square, left + square)
    return np.repeat(img[None].astype(np.float32), 3, axis=0), box


def square_dataset(n_positive: int, n_negative: int, seed: int, size: int = 28, square: int = 8,
                   background: float = 0.2, brightness: Tuple[float, float] = (0.8, 1.0),
                   prefix: str = "sq") -> Tuple[List[ImageSample], List[Optional[Box]]]:
    rng = np.random.default_rng(seed)
    labels = np.array([1] * n_positive + [0] * n_negative)
    rng.shuffle(labels)
    samples, boxes = [], []
    for i, label in enumerate(labels):
        pixels, box = square_image(rng, size, square, bool(label), background, brightness)
        samples.append(ImageSample(pixels, int(label), f"{prefix}-{seed}-{i:05d}"))
        boxes.append(box)
    return samples, boxes


def write_image_dir(root, samples) -> None:
    """Write samples as 8-bit PNGs under ``root/yes`` and ``root/no``."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    for sub in ("yes", "no"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        rgb = np.clip(np.rint(s.pixels.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / ("yes" if s.label == 1 else "no") / f"img{i:05d}.png")
