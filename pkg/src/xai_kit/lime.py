"""Local surrogate explanations over superpixels.

Pipeline: segment the image into superpixels, switch random subsets of them
off, query the black box on each perturbed image, and fit a locally weighted
ridge regression whose coefficients rank the regions.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .cam import grayscale
from .errors import ContractError, SolverError


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # [H, W] ints in [0, count)
    count: int


@dataclass
class LimeConfig:
    num_regions: int = 50
    num_samples: int = 1000
    kernel_width: Optional[float] = None  # None: 0.25 * sqrt(region count)
    ridge_lambda: float = 1.0
    top_regions: int = 5
    fill_value: Union[float, str] = 0.0  # a value in [0, 1], or "mean" for the image's gray mean
    seed: int = 0
    batch_size: int = 50

    def __post_init__(self):
        if self.num_regions < 1 or self.num_samples < 1 or self.ridge_lambda < 0 or self.top_regions < 0:
            raise ContractError(f"invalid LIME configuration: {self}")
        if self.kernel_width is not None and self.kernel_width <= 0:
            raise ContractError("kernel width must be positive")
        if self.fill_value != "mean" and not 0.0 <= float(self.fill_value) <= 1.0:
            raise ContractError(f"fill value must lie in [0, 1] or be 'mean', got {self.fill_value}")


@dataclass
class LimeExplanation:
    region_weights: List[Tuple[int, float]]  # sorted by |weight|, descending
    intercept: float
    r2: float
    coefficients: np.ndarray = field(repr=False, default=None)  # indexed by region id
    sample_weights: np.ndarray = field(repr=False, default=None)

    def to_json(self, config: Optional[LimeConfig] = None) -> dict:
        return {
            "regions": [{"id": int(i), "weight": float(w)} for i, w in self.region_weights],
            "intercept": float(self.intercept),
            "r2": float(self.r2),
            "config": asdict(config) if config is not None else None,
        }


# -- segmentation ----------------------------------------------------------

def _grid_shape(h: int, w: int, n: int) -> Tuple[int, int]:
    cols = min(w, n, max(1, math.ceil(math.sqrt(n * w / h))))
    rows = min(h, max(1, round(n / cols)))
    return rows, cols


def _components(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Number every 4-connected component; returns (component grid, kept flags)
    where the largest component of each label is kept (first on ties)."""
    four = ndimage.generate_binary_structure(2, 1)
    comp = np.zeros(labels.shape, dtype=np.int64)
    kept = [False]
    next_id = 1
    for lab, box in enumerate(ndimage.find_objects(labels + 1)):
        if box is None:
            continue
        cc, n = ndimage.label(labels[box] == lab, structure=four)
        sizes = np.bincount(cc.ravel())[1:]
        keep = int(np.argmax(sizes))
        inside = cc > 0
        comp[box][inside] = cc[inside] + (next_id - 1)
        kept += [k == keep for k in range(n)]
        next_id += n
    return comp, np.array(kept)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Give each label a single 4-connected component: stray components are
    merged into the adjacent kept region they share the longest border with."""
    labels = labels.copy()
    while True:
        comp, kept = _components(labels)
        if kept[1:].all():
            return labels
        pairs = np.concatenate([
            np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
            np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
        ])
        pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        pairs = np.concatenate([pairs, pairs[:, ::-1]])
        # orphan -> kept neighbour edges only
        pairs = pairs[~kept[pairs[:, 0]] & kept[pairs[:, 1]]]
        if len(pairs) == 0:
            return labels
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        # best neighbour per orphan: most shared edges, then lowest component id
        order = np.lexsort((uniq[:, 1], -counts, uniq[:, 0]))
        uniq = uniq[order]
        first = np.r_[True, uniq[1:, 0] != uniq[:-1, 0]]
        target = np.arange(len(kept))
        target[uniq[first, 0]] = uniq[first, 1]
        comp_label = np.zeros(len(kept), dtype=labels.dtype)
        comp_label[comp.ravel()] = labels.ravel()
        labels = comp_label[target[comp]]


def segment_superpixels(image: np.ndarray, num_regions: int, seed: int = 0,
                        intensity_weight: float = 10.0, iterations: int = 10) -> SuperpixelMap:
    """Grid-seeded local k-means over (weighted intensity, y, x).

    Starts from a rows x cols grid with about ``num_regions`` cells, runs
    ``iterations`` rounds of assignment restricted to a two-cell window
    around each centre, then enforces 4-connectivity and relabels regions
    as 0..R-1. The procedure has no random component; ``seed`` is accepted
    so every explanation step shares one signature.
    """
    gray = grayscale(image)
    if gray.ndim != 2 or gray.size == 0:
        raise ContractError(f"cannot segment an image of shape {np.shape(image)}")
    h, w = gray.shape
    if not 1 <= num_regions <= h * w:
        raise ContractError(f"num_regions must lie in [1, {h * w}], got {num_regions}")
    rows, cols = _grid_shape(h, w, num_regions)
    sy, sx = h / rows, w / cols
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid_r = np.floor((yy + 0.5) * rows / h).astype(np.int64)
    grid_c = np.floor((xx + 0.5) * cols / w).astype(np.int64)
    labels = (grid_r * cols + grid_c).ravel()

    feat = np.stack([gray.ravel() * intensity_weight, yy.ravel() / sy, xx.ravel() / sx], axis=1)
    k = rows * cols
    centers = np.zeros((k, 3))
    for _ in range(iterations + 1):
        counts = np.bincount(labels, minlength=k)
        for d in range(3):
            sums = np.bincount(labels, weights=feat[:, d], minlength=k)
            centers[:, d] = np.where(counts > 0, sums / np.maximum(counts, 1), centers[:, d])
        if _ == iterations:
            break
        dist = ((feat[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        outside = (np.abs(feat[:, None, 1] - centers[None, :, 1]) > 2) | (np.abs(feat[:, None, 2] - centers[None, :, 2]) > 2)
        outside |= (counts == 0)[None, :]
        windowed = np.where(outside, np.inf, dist)
        no_candidate = np.isinf(windowed).all(axis=1)
        windowed[no_candidate] = dist[no_candidate]
        new = windowed.argmin(axis=1)
        if np.array_equal(new, labels):
            break
        labels = new

    labels = _enforce_connectivity(labels.reshape(h, w))
    _, dense = np.unique(labels, return_inverse=True)
    dense = dense.reshape(h, w)
    return SuperpixelMap(dense, int(dense.max()) + 1)


# -- perturbation and surrogate -------------------------------------------

def apply_mask(image: np.ndarray, spmap: SuperpixelMap, mask: Sequence[int], fill_value: float = 0.0) -> np.ndarray:
    """Replace every pixel of a switched-off region (mask 0) by ``fill_value``."""
    mask = np.asarray(mask)
    if mask.shape != (spmap.count,):
        raise ContractError(f"mask has length {mask.size}, expected {spmap.count}")
    keep = mask.astype(bool)[spmap.labels]
    image = np.asarray(image)
    return np.where(keep, image, np.asarray(fill_value, dtype=image.dtype)).astype(image.dtype)


def mask_distances(masks: np.ndarray) -> np.ndarray:
    """Cosine distance between each binary mask and the all-ones mask."""
    z = np.asarray(masks, dtype=np.float64)
    on = z.sum(axis=1)
    norm = np.sqrt(np.sum(z * z, axis=1)) * math.sqrt(z.shape[1])
    cos = np.divide(on, norm, out=np.zeros_like(on), where=norm > 0)
    return 1.0 - cos


def fit_surrogate(masks, responses, distances, kernel_width: float, ridge_lambda: float) -> LimeExplanation:
    """Weighted ridge regression of responses on mask bits.

    Sample weights are ``exp(-d^2 / kernel_width^2)``; the intercept is an
    extra, unpenalised column.
    """
    z = np.asarray(masks, dtype=np.float64)
    y = np.asarray(responses, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1 or y.shape != (z.shape[0],) or d.shape != y.shape:
        raise ContractError(f"inconsistent surrogate inputs: masks {z.shape}, responses {y.shape}, distances {d.shape}")
    if kernel_width <= 0 or ridge_lambda < 0:
        raise ContractError("kernel width must be positive and ridge lambda nonnegative")
    s, r = z.shape
    pi = np.exp(-(d ** 2) / kernel_width ** 2)
    x = np.hstack([np.ones((s, 1)), z])
    xtw = x.T * pi
    a = xtw @ x
    a[1:, 1:] += ridge_lambda * np.eye(r)
    b = xtw @ y
    rank = np.linalg.matrix_rank(a)
    if rank < r + 1:
        raise SolverError(f"normal equations are rank deficient: rank {rank} < {r + 1} (defect {r + 1 - rank})")
    beta = np.linalg.solve(a, b)

    fitted = x @ beta
    y_bar = np.sum(pi * y) / np.sum(pi)
    ss_res = float(np.sum(pi * (y - fitted) ** 2))
    ss_tot = float(np.sum(pi * (y - y_bar) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    coef = beta[1:]
    order = sorted(range(r), key=lambda i: (-abs(coef[i]), i))
    return LimeExplanation([(i, float(coef[i])) for i in order], float(beta[0]), r2, coef, pi)


def sample_masks(num_samples: int, num_regions: int, seed: int) -> np.ndarray:
    """Bernoulli(0.5) masks; row 0 is always the all-ones mask."""
    z = np.random.default_rng(seed).integers(0, 2, size=(num_samples, num_regions))
    z[0] = 1
    return z


def explain_lime(model, image: np.ndarray, class_index: int, config: LimeConfig = LimeConfig()
                 ) -> Tuple[LimeExplanation, SuperpixelMap]:
    """Explain ``model.predict_proba``'s class probability around ``image``."""
    image = np.asarray(image)
    spmap = segment_superpixels(image, config.num_regions, config.seed)
    z = sample_masks(config.num_samples, spmap.count, config.seed)
    fill = float(grayscale(image).mean()) if config.fill_value == "mean" else float(config.fill_value)
    responses = np.empty(len(z))
    for start in range(0, len(z), config.batch_size):
        chunk = z[start:start + config.batch_size]
        batch = np.stack([apply_mask(image, spmap, m, fill) for m in chunk])
        responses[start:start + len(chunk)] = np.asarray(model.predict_proba(batch))[:, class_index]
    width = config.kernel_width if config.kernel_width is not None else 0.25 * math.sqrt(spmap.count)
    return fit_surrogate(z, responses, mask_distances(z), width, config.ridge_lambda), spmap


def _rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return np.repeat(img[..., None], 3, axis=-1)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    return img.transpose(1, 2, 0).copy()


def render_lime_overlay(image: np.ndarray, spmap: SuperpixelMap, explanation: LimeExplanation,
                        top_regions: int = 5, alpha: float = 0.5) -> np.ndarray:
    """Tint the ``top_regions`` strongest regions green (positive) or red
    (negative) and outline them; returns [H, W, 3] in [0, 1]."""
    if top_regions > spmap.count:
        raise ContractError(f"top_regions {top_regions} exceeds region count {spmap.count}")
    out = _rgb(image)
    four = ndimage.generate_binary_structure(2, 1)
    for region, weight in explanation.region_weights[:top_regions]:
        if weight == 0:
            continue
        color = np.array([0.0, 1.0, 0.0]) if weight > 0 else np.array([1.0, 0.0, 0.0])
        inside = spmap.labels == region
        out[inside] = (1 - alpha) * out[inside] + alpha * color
        edge = inside & ~ndimage.binary_erosion(inside, structure=four, border_value=1)
        out[edge] = color
    return out
