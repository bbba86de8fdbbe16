"""Gradient-based explanations: saliency, SmoothGrad, class-model synthesis,
Grad-CAM, Grad-CAM++, Score-CAM and Faster Score-CAM, plus heatmap overlays.

Every method works against any object exposing the small model surface used
by :class:`~xai_kit.model.CnnModel`:

* ``forward_graph(batch)`` returning ``input``, ``activations``, ``logits``
  nodes (gradient methods only),
* ``predict_proba(batch)`` and ``feature_maps(batch, layer)`` (Score-CAM only),
* ``conv_layers`` and ``num_classes``.

Class scores for gradients are pre-softmax logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import resize_bilinear
from .errors import ContractError


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    method: str
    target_class: int
    layer: Optional[str] = None
    raw_min: float = 0.0
    raw_max: float = 0.0


@dataclass
class CamConfig:
    layer: Optional[str] = None  # None: last conv layer
    smoothgrad_samples: int = 25
    smoothgrad_sigma_fraction: float = 0.15
    scorecam_top_k: int = 10
    classmodel_steps: int = 200
    classmodel_lambda: float = 0.01
    classmodel_step_size: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.smoothgrad_samples < 1 or self.smoothgrad_sigma_fraction < 0 or self.scorecam_top_k < 1:
            raise ContractError(f"invalid CAM configuration: {self}")
        if self.classmodel_steps < 0 or self.classmodel_lambda < 0 or self.classmodel_step_size <= 0:
            raise ContractError(f"invalid class-model configuration: {self}")


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def _heatmap(raw: np.ndarray, method: str, c: int, layer=None, raw_for_stats=None) -> Heatmap:
    stats = raw if raw_for_stats is None else raw_for_stats
    return Heatmap(normalize_map(raw), method, c, layer, float(np.min(stats)), float(np.max(stats)))


def _check_class(model, class_index: int) -> int:
    if not 0 <= int(class_index) < model.num_classes:
        raise ContractError(f"class index {class_index} outside [0, {model.num_classes})")
    return int(class_index)


def _resolve_layer(model, layer: Optional[str]) -> str:
    layers = list(model.conv_layers)
    if layer is None:
        return layers[-1]
    if layer not in layers:
        raise ContractError(f"unknown layer {layer!r}; choose from {layers}")
    return layer


def _score(out, class_index: int) -> T.Node:
    return T.take(T.take(out.logits, 0, axis=0), class_index, axis=0)


def input_gradient(model, image: np.ndarray, class_index: int) -> np.ndarray:
    """d logit_c / d image for a single [C, H, W] image."""
    out = model.forward_graph(np.asarray(image)[None])
    T.backward(_score(out, class_index))
    return out.input.grad[0]


def _saliency_raw(model, image, class_index) -> np.ndarray:
    return np.abs(input_gradient(model, image, class_index)).max(axis=0)


def vanilla_saliency(model, image: np.ndarray, class_index: int) -> Heatmap:
    """Per-pixel max over channels of |d logit_c / d input|."""
    c = _check_class(model, class_index)
    return _heatmap(_saliency_raw(model, image, c), "saliency", c)


def smoothgrad(model, image: np.ndarray, class_index: int, config: CamConfig = CamConfig()) -> Heatmap:
    """Saliency averaged over Gaussian-perturbed copies of the image.

    Noise std is ``sigma_fraction * (max(image) - min(image))``; sample ``i``
    draws from a generator seeded with ``(seed, i)``. Raw maps are averaged
    and the mean is normalised once.
    """
    c = _check_class(model, class_index)
    image = np.asarray(image)
    sigma = config.smoothgrad_sigma_fraction * float(image.max() - image.min())
    mean = None
    for i in range(config.smoothgrad_samples):
        noise = np.random.default_rng([config.seed, i]).standard_normal(image.shape)
        noisy = (image + sigma * noise).astype(image.dtype)
        raw = _saliency_raw(model, noisy, c)
        # running mean: exact when every sample map is identical
        mean = raw.astype(np.float64) if mean is None else mean + (raw - mean) / (i + 1)
    return _heatmap(mean, "smoothgrad", c)


@dataclass
class ClassModelResult:
    image: np.ndarray  # clipped to [0, 1] for display
    raw: np.ndarray
    objective: List[float] = field(default_factory=list)


def regularized_ascent(score_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]], shape,
                       steps: int, lam: float, step_size: float, dtype=np.float64) -> ClassModelResult:
    """Maximise ``S(I) - lam * ||I||^2`` from the zero image.

    Each step takes a gradient step on ``S`` followed by the exact proximal
    step of the L2 penalty, ``I <- (I + h * dS) / (1 + 2 * h * lam)``, which
    stays stable for any ``lam``.
    """
    img = np.zeros(shape, dtype=dtype)
    trace = []
    for k in range(steps + 1):
        s, g = score_and_grad(img)
        trace.append(s - lam * float(np.sum(img.astype(np.float64) ** 2)))
        if k == steps:
            break
        img = ((img + step_size * g) / (1.0 + 2.0 * step_size * lam)).astype(dtype)
    return ClassModelResult(np.clip(img, 0.0, 1.0), img, trace)


def class_model_visualization(model, class_index: int, config: CamConfig = CamConfig(),
                              shape: Optional[Tuple[int, int, int]] = None) -> ClassModelResult:
    """Synthesise an input that scores highly for ``class_index``."""
    c = _check_class(model, class_index)
    if shape is None:
        cfg = model.config
        shape = (cfg.input_channels, cfg.input_height, cfg.input_width)

    def score_and_grad(img):
        out = model.forward_graph(img[None])
        score = _score(out, c)
        T.backward(score)
        return float(score.value), out.input.grad[0]

    return regularized_ascent(score_and_grad, shape, config.classmodel_steps, config.classmodel_lambda,
                              config.classmodel_step_size)


# -- CAM family ------------------------------------------------------------

def layer_gradients(model, image: np.ndarray, class_index: int, layer: str) -> Tuple[np.ndarray, np.ndarray]:
    """(activations, d logit_c / d activations), each [C, h, w]."""
    out = model.forward_graph(np.asarray(image)[None])
    act = out.activations[layer]
    T.backward(_score(out, class_index))
    return act.value[0], act.grad[0]


def gradcam_map(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_i alpha_i A_i) with alpha_i the spatial mean of the gradient."""
    alpha = grads.astype(np.float64).mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, acts.astype(np.float64), axes=1), 0.0)


def gradcam_pp_weights(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Per-position weights g^2 / (2 g^2 + sum(A) g^3); zero where the denominator vanishes."""
    g = grads.astype(np.float64)
    g2, g3 = g ** 2, g ** 3
    total = acts.astype(np.float64).sum(axis=(1, 2), keepdims=True)
    denom = 2.0 * g2 + total * g3
    safe = np.where(denom != 0, denom, 1.0)
    return np.where(denom != 0, g2 / safe, 0.0)


def gradcam_pp_map(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    w = gradcam_pp_weights(acts, grads)
    alpha = (w * np.maximum(grads.astype(np.float64), 0.0)).sum(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, acts.astype(np.float64), axes=1), 0.0)


def _upsample(raw: np.ndarray, image: np.ndarray) -> np.ndarray:
    h, w = np.asarray(image).shape[-2:]
    return resize_bilinear(raw, h, w)


def grad_cam(model, image: np.ndarray, class_index: int, layer: Optional[str] = None) -> Heatmap:
    c = _check_class(model, class_index)
    layer = _resolve_layer(model, layer)
    raw = gradcam_map(*layer_gradients(model, image, c, layer))
    return _heatmap(_upsample(raw, image), "grad-cam", c, layer, raw)


def grad_cam_pp(model, image: np.ndarray, class_index: int, layer: Optional[str] = None) -> Heatmap:
    c = _check_class(model, class_index)
    layer = _resolve_layer(model, layer)
    raw = gradcam_pp_map(*layer_gradients(model, image, c, layer))
    return _heatmap(_upsample(raw, image), "grad-cam++", c, layer, raw)


def channel_increase_of_confidence(model, image: np.ndarray, upsampled: np.ndarray, class_index: int,
                                   batch_size: int = 16) -> np.ndarray:
    """p_c(image * norm(A_i)) - p_c(zero image) for each upsampled map A_i.

    The zero baseline is evaluated in the same batch as the first masks.
    """
    image = np.asarray(image)
    masks = np.stack([normalize_map(a) for a in upsampled]).astype(image.dtype)
    masked = image[None] * masks[:, None]
    batch = np.concatenate([np.zeros_like(image)[None], masked])
    probs = np.concatenate([model.predict_proba(batch[i:i + batch_size])[:, class_index]
                            for i in range(0, len(batch), batch_size)])
    return probs[1:].astype(np.float64) - float(probs[0])


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def score_cam(model, image: np.ndarray, class_index: int, layer: Optional[str] = None,
              channels: Optional[Sequence[int]] = None) -> Heatmap:
    """Gradient-free CAM weighting channels by softmax of their confidence gain.

    ``channels`` restricts the computation to a subset (kept in index order).
    Only ``feature_maps`` and ``predict_proba`` are called on the model.
    """
    c = _check_class(model, class_index)
    layer = _resolve_layer(model, layer)
    acts = np.asarray(model.feature_maps(np.asarray(image)[None], layer))[0].astype(np.float64)
    idx = list(range(acts.shape[0])) if channels is None else sorted(int(i) for i in channels)
    upsampled = np.stack([_upsample(acts[i], image) for i in idx])
    weights = _softmax(channel_increase_of_confidence(model, image, upsampled, c))
    raw = np.maximum(np.tensordot(weights, upsampled, axes=1), 0.0)
    method = "score-cam" if channels is None else "faster-score-cam"
    return _heatmap(raw, method, c, layer)


def top_variance_channels(acts: np.ndarray, top_k: int) -> List[int]:
    """Indices of the ``top_k`` channels with the largest spatial variance
    (stable order on ties), returned sorted by index."""
    if not 1 <= top_k <= acts.shape[0]:
        raise ContractError(f"top-k must lie in [1, {acts.shape[0]}], got {top_k}")
    var = acts.reshape(acts.shape[0], -1).astype(np.float64).var(axis=1)
    order = np.argsort(-var, kind="stable")
    return sorted(int(i) for i in order[:top_k])


def faster_score_cam(model, image: np.ndarray, class_index: int, layer: Optional[str] = None,
                     top_k: int = 10) -> Heatmap:
    c = _check_class(model, class_index)
    layer = _resolve_layer(model, layer)
    acts = np.asarray(model.feature_maps(np.asarray(image)[None], layer))[0]
    hm = score_cam(model, image, c, layer, channels=top_variance_channels(acts, top_k))
    hm.method = "faster-score-cam"
    return hm


# -- rendering -------------------------------------------------------------

COLORMAP_ANCHORS = np.array([
    [0.0, 0.0, 1.0],  # blue
    [0.0, 1.0, 1.0],  # cyan
    [0.0, 1.0, 0.0],  # green
    [1.0, 1.0, 0.0],  # yellow
    [1.0, 0.0, 0.0],  # red
])


def colormap(values: np.ndarray) -> np.ndarray:
    """Piecewise-linear blue-cyan-green-yellow-red map of [0, 1] values to RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * (len(COLORMAP_ANCHORS) - 1)
    lo = np.minimum(np.floor(v).astype(int), len(COLORMAP_ANCHORS) - 2)
    frac = (v - lo)[..., None]
    return COLORMAP_ANCHORS[lo] * (1 - frac) + COLORMAP_ANCHORS[lo + 1] * frac


def grayscale(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if np.all(img == img[:1]):
        return img[0]
    return img.mean(axis=0)


def render_overlay(image: np.ndarray, heatmap, alpha: float = 0.5) -> np.ndarray:
    """Blend the colourised heatmap over the grayscale image; returns [H, W, 3] in [0, 1]."""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    gray = grayscale(image)
    if gray.shape != values.shape:
        raise ContractError(f"heatmap {values.shape} does not match image {gray.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * np.repeat(gray[..., None], 3, axis=-1) + alpha * colormap(values)
