"""Binary cross-entropy, its class-weighted variant, and class weight derivation.

Both losses accept either plain arrays (returning a float) or a graph
:class:`~xai_kit.tensor.Node` of probabilities (returning a scalar node) so the
training loop and the numeric checks share one implementation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError

EPS = 1e-7


@dataclass(frozen=True)
class ClassWeights:
    positive: float  # multiplies the y*log(p) term (label 1, Tumor)
    negative: float  # multiplies the (1-y)*log(1-p) term

    def __post_init__(self):
        for name in ("positive", "negative"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ContractError(f"class weight {name} must be positive and finite, got {v}")


def _prepare(labels, probs):
    y = np.asarray(labels)
    as_float = not isinstance(probs, T.Node)
    p = T.Node(np.asarray(probs, dtype=np.float64)) if as_float else probs
    if y.size == 0:
        raise ContractError("loss of an empty batch is undefined")
    if y.shape != p.shape:
        raise ContractError(f"labels {y.shape} and probabilities {p.shape} differ in shape")
    y = y.astype(p.dtype)
    return y, T.clip(p, EPS, 1.0 - EPS), as_float


def log_loss(labels, probs):
    """Mean of -[y log p + (1 - y) log(1 - p)] with p clamped to [1e-7, 1 - 1e-7]."""
    y, p, as_float = _prepare(labels, probs)
    pos = T.mul(T.log(p), y)
    neg = T.mul(T.log(1.0 - p), 1.0 - y)
    loss = T.mul(T.reduce_mean(T.add(pos, neg)), -1.0)
    return float(loss.value) if as_float else loss


def weighted_log_loss(labels, probs, weights: ClassWeights):
    """Mean of -[w_pos * y log p + w_neg * (1 - y) log(1 - p)]."""
    if not isinstance(weights, ClassWeights):
        weights = ClassWeights(*weights)
    y, p, as_float = _prepare(labels, probs)
    pos = T.mul(T.mul(T.log(p), y), weights.positive)
    neg = T.mul(T.mul(T.log(1.0 - p), 1.0 - y), weights.negative)
    loss = T.mul(T.reduce_mean(T.add(pos, neg)), -1.0)
    return float(loss.value) if as_float else loss


def compute_class_weights(count_positive: int, count_negative: int) -> ClassWeights:
    """Balanced inverse-frequency weights, total / (2 * count_c)."""
    if count_positive < 1 or count_negative < 1:
        raise ContractError(f"both classes need samples, got {count_positive} and {count_negative}")
    total = count_positive + count_negative
    return ClassWeights(total / (2 * count_positive), total / (2 * count_negative))
