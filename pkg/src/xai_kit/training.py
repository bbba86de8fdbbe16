"""Minibatch Adam training (standard or cost-sensitive loss) and evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import DatasetSplit, ImageSample
from .errors import ContractError
from .losses import ClassWeights, compute_class_weights, log_loss, weighted_log_loss
from .metrics import ConfusionMatrix, Metrics, RocCurve, confusion, metrics_from_confusion, roc_auc
from .model import CnnModel

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 7
    batch_size: int = 50
    learning_rate: float = 1e-3
    cost_sensitive: bool = False
    weights: Optional[ClassWeights] = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ContractError(f"invalid training configuration: {self}")


@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    class_weights: Optional[ClassWeights] = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for i in range(self.epochs):
                w.writerow([i + 1, repr(self.train_loss[i]), repr(self.train_accuracy[i]),
                            repr(self.val_loss[i]), repr(self.val_accuracy[i])])


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def stack(samples: Sequence[ImageSample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.pixels for s in samples]).astype(np.float32, copy=False)
    labels = np.array([int(s.label) for s in samples], dtype=np.int64)
    return images, labels


def batch_loss(model: CnnModel, images, labels, weights: Optional[ClassWeights],
               training: bool = True, seed=0, param_nodes=None):
    """Loss node on class-1 probabilities; plain log loss when ``weights`` is None."""
    out = model.forward_graph(images, training=training, seed=seed, param_nodes=param_nodes)
    p_pos = T.take(out.probs, 1, axis=1)
    if weights is None:
        return log_loss(labels, p_pos), out
    return weighted_log_loss(labels, p_pos, weights), out


def train_step(model: CnnModel, optimizer: Adam, images, labels,
               weights: Optional[ClassWeights], dropout_seed) -> Tuple[float, np.ndarray]:
    """One Adam update in place. Returns (loss, class-1 probabilities)."""
    nodes = {k: T.Node(v) for k, v in model.params.items()}
    loss, out = batch_loss(model, images, labels, weights, True, dropout_seed, nodes)
    T.backward(loss)
    optimizer.step(model.params, {k: n.grad for k, n in nodes.items()})
    return float(loss.value), out.probs.value[:, 1]


def predict_scores(model: CnnModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    return model.predict_proba(images, batch_size)[:, 1]


def train(model: CnnModel, split: DatasetSplit, config: TrainConfig) -> Tuple[CnnModel, TrainReport]:
    """Train a copy of ``model``; the input model is left untouched."""
    if not split.train or not split.validation:
        raise ContractError("training needs nonempty train and validation parts")
    model = model.copy()
    x_train, y_train = stack(split.train)
    x_val, y_val = stack(split.validation)

    weights = None
    if config.cost_sensitive:
        weights = config.weights
        if weights is None:
            weights = compute_class_weights(int(np.sum(y_train == 1)), int(np.sum(y_train == 0)))
        logger.info("cost-sensitive loss, weights positive=%.6f negative=%.6f", weights.positive, weights.negative)
    report = TrainReport(class_weights=weights)
    opt = Adam(config.learning_rate)
    step = 0
    n = len(y_train)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, p = train_step(model, opt, x_train[idx], y_train[idx], weights, [config.seed, 7919, step])
            step += 1
            loss_sum += loss * len(idx)
            correct += int(np.sum((p >= 0.5) == (y_train[idx] == 1)))
        val_p = predict_scores(model, x_val)
        report.train_loss.append(loss_sum / n)
        report.train_accuracy.append(correct / n)
        report.val_loss.append(log_loss(y_val, val_p.astype(np.float64)))
        report.val_accuracy.append(float(np.mean((val_p >= 0.5) == (y_val == 1))))
        logger.info("epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch + 1, config.epochs,
                    report.train_loss[-1], report.train_accuracy[-1], report.val_loss[-1], report.val_accuracy[-1])
    return model, report


def evaluate(model: CnnModel, samples: Sequence[ImageSample], threshold: float = 0.5
             ) -> Tuple[ConfusionMatrix, Metrics, RocCurve]:
    if not samples:
        raise ContractError("cannot evaluate on an empty sample set")
    images, labels = stack(samples)
    scores = predict_scores(model, images)
    cm = confusion(labels, scores, threshold)
    return cm, metrics_from_confusion(cm), roc_auc(labels, scores)
