"""The small convolutional classifier and its checkpoint format."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    BuildError,
    CheckpointError,
    ContractError,
    DimensionError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)

MAGIC = b"CXK1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 224
    input_width: int = 224
    input_channels: int = 3
    conv_filters: Tuple[int, ...] = (32, 64)
    kernel_size: int = 3
    dense_units: int = 256
    dropout_rate: float = 0.25
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))

    def to_json(self) -> str:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))

    def feature_shapes(self) -> List[Tuple[int, int, int]]:
        """(channels, height, width) after each conv+relu stage, before pooling.

        Raises BuildError when a stage would have spatial size below the kernel.
        """
        positive = [self.input_height, self.input_width, self.input_channels, self.kernel_size,
                     self.dense_units, self.num_classes]
        if any(v < 1 for v in positive) or not self.conv_filters or min(self.conv_filters) < 1:
            raise BuildError(f"all sizes must be positive: {self}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise BuildError(f"dropout rate must lie in [0, 1): {self.dropout_rate}")
        h, w = self.input_height, self.input_width
        shapes = []
        for i, f in enumerate(self.conv_filters):
            if h < self.kernel_size or w < self.kernel_size:
                raise BuildError(f"spatial size {h}x{w} below kernel {self.kernel_size} at conv{i + 1}")
            h, w = h - self.kernel_size + 1, w - self.kernel_size + 1
            shapes.append((f, h, w))
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise BuildError(f"pooling after conv{i + 1} leaves no spatial extent")
        return shapes

    def flatten_width(self) -> int:
        c, h, w = self.feature_shapes()[-1]
        return c * (h // 2) * (w // 2)

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        in_c = self.input_channels
        k = self.kernel_size
        for i, f in enumerate(self.conv_filters, start=1):
            shapes[f"conv{i}.weight"] = (f, in_c, k, k)
            shapes[f"conv{i}.bias"] = (f,)
            in_c = f
        flat = self.flatten_width()
        shapes["dense1.weight"] = (flat, self.dense_units)
        shapes["dense1.bias"] = (self.dense_units,)
        shapes["dense2.weight"] = (self.dense_units, self.num_classes)
        shapes["dense2.bias"] = (self.num_classes,)
        return shapes


class GraphOutputs(NamedTuple):
    input: T.Node
    activations: Dict[str, T.Node]
    logits: T.Node
    probs: T.Node


class CnnModel:
    """conv -> relu -> pool (per filter stage) -> dense -> relu -> dropout -> dense -> softmax.

    ``params`` maps names like ``conv1.weight`` to float arrays. Conv stages are
    exposed by name (``conv1``, ``conv2``, ...) as their post-ReLU activations,
    which is what the CAM methods operate on.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]):
        expected = config.parameter_shapes()
        if list(params) != list(expected):
            raise ShapeMismatchError(f"parameter names {list(params)} != {list(expected)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeMismatchError(f"{name}: shape {params[name].shape} != {shape}")
        self.config = config
        self.params = params

    @property
    def conv_layers(self) -> List[str]:
        return [f"conv{i}" for i in range(1, len(self.config.conv_filters) + 1)]

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self):
        return self.params["dense2.bias"].dtype

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "CnnModel":
        return CnnModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "CnnModel":
        return CnnModel(self.config, copy.deepcopy(self.params))

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch)
        cfg = self.config
        want = (cfg.input_channels, cfg.input_height, cfg.input_width)
        if batch.ndim != 4 or batch.shape[1:] != want:
            raise DimensionError(f"batch shape {batch.shape} does not match model input [N, {want[0]}, {want[1]}, {want[2]}]")
        return batch.astype(self.dtype, copy=False)

    def forward_graph(self, batch, training: bool = False, seed: int = 0,
                      param_nodes: Dict[str, T.Node] = None) -> GraphOutputs:
        """Record a forward pass. ``param_nodes`` lets a caller supply its own
        leaf nodes for the parameters (used by training to collect gradients).
        """
        x = T.Node(self._check_batch(batch))
        p = param_nodes or {k: T.Node(v) for k, v in self.params.items()}
        acts: Dict[str, T.Node] = {}
        h = x
        for name in self.conv_layers:
            h = T.relu(T.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"]))
            acts[name] = h
            h = T.maxpool2d(h, 2)
        h = T.flatten(h)
        h = T.relu(T.dense(h, p["dense1.weight"], p["dense1.bias"]))
        h = T.dropout(h, self.config.dropout_rate, training, seed)
        logits = T.dense(h, p["dense2.weight"], p["dense2.bias"])
        return GraphOutputs(x, acts, logits, T.softmax(logits))

    def forward(self, batch, training: bool = False, seed: int = 0) -> np.ndarray:
        """Class probabilities, shape [N, num_classes]."""
        return self.forward_graph(batch, training, seed).probs.value

    def predict_proba(self, batch, batch_size: int = 64) -> np.ndarray:
        batch = np.asarray(batch)
        if len(batch) <= batch_size:
            return self.forward(batch)
        return np.concatenate([self.forward(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)])

    def feature_maps(self, batch, layer: str) -> np.ndarray:
        if layer not in self.conv_layers:
            raise ContractError(f"unknown layer {layer!r}; choose from {self.conv_layers}")
        return self.forward_graph(batch).activations[layer].value


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32) -> CnnModel:
    """He-normal (fan-in) weights drawn in parameter order, zero biases."""
    shapes = config.parameter_shapes()
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return CnnModel(config, params)


# -- checkpoint ------------------------------------------------------------

def save_checkpoint(model: CnnModel, path) -> None:
    cfg = model.config.to_json().encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayloadError(f"truncated payload while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> CnnModel:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic in {path}: expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {FORMAT_VERSION}")
    cfg_len = r.u32("config length")
    try:
        config = ModelConfig.from_json(r.take(cfg_len, "config").decode("utf-8"))
        expected = config.parameter_shapes()
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from exc
    count = r.u32("tensor count")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        if name not in expected:
            raise ShapeMismatchError(f"unexpected tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise ShapeMismatchError(f"{name}: stored shape {tuple(dims)} != expected {expected[name]}")
        n = int(np.prod(dims))
        payload = r.take(4 * n, f"payload of {name}")
        params[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if list(params) != list(expected):
        raise ShapeMismatchError(f"checkpoint tensors {list(params)} != expected {list(expected)}")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return CnnModel(config, params)
