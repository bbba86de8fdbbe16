"""Dense tensors with a minimal reverse-mode autodiff engine.

Tensors are plain numpy arrays. A :class:`Node` wraps an array together with
the primitive that produced it so a single reverse pass can populate
gradients for every recorded value. Only the primitives needed by the CNN and
the gradient-based explanation methods are provided.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, EvaluationError

ArrayLike = Union[np.ndarray, float, int, Sequence]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Node:
    """A value in a recorded computation.

    ``grad`` is ``None`` until :func:`backward` has been run on a scalar that
    depends on this node.
    """

    __slots__ = ("value", "op", "parents", "grad", "_backward", "__weakref__")

    def __init__(
        self,
        value: ArrayLike,
        op: str = "const",
        parents: Tuple["Node", ...] = (),
        backward_fn: Optional[Backward] = None,
    ):
        self.value = np.asarray(value)
        self.op = op
        self.parents = parents
        self.grad: Optional[np.ndarray] = None
        self._backward = backward_fn

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_node(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x)
    # bare scalars and integer arrays adopt the partner's dtype
    if dtype is not None and (arr.ndim == 0 or not np.issubdtype(arr.dtype, np.floating)):
        arr = arr.astype(dtype)
    return Node(arr)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Node:
    a = as_node(a)
    b = as_node(b, a.dtype)
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return Node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    a = as_node(a)
    b = as_node(b, a.dtype)
    a_shape, b_shape = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

    return Node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a = as_node(a)
    b = as_node(b, a.dtype)
    av, bv = a.value, b.value

    def bw(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Node(av * bv, "mul", (a, b), bw)


def relu(x) -> Node:
    x = as_node(x)
    active = x.value > 0

    def bw(g):
        return (g * active,)

    return Node(np.where(active, x.value, 0).astype(x.dtype), "relu", (x,), bw)


def log(x) -> Node:
    x = as_node(x)
    v = x.value

    def bw(g):
        return (g / v,)

    return Node(np.log(v), "log", (x,), bw)


def clip(x, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping was active."""
    x = as_node(x)
    inside = (x.value >= lo) & (x.value <= hi)

    def bw(g):
        return (g * inside,)

    return Node(np.clip(x.value, lo, hi), "clip", (x,), bw)


# -- shape / reduction -----------------------------------------------------

def reshape(x, shape) -> Node:
    x = as_node(x)
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return Node(x.value.reshape(shape), "reshape", (x,), bw)


def flatten(x) -> Node:
    """Collapse every axis but the first."""
    x = as_node(x)
    return reshape(x, (x.shape[0], -1))


def take(x, index, axis: int = -1) -> Node:
    """Select a single index along ``axis`` (the axis is dropped)."""
    x = as_node(x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return Node(np.take(x.value, index, axis=axis), "take", (x,), bw)


def reduce_sum(x, axis=None) -> Node:
    x = as_node(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(np.sum(x.value, axis=axis), "sum", (x,), bw)


def reduce_mean(x, axis=None) -> Node:
    x = as_node(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(reduce_sum(x, axis), 1.0 / count)


# -- network primitives ----------------------------------------------------

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value

    def bw(g):
        return g @ bv.T, av.T @ g

    return Node(av @ bv, "matmul", (a, b), bw)


def dense(x, weights, bias) -> Node:
    """Affine map ``x @ weights + bias`` for ``x`` of shape [N, D]."""
    x, weights, bias = as_node(x), as_node(weights), as_node(bias)
    if weights.value.ndim != 2 or x.value.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense bias {bias.shape} does not match {weights.shape[1]} units")
    xv, wv = x.value, weights.value

    def bw(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Node(xv @ wv + bias.value, "dense", (x, weights, bias), bw)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, kernels, bias, stride: int = 1) -> Node:
    """Valid (unpadded) 2-D cross-correlation over NCHW input.

    Output spatial size is ``floor((H - kH) / stride) + 1``.
    """
    x, kernels, bias = as_node(x), as_node(kernels), as_node(bias)
    if x.value.ndim != 4 or kernels.value.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"kernels expect {kc} channels but input has {c}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (f,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {f} filters")
    if stride < 1:
        raise ContractError("stride must be positive")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1

    xv, kv = x.value, kernels.value
    # cols: [N*oh*ow, C*kh*kw]
    cols = _windows(xv, kh, kw, stride).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    kmat = kv.reshape(f, -1)
    out = (cols @ kmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2) + bias.value.reshape(1, f, 1, 1)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
        dk = (gmat.T @ cols).reshape(kv.shape)
        db = g.sum(axis=(0, 2, 3))
        dcols = (gmat @ kmat).reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros_like(xv, dtype=dcols.dtype)
        h_span = stride * (oh - 1) + 1
        w_span = stride * (ow - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + h_span:stride, j:j + w_span:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, dk, db

    return Node(np.ascontiguousarray(out), "conv2d", (x, kernels, bias), bw)


def maxpool2d(x, window: int = 2) -> Node:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped. Gradient goes to the first maximum in row-major order.
    """
    x = as_node(x)
    if x.value.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    if oh < 1 or ow < 1:
        raise DimensionError(f"input {h}x{w} smaller than pooling window {window}")
    xv = x.value[:, :, : oh * window, : ow * window]
    blocks = xv.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    full_shape = x.shape

    def bw(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, arg[..., None], g[..., None], axis=-1)
        routed = routed.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * window, ow * window)
        dx = np.zeros(full_shape, dtype=g.dtype)
        dx[:, :, : oh * window, : ow * window] = routed
        return (dx,)

    return Node(out, "maxpool2d", (x,), bw)


def softmax(x) -> Node:
    """Row-wise softmax over the last axis, computed with max subtraction."""
    x = as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Node(s, "softmax", (x,), bw)


def dropout(x, rate: float, training: bool, seed: int = 0) -> Node:
    """Inverted dropout. Identity (the very same node) when not training."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_node(x)
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    factor = (keep * scale).astype(x.dtype)

    def bw(g):
        return (g * factor,)

    return Node(x.value * factor, "dropout", (x,), bw)


# -- reverse pass ----------------------------------------------------------

def _topological(root: Node) -> List[Node]:
    order: List[Node] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> Dict[Node, np.ndarray]:
    """Populate ``grad`` on every node that ``loss`` depends on.

    Returns a table mapping each visited node to its gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    table: Dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            g = np.zeros_like(node.value)
            node.grad = g
        table[node] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            pg = np.asarray(pg).reshape(parent.shape)
            parent.grad = pg if parent.grad is None else parent.grad + pg
    return table


def grad_check(f: Callable[[Node], Node], x: np.ndarray, eps: float = 1e-6) -> float:
    """Maximum relative error between the autodiff gradient of ``f`` at ``x``
    and a central finite difference.

    The per-coordinate error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.array(x, dtype=np.float64)
    xn = Node(x.copy())
    out = f(xn)
    if not np.all(np.isfinite(out.value)):
        raise EvaluationError("f(x) is not finite")
    backward(out)
    analytic = xn.grad.astype(np.float64)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Node(x.copy())).value)
        flat[i] = orig - eps
        fm = float(f(Node(x.copy())).value)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"f is not finite near coordinate {i}")
        num_flat[i] = (fp - fm) / (2 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def parameters_grad_check(f: Callable[[Sequence[Node]], Node], arrays: Iterable[np.ndarray], eps: float = 1e-6) -> float:
    """grad_check over several inputs at once; returns the worst error."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    worst = 0.0
    for k in range(len(arrays)):
        def fk(node, k=k):
            nodes = [Node(a) for a in arrays]
            nodes[k] = node
            return f(nodes)

        worst = max(worst, grad_check(fk, arrays[k], eps))
    return worst
