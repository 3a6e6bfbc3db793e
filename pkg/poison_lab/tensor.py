"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Values are plain row-major numpy arrays wrapped in an immutable ``Tensor``.
A ``Graph`` records every operation applied to its nodes so that
``backward`` can replay them in reverse and hand back exact gradients for
the graph's roots (inputs and trainable parameters).

Graphs are confined to the thread that builds them; tensors are read-only
and may be shared freely.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeError

logger = logging.getLogger(__name__)

# Classic AlexNet constants; the architecture table leaves them unstated.
LRN_RADIUS = 2
LRN_BIAS = 2.0
LRN_ALPHA = 1e-4
LRN_BETA = 0.75


class Tensor:
    """Immutable dense n-dimensional array of 64-bit floats."""

    __slots__ = ("_data",)

    def __init__(self, data, shape: Optional[Sequence[int]] = None):
        source = data.data if isinstance(data, Tensor) else data
        array = np.array(source, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if array.size != int(np.prod(shape, dtype=np.int64)):
                raise ShapeError(
                    f"Cannot view {array.size} values as shape {shape}"
                )
            array = array.reshape(shape)
        array.setflags(write=False)
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Wrap an array without copying when it is already float64."""
        view = np.ascontiguousarray(array, dtype=np.float64).view()
        view.setflags(write=False)
        tensor = cls.__new__(cls)
        tensor._data = view
        return tensor

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape)))

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return np.array(self._data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor.wrap(self._data.reshape(shape))

    def __len__(self) -> int:
        return self.shape[0] if self.ndim else 1

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self._data, threshold=8)})"


def as_array(value) -> np.ndarray:
    """Return the float64 array behind a Tensor or array-like."""
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilised by max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


# --- kernels ---------------------------------------------------------------
#
# Each operation has a forward kernel returning (output, saved) and a backward
# kernel mapping (saved, upstream gradient, needs) to one gradient per input.
# ``needs`` flags which input gradients are wanted; others may be None.


def _conv2d_forward(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )
    if stride < 1:
        raise InvalidArgumentError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise InvalidArgumentError(f"conv2d padding must be >= 0, got {padding}")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input {x.shape[2:]}"
        )

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return out, (x.shape, xp.shape, cols, kernel, stride, padding)


def _conv2d_backward(saved, grad: np.ndarray, needs: Tuple[bool, ...]):
    x_shape, xp_shape, cols, kernel, stride, padding = saved
    dx = dk = None
    if needs[1]:
        dk = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))
    if needs[0]:
        kh, kw = kernel.shape[2], kernel.shape[3]
        out_h, out_w = grad.shape[2], grad.shape[3]
        dcols = np.tensordot(grad, kernel, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        dxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]]
    return dx, dk


def _channel_bias_forward(x: np.ndarray, bias: np.ndarray):
    if x.ndim != 4 or bias.shape != (x.shape[1],):
        raise ShapeError(f"channel bias {bias.shape} does not match input {x.shape}")
    return x + bias[None, :, None, None], ()


def _channel_bias_backward(saved, grad, needs):
    return grad, grad.sum(axis=(0, 2, 3))


def _same_padding(extent: int, window: int, stride: int) -> Tuple[int, int, int]:
    """Output size and (before, after) zero padding for SAME-style pooling."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + window - extent, 0)
    return out, total // 2, total - total // 2


def _maxpool2d_forward(x: np.ndarray, window: int, stride: int):
    if window < 1 or stride < 1:
        raise InvalidArgumentError(
            f"maxpool2d window and stride must be positive, got {window} and {stride}"
        )
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out_h, top, bottom = _same_padding(h, window, stride)
    out_w, left, right = _same_padding(w, window, stride)
    if window > h + top + bottom or window > w + left + right:
        raise ShapeError(f"maxpool2d window {window} exceeds padded extent of {x.shape}")

    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    windows = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, out_h, out_w, window * window)
    # argmax returns the first maximal index, which is the tie rule
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, xp.shape, arg, window, stride, top, left)


def _maxpool2d_backward(saved, grad, needs):
    x_shape, xp_shape, arg, window, stride, top, left = saved
    n, c, out_h, out_w = arg.shape
    rows = (np.arange(out_h) * stride)[None, None, :, None] + arg // window
    cols = (np.arange(out_w) * stride)[None, None, None, :] + arg % window
    batch = np.arange(n)[:, None, None, None]
    channel = np.arange(c)[None, :, None, None]
    dxp = np.zeros(xp_shape)
    np.add.at(dxp, (batch, channel, rows, cols), grad)
    return (dxp[:, :, top:top + x_shape[2], left:left + x_shape[3]],)


def _channel_window_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over channels c' with |c' - c| <= radius, truncated at the edges."""
    channels = a.shape[1]
    total = np.zeros_like(a)
    for offset in range(-radius, radius + 1):
        lo, hi = max(0, -offset), min(channels, channels - offset)
        if lo < hi:
            total[:, lo:hi] += a[:, lo + offset:hi + offset]
    return total


def _lrn_forward(x: np.ndarray, radius: int, bias: float, alpha: float, beta: float):
    if radius < 0:
        raise InvalidArgumentError(f"lrn radius must be >= 0, got {radius}")
    if bias <= 0:
        raise InvalidArgumentError(f"lrn bias must be > 0, got {bias}")
    if x.ndim < 2:
        raise ShapeError(f"lrn expects a channel axis, got shape {x.shape}")
    size = 2 * radius + 1
    denom = bias + (alpha / size) * _channel_window_sum(x * x, radius)
    scale = denom ** (-beta)
    return x * scale, (x, denom, scale, radius, alpha, beta, size)


def _lrn_backward(saved, grad, needs):
    x, denom, scale, radius, alpha, beta, size = saved
    inner = grad * x * scale / denom
    dx = grad * scale - (2.0 * alpha * beta / size) * x * _channel_window_sum(inner, radius)
    return (dx,)


def _dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    if weights.ndim != 2 or bias.shape != (weights.shape[0],):
        raise ShapeError(
            f"dense expects (out, in) weights and (out,) bias, got {weights.shape} and {bias.shape}"
        )
    if x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weights {weights.shape}")
    return x @ weights.T + bias, (x, weights)


def _dense_backward(saved, grad, needs):
    x, weights = saved
    dx = grad @ weights if needs[0] else None
    if x.ndim == 1:
        dw = np.outer(grad, x) if needs[1] else None
        db = grad
    else:
        dw = grad.T @ x if needs[1] else None
        db = grad.sum(axis=0)
    return dx, dw, db


def _relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), (mask,)


def _relu_backward(saved, grad, needs):
    (mask,) = saved
    return (np.where(mask, grad, 0.0),)


def _softmax_cross_entropy_forward(logits: np.ndarray, labels: np.ndarray):
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects batch x C logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"{labels.shape[0]} labels for a batch of {logits.shape[0]} logits"
        )
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InvalidArgumentError(f"label out of range [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(labels.shape[0])
    loss = np.mean(log_norm - shifted[rows, labels])
    return np.asarray(loss), (shifted, log_norm, labels)


def _softmax_cross_entropy_backward(saved, grad, needs):
    shifted, log_norm, labels = saved
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(labels.shape[0]), labels] -= 1.0
    return (probs * (grad / labels.shape[0]),)


def _l2sq_forward(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"l2sq_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return np.asarray(np.sum(diff * diff)), (diff,)


def _l2sq_backward(saved, grad, needs):
    (diff,) = saved
    da = 2.0 * diff * grad
    return da, -da


def _add_forward(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b, ()


def _add_backward(saved, grad, needs):
    return grad, grad


def _scale_forward(x: np.ndarray, factor: float):
    return x * factor, (factor,)


def _scale_backward(saved, grad, needs):
    return (grad * saved[0],)


def _reshape_forward(x: np.ndarray, shape: Tuple[int, ...]):
    try:
        return x.reshape(shape), (x.shape,)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc


def _reshape_backward(saved, grad, needs):
    return (grad.reshape(saved[0]),)


_BACKWARD: Dict[str, Callable] = {
    "conv2d": _conv2d_backward,
    "channel_bias": _channel_bias_backward,
    "maxpool2d": _maxpool2d_backward,
    "lrn": _lrn_backward,
    "dense": _dense_backward,
    "relu": _relu_backward,
    "softmax_cross_entropy": _softmax_cross_entropy_backward,
    "l2sq_distance": _l2sq_backward,
    "add": _add_backward,
    "scale": _scale_backward,
    "reshape": _reshape_backward,
}


# --- graph -----------------------------------------------------------------


@dataclass
class Node:
    """One recorded operation and its output."""

    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    saved: tuple
    needs_grad: bool


class Graph:
    """Append-only record of operations, rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.roots: List[int] = []

    def _push(self, op: str, inputs: Tuple[int, ...], value: np.ndarray, saved: tuple = ()) -> int:
        needs_grad = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(op, inputs, value, saved, needs_grad))
        return len(self.nodes) - 1

    def _check(self, *ids: int):
        for node_id in ids:
            if not 0 <= node_id < len(self.nodes):
                raise InvalidArgumentError(f"unknown graph node {node_id}")

    def input(self, tensor) -> int:
        """Add a differentiable leaf (an input or a trainable parameter)."""
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), as_array(tensor), (), True))
        self.roots.append(node_id)
        return node_id

    def constant(self, tensor) -> int:
        """Add a leaf that never receives a gradient."""
        self.nodes.append(Node("leaf", (), as_array(tensor), (), False))
        return len(self.nodes) - 1

    def value(self, node_id: int) -> Tensor:
        self._check(node_id)
        return Tensor.wrap(self.nodes[node_id].value)

    def array(self, node_id: int) -> np.ndarray:
        self._check(node_id)
        return self.nodes[node_id].value

    def conv2d(self, x: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
        self._check(x, kernel)
        out, saved = _conv2d_forward(self.array(x), self.array(kernel), stride, padding)
        return self._push("conv2d", (x, kernel), out, saved)

    def channel_bias(self, x: int, bias: int) -> int:
        self._check(x, bias)
        out, saved = _channel_bias_forward(self.array(x), self.array(bias))
        return self._push("channel_bias", (x, bias), out, saved)

    def maxpool2d(self, x: int, window: int, stride: int) -> int:
        self._check(x)
        out, saved = _maxpool2d_forward(self.array(x), window, stride)
        return self._push("maxpool2d", (x,), out, saved)

    def lrn(self, x: int, radius: int = LRN_RADIUS, bias: float = LRN_BIAS,
            alpha: float = LRN_ALPHA, beta_lrn: float = LRN_BETA) -> int:
        self._check(x)
        out, saved = _lrn_forward(self.array(x), radius, bias, alpha, beta_lrn)
        return self._push("lrn", (x,), out, saved)

    def dense(self, x: int, weights: int, bias: int) -> int:
        self._check(x, weights, bias)
        out, saved = _dense_forward(self.array(x), self.array(weights), self.array(bias))
        return self._push("dense", (x, weights, bias), out, saved)

    def relu(self, x: int) -> int:
        self._check(x)
        out, saved = _relu_forward(self.array(x))
        return self._push("relu", (x,), out, saved)

    def softmax_cross_entropy(self, logits: int, labels: Sequence[int]) -> int:
        self._check(logits)
        out, saved = _softmax_cross_entropy_forward(self.array(logits), np.asarray(labels))
        return self._push("softmax_cross_entropy", (logits,), out, saved)

    def l2sq_distance(self, a: int, b: int) -> int:
        self._check(a, b)
        out, saved = _l2sq_forward(self.array(a), self.array(b))
        return self._push("l2sq_distance", (a, b), out, saved)

    def add(self, a: int, b: int) -> int:
        self._check(a, b)
        out, saved = _add_forward(self.array(a), self.array(b))
        return self._push("add", (a, b), out, saved)

    def scale(self, x: int, factor: float) -> int:
        self._check(x)
        out, saved = _scale_forward(self.array(x), float(factor))
        return self._push("scale", (x,), out, saved)

    def reshape(self, x: int, shape: Sequence[int]) -> int:
        self._check(x)
        out, saved = _reshape_forward(self.array(x), tuple(shape))
        return self._push("reshape", (x,), out, saved)


def backward(graph: Graph, loss: int) -> Dict[int, Tensor]:
    """Exact reverse-mode gradients of a scalar node for every graph root.

    Roots the loss does not depend on receive zero gradients.
    """
    graph._check(loss)
    loss_value = graph.nodes[loss].value
    if loss_value.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss_value.shape}")

    roots = set(graph.roots)
    pending: Dict[int, np.ndarray] = {loss: np.ones_like(loss_value)}
    collected: Dict[int, np.ndarray] = {}
    for node_id in range(loss, -1, -1):
        grad = pending.pop(node_id, None)
        if grad is None:
            continue
        node = graph.nodes[node_id]
        if node_id in roots:
            collected[node_id] = grad
            continue
        if not node.inputs or not node.needs_grad:
            continue
        needs = tuple(graph.nodes[i].needs_grad for i in node.inputs)
        input_grads = _BACKWARD[node.op](node.saved, grad, needs)
        for input_id, input_grad, need in zip(node.inputs, input_grads, needs):
            if not need or input_grad is None:
                continue
            if input_id in pending:
                pending[input_id] = pending[input_id] + input_grad
            else:
                pending[input_id] = input_grad

    return {
        root: Tensor.wrap(collected[root]) if root in collected
        else Tensor.zeros(graph.nodes[root].value.shape)
        for root in graph.roots
    }


# --- eager wrappers --------------------------------------------------------


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel."""
    return Tensor.wrap(_conv2d_forward(as_array(input), as_array(kernel), stride, padding)[0])


def maxpool2d(input: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum with SAME-style zero padding at the far edges."""
    return Tensor.wrap(_maxpool2d_forward(as_array(input), window, stride)[0])


def lrn(input: Tensor, radius: int = LRN_RADIUS, bias: float = LRN_BIAS,
        alpha: float = LRN_ALPHA, beta_lrn: float = LRN_BETA) -> Tensor:
    """Across-channel local response normalisation."""
    return Tensor.wrap(_lrn_forward(as_array(input), radius, bias, alpha, beta_lrn)[0])


def dense(input: Tensor, weights: Tensor, biasv: Tensor) -> Tensor:
    """Affine map ``input @ weights.T + biasv`` with (out, in) weights."""
    return Tensor.wrap(_dense_forward(as_array(input), as_array(weights), as_array(biasv))[0])


def relu(input: Tensor) -> Tensor:
    return Tensor.wrap(_relu_forward(as_array(input))[0])


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    return Tensor.wrap(_softmax_cross_entropy_forward(as_array(logits), np.asarray(labels))[0])


def l2sq_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance, summed over every element."""
    return Tensor.wrap(_l2sq_forward(as_array(a), as_array(b))[0])
