"""Dense tensors with a reverse-mode gradient tape.

Every differentiable operation records a :class:`TapeNode` on its output when
at least one input requires a gradient. :func:`backward` walks the recorded
DAG in reverse topological order and accumulates gradients into the leaves.

Only what small convolutional networks need is provided: elementwise
arithmetic with broadcasting, reductions, matrix products, patch-gather
convolution, batch normalization, pooling, softmax and cross-entropy.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, TapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class TapeNode:
    """One recorded operation: its inputs and the closure that maps the
    output gradient to one gradient per input (``None`` where not needed)."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"TapeNode(op={self.op!r}, n_inputs={len(self.parents)})"


class Tensor:
    """n-dimensional float array that can take part in the gradient tape.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` accumulator of the same shape. Intermediate results never store
    gradients; they only hold the node that produced them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Optional[TapeNode] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _record(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = TapeNode(op, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- tape traversal -------------------------------------------------------
def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tracked leaf reachable from ``loss``.

    Gradients add into existing accumulators, so repeated use of a tensor
    (fan-out) and repeated backward calls over fresh tapes both sum. The tape
    is released afterwards; calling again on the same loss raises
    :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._node is not None and loss._node.consumed:
        raise TapeError("tape already consumed by a previous backward call")

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
            continue
        if node.consumed:
            raise TapeError(f"tape node {node.op!r} already consumed")
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for t in order:
        if t._node is not None:
            t._node.consumed = True
            t._node.backward_fn = None


def grad(output: Tensor, inputs: Sequence[Tensor]):
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` as numpy arrays.

    Accumulators on ``inputs`` are zeroed first so the result is the fresh
    gradient only.
    """
    for t in inputs:
        t.zero_grad()
    backward(output)
    return [t.grad.copy() for t in inputs]


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _const(a, b)
    b = _const(b, a)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), back, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# -- shape and reductions --------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the first."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), back, "getitem")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _record(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _record(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _record(out, parents, back, "linear")


# -- convolution --------------------------------------------------------------
def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Gather (C*kh*kw, N*Ho*Wo) patch columns from an (N, C, H, W) array."""
    n, c, h, w = x.shape
    ho, wo = _out_extent(h, kh, stride, pad), _out_extent(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    # channel-major order keeps the innermost copy loop along the image rows
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo), ho, wo


def _correlate(x: np.ndarray, k: np.ndarray, stride: int, pad: int):
    n = x.shape[0]
    o = k.shape[0]
    cols, ho, wo = _patches(x, k.shape[2], k.shape[3], stride, pad)
    out = (k.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _input_grad(g: np.ndarray, k: np.ndarray, in_hw: Tuple[int, int], stride: int, pad: int) -> np.ndarray:
    """Gradient w.r.t. the convolution input as a transposed convolution."""
    n, o, ho, wo = g.shape
    kh, kw = k.shape[2], k.shape[3]
    h, w = in_hw
    if stride > 1:
        gd = np.zeros((n, o, stride * (ho - 1) + 1, stride * (wo - 1) + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    # rows/cols of the input never reached by a window get zero gradient
    rh = (h + 2 * pad - kh) % stride
    rw = (w + 2 * pad - kw) % stride
    ph, pw = kh - 1 - pad, kw - 1 - pad
    gd = np.pad(gd, ((0, 0), (0, 0), (max(ph, 0), max(ph, 0) + rh), (max(pw, 0), max(pw, 0) + rw)))
    if ph < 0 or pw < 0:
        gd = gd[:, :, -min(ph, 0): gd.shape[2] + min(ph, 0) or None,
                -min(pw, 0): gd.shape[3] + min(pw, 0) or None]
    flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    out, _ = _correlate(gd, flipped, 1, 0)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an (N, C, H, W) batch.

    Patches are gathered into a (C*kh*kw, N*Ho*Wo) matrix and multiplied by
    the flattened kernel. The input gradient is the transposed convolution
    of the output gradient, evaluated through the same patch-gather path.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    h, w = x.shape[2], x.shape[3]
    o, _, kh, kw = kernel.shape
    if _out_extent(h, kh, stride, padding) < 1 or _out_extent(w, kw, stride, padding) < 1:
        raise DimensionError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape}")

    out, cols = _correlate(x.data, kernel.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gk = None
        if kernel.requires_grad:
            go = g.transpose(1, 0, 2, 3).reshape(o, -1)
            gk = (go @ cols.T).reshape(kernel.shape)
        gx = _input_grad(g, kernel.data, (h, w), stride, padding) if x.requires_grad else None
        if bias is None:
            return gx, gk
        return gx, gk, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return _record(out, parents, back, "conv2d")


# -- normalization and pooling --------------------------------------------------
def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
                running_var: Tensor, mode: str = "train", momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) input.

    In ``train`` mode the batch statistics normalize the input and the
    running estimates are updated in place (unbiased variance, PyTorch
    convention). ``eval`` mode normalizes with the running estimates.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    shape = (1, c, 1, 1)
    if mode == "train":
        m = x.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        rm, rv = running_mean.data, running_var.data
        rm *= 1 - momentum
        rm += momentum * mu
        rv *= 1 - momentum
        rv += momentum * var * (m / max(m - 1, 1))
    elif mode == "eval":
        m = None
        mu, var = running_mean.data, running_var.data
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def back(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(shape)
            if m is None:
                gx = dxhat * inv_std.reshape(shape)
            else:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std.reshape(shape) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, gg, gb, None, None

    return _record(out, (x, gamma, beta, running_mean, running_var), back, "batchnorm2d")


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling with a square window."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"avgpool2d: spatial extents {h}x{w} not divisible by {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def back(g):
        g = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (g / (kernel * kernel),)

    return _record(out, (x,), back, "avgpool2d")


def global_avgpool2d(x: Tensor) -> Tensor:
    """Average over the spatial axes, returning (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _record(out, (x,), back, "global_avgpool2d")


# -- probabilistic outputs ----------------------------------------------------------
def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (t,), back, "log_softmax")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (t,), back, "softmax")


def softmax_np(t: np.ndarray) -> np.ndarray:
    e = np.exp(t - t.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy ``-log(exp(t_y) / sum_j exp(t_j))``.

    Evaluated through the max-shifted log-sum-exp so saturated logits stay
    finite. ``reduction`` is ``"mean"`` (default), ``"sum"`` or ``"none"``.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    t = logits.data
    shifted = t - t.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    per = lse - shifted[np.arange(n), labels]
    if reduction == "mean":
        out, scale = per.mean(), 1.0 / n
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "none":
        out, scale = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def back(g):
        soft = softmax_np(t)
        soft[np.arange(n), labels] -= 1
        if scale is None:
            return (soft * g[:, None],)
        return (soft * (g * scale),)

    return _record(np.asarray(out, dtype=t.dtype), (logits,), back, "cross_entropy")


def pick(t: Tensor, index) -> Tensor:
    """Row-wise selection ``t[n, index[n]]`` from an (N, C) tensor."""
    index = np.broadcast_to(np.asarray(index, dtype=np.intp), (t.shape[0],))
    return getitem(t, (np.arange(t.shape[0]), index))


def l2_norm(x: Tensor, axis) -> Tensor:
    return sqrt(tsum(square(x), axis=axis))
