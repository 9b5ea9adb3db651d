"""Reverse-mode autodiff over dense 4-D arrays.

Every value is a `Tensor` holding a (batch, channel, height, width) numpy
array. Operations record their inputs and a backward closure on the output,
so calling `Tensor.backward()` on a scalar result replays the chain rule in
reverse topological order. The default precision is float32; passing float64
data runs the identical code paths in double precision, which is what the
finite-difference checker relies on.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# Test hook: scales the input gradient of leaky_relu. Only ever set away from
# 1.0 to prove the finite-difference checker flags a wrong backward rule.
_grad_fault_scale = 1.0


class Tensor:
    """A 4-D array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (n, c, h, w); got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Populate `.grad` on every upstream tensor with requires_grad set.

        Contributions from multiple uses of the same tensor accumulate.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op!r})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer and stored in checkpoints."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _result(data, parents, op, backward_fn):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents),
                  _backward=backward_fn if req else None, _op=op)


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad += grad


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate `x` with a (c_out, c_in, k, k) filter bank plus bias.

    The kernel must be square with odd side. `bias` holds c_out values in a
    (1, c_out, 1, 1) tensor.
    """
    n, c_in, h, w = x.shape
    c_out, c_in_w, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd side, got {weight.shape}")
    if c_in != c_in_w:
        raise ShapeError(f"input channels {x.shape} do not match weight {weight.shape}")
    if bias.shape != (1, c_out, 1, 1):
        raise ShapeError(f"bias shape {bias.shape} must be (1, {c_out}, 1, 1)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"empty output: input {x.shape}, weight {weight.shape}, stride={stride} pad={pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # columns: one row per output pixel, one column per (c_in, ki, kj) tap
    col = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    col = col.reshape(n * h_out * w_out, c_in * k * k)
    w_mat = weight.data.reshape(c_out, c_in * k * k)
    out = col @ w_mat.T
    out = np.ascontiguousarray(out.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))
    out += bias.data

    def backward(grad):
        g_mat = grad.transpose(0, 2, 3, 1).reshape(n * h_out * w_out, c_out)
        if weight.requires_grad:
            _accumulate(weight, (g_mat.T @ col).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)).reshape(1, c_out, 1, 1))
        if x.requires_grad:
            g_col = (g_mat @ w_mat).reshape(n, h_out, w_out, c_in, k, k)
            g_xp = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
            for ki in range(k):
                for kj in range(k):
                    g_xp[:, :, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += \
                        g_col[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            _accumulate(x, g_xp[:, :, pad:pad + h, pad:pad + w] if pad else g_xp)

    return _result(out, (x, weight, bias), "conv2d", backward)


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map across channels (a 1x1 convolution)."""
    if weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight must be (c_out, c_in, 1, 1), got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input channels {x.shape} do not match weight {weight.shape}")
    return conv2d(x, weight, bias, stride=1, pad=0)


def depthwise_scale(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Scale and shift each channel independently; shape is unchanged."""
    c = x.shape[1]
    if weight.shape != (1, c, 1, 1) or bias.shape != (1, c, 1, 1):
        raise ShapeError(
            f"per-channel weight/bias must be (1, {c}, 1, 1); got {weight.shape} and {bias.shape}")
    out = x.data * weight.data + bias.data

    def backward(grad):
        if x.requires_grad:
            _accumulate(x, grad * weight.data)
        if weight.requires_grad:
            _accumulate(weight, (grad * x.data).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if bias.requires_grad:
            _accumulate(bias, grad.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))

    return _result(out, (x, weight, bias), "depthwise_scale", backward)


# ---------------------------------------------------------------------------
# resolution / layout changes
# ---------------------------------------------------------------------------

def space_to_depth(x: Tensor, block: int = 2) -> Tensor:
    """Fold each block x block patch into channels, halving (etc.) resolution.

    Output channel order is input channel first, then sub-pixel row-major:
    out channel c*block^2 + i*block + j holds input channel c, sub-pixel (i, j).
    """
    n, c, h, w = x.shape
    if block < 1:
        raise ShapeError(f"block must be >= 1, got {block}")
    if h % block or w % block:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by block {block}")
    hb, wb = h // block, w // block
    out = x.data.reshape(n, c, hb, block, wb, block)
    out = np.ascontiguousarray(out.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c * block * block, hb, wb)

    def backward(grad):
        if x.requires_grad:
            g = grad.reshape(n, c, block, block, hb, wb)
            g = np.ascontiguousarray(g.transpose(0, 1, 4, 2, 5, 3)).reshape(n, c, h, w)
            _accumulate(x, g)

    return _result(out, (x,), "space_to_depth", backward)


def depth_to_space(x: Tensor, block: int = 2) -> Tensor:
    """Exact inverse of space_to_depth with the same channel layout."""
    n, c, h, w = x.shape
    if block < 1 or c % (block * block):
        raise ShapeError(f"channels {c} not divisible by block^2 = {block * block}")
    cb = c // (block * block)
    out = x.data.reshape(n, cb, block, block, h, w)
    out = np.ascontiguousarray(out.transpose(0, 1, 4, 2, 5, 3)).reshape(n, cb, h * block, w * block)

    def backward(grad):
        if x.requires_grad:
            g = grad.reshape(n, cb, h, block, w, block)
            g = np.ascontiguousarray(g.transpose(0, 1, 3, 5, 2, 4)).reshape(n, c, h, w)
            _accumulate(x, g)

    return _result(out, (x,), "depth_to_space", backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour duplication to double height and width."""
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.shape

    def backward(grad):
        if x.requires_grad:
            _accumulate(x, grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _result(out, (x,), "upsample2x", backward)


def downsample2x(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims {(h, w)} must be even for 2x2 pooling")
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = np.ascontiguousarray(windows).reshape(n, c, h2, w2, 4)
    idx = flat.argmax(axis=4)
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]

    def backward(grad):
        if x.requires_grad:
            g_flat = np.zeros_like(flat)
            np.put_along_axis(g_flat, idx[..., None], grad[..., None], axis=4)
            g = g_flat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            _accumulate(x, np.ascontiguousarray(g).reshape(n, c, h, w))

    return _result(out, (x,), "downsample2x", backward)


def concat_channels(inputs) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = inputs[0].shape
    for i, t in enumerate(inputs):
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise ShapeError(
                f"input {i} has shape {t.shape}, incompatible with {inputs[0].shape}")
    if len(inputs) == 1:
        x = inputs[0]
        out = x.data.copy()

        def backward_single(grad):
            _accumulate(x, grad)

        return _result(out, (x,), "concat_channels", backward_single)

    out = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(grad):
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                _accumulate(t, grad[:, lo:hi])

    return _result(out, tuple(inputs), "concat_channels", backward)


def take_channels(x: Tensor, indices) -> Tensor:
    """Select a fixed set of channels; backward scatters into the rest as zero."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or len(np.unique(idx)) != idx.size:
        raise ShapeError("channel indices must be a 1-D array of unique values")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"channel index out of range for shape {x.shape}")
    out = x.data[:, idx, :, :]

    def backward(grad):
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[:, idx, :, :] = grad
            _accumulate(x, g)

    return _result(out, (x,), "take_channels", backward)


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    out = a.data + b.data

    def backward(grad):
        _accumulate(a, grad)
        _accumulate(b, grad)

    return _result(out, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub needs identical shapes, got {a.shape} and {b.shape}")
    out = a.data - b.data

    def backward(grad):
        _accumulate(a, grad)
        if b.requires_grad:
            _accumulate(b, -grad)

    return _result(out, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward(grad):
        if a.requires_grad:
            _accumulate(a, grad * b.data)
        if b.requires_grad:
            _accumulate(b, grad * a.data)

    return _result(out, (a, b), "mul", backward)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def backward(grad):
        _accumulate(x, grad * factor)

    return _result(out, (x,), "scale", backward)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    """x for x >= 0, slope * x otherwise."""
    neg = x.data < 0
    out = np.where(neg, x.data * slope, x.data)

    def backward(grad):
        if x.requires_grad:
            g = np.where(neg, grad * slope, grad)
            if _grad_fault_scale != 1.0:
                g = g * _grad_fault_scale
            _accumulate(x, g)

    return _result(out, (x,), "leaky_relu", backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_array(x.data)

    def backward(grad):
        if x.requires_grad:
            _accumulate(x, grad * out * (1.0 - out))

    return _result(out, (x,), "sigmoid", backward)


def _sigmoid_array(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber penalty: 0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = np.abs(x.data)
    out = np.where(ax < 1.0, 0.5 * x.data * x.data, ax - 0.5)

    def backward(grad):
        if x.requires_grad:
            _accumulate(x, grad * np.clip(x.data, -1.0, 1.0))

    return _result(out, (x,), "smooth_l1", backward)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Stable elementwise binary cross-entropy; targets carry no gradient."""
    if logits.shape != targets.shape:
        raise ShapeError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}")
    if targets.requires_grad:
        raise ContractError("bce_with_logits targets must be constants")
    z, y = logits.data, targets.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(grad):
        if logits.requires_grad:
            _accumulate(logits, grad * (_sigmoid_array(z) - y))

    return _result(out, (logits, targets), "bce_with_logits", backward)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a (1, 1, 1, 1) scalar tensor."""
    out = x.data.sum().reshape(1, 1, 1, 1)

    def backward(grad):
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, grad.reshape(())))

    return _result(out, (x,), "sum_all", backward)
