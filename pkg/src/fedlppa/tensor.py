"""Dense tensors with a record-on-forward tape for reverse-mode differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, stores a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks the resulting DAG once in reverse topological order.

Float32 is the working precision. Float64 inputs stay float64 so the same ops
can be checked against finite differences at double precision.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Sequence

import numpy as np

from . import kernels

_grad_enabled = contextvars.ContextVar("fedlppa_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- differentiation ------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------
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
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and np.ndim(x) == 0:
        # python scalars take the other operand's dtype so float32 stays float32
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    """Matrix product; leading dims broadcast like ``np.matmul`` (no 1-D operands)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- unary nonlinearities ------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    def backward(g):
        return (kernels.leaky_relu_backward(x.data, g, slope),)

    return _result(kernels.leaky_relu(x.data, slope), (x,), backward, "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    s[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (x,), backward, "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def backward(g):
        return (g * y,)

    return _result(y, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only where the input is strictly inside."""
    y = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data > lo
    if hi is not None:
        inside &= x.data < hi

    def backward(g):
        return (g * inside,)

    return _result(y, (x,), backward, "clamp")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.data.size == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of an R x C matrix (max-subtracted)."""
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {logits.shape}")
    return softmax(logits, axis=1)


# -- reductions and shape ops -------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default for NCHW)."""
    tensors = [_wrap(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def backward(g):
        out = np.zeros_like(x.data)
        if basic:
            out[index] = g
        else:
            # repeated fancy indices must accumulate
            np.add.at(out, index, g)
        return (out,)

    return _result(np.array(x.data[index]), (x,), backward, "getitem")


# -- convolution, pooling, resampling ------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation over (N, C, H, W) or (C, H, W) input.

    ``weight`` is (C_out, C_in, k, k) with odd k. A 3-D input yields a 3-D output.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d shapes: input {x.shape}, kernel {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2:
        raise ValueError(f"conv2d kernel {weight.shape} does not match input channels {c}")
    if k % 2 == 0:
        raise ValueError("conv2d kernel size must be odd")
    ho = kernels.conv_out_size(h, k, stride, padding)
    wo = kernels.conv_out_size(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")
    if kernels.prefer_direct(c, c_out, h, w, k, stride, padding):
        out, backward = _conv_direct(x, weight, bias, padding)
    else:
        out, backward = _conv_lowered(x, weight, bias, stride, padding, ho, wo)

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _result(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def _conv_lowered(x, weight, bias, stride, padding, ho, wo):
    """im2col + batched GEMM; 1x1 convolutions skip the lowering."""
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    pointwise = k == 1 and stride == 1 and padding == 0
    cols = x.data.reshape(n, c, h * w) if pointwise else kernels.im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        g = g.reshape(n, c_out, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g)
            gx = gcols.reshape(x.shape) if pointwise else kernels.col2im(gcols, x.shape, k, stride, padding)
        return (gx, gw, gb)

    return out.reshape(n, c_out, ho, wo), backward


def _conv_direct(x, weight, bias, padding):
    """Compiled direct loops (stride 1, size-preserving padding)."""
    n, c, h, w = x.shape
    c_out = weight.shape[0]
    out = np.zeros((n, c_out, h, w), dtype=x.dtype)
    if bias is not None:
        out += bias.data[:, None, None]
    kernels.conv_direct(x.data, weight.data, out, padding)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = kernels.conv_direct_grad_weight(g, x.data, weight.shape, padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = kernels.conv_direct_grad_input(g, weight.data, x.shape, padding)
        return (gx, gw, gb)

    return out, backward


def max_pool2x2(x: Tensor) -> Tensor:
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {x.shape}")
    out, arg = kernels.maxpool2x2(x.data)

    def backward(g):
        return (kernels.maxpool2x2_backward(g, arg, x.shape),)

    return _result(out, (x,), backward, "max_pool2x2")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    y = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(g):
        shape = g.shape[:-2] + (x.shape[-2], factor, x.shape[-1], factor)
        return (g.reshape(shape).sum(axis=(-3, -1)),)

    return _result(y, (x,), backward, "upsample_nearest")


# -- normalization --------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In training mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if training:
        mu, var = kernels.bn_moments(x.data)
        m = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    xhat, out = kernels.bn_forward(x.data, mu, inv_std, gamma.data, beta.data)

    def backward(g):
        gx, sum_g, sum_gx = kernels.bn_backward(g, xhat, gamma.data, inv_std, training,
                                                need_dx=x.requires_grad)
        gg = sum_gx.astype(gamma.dtype) if gamma.requires_grad else None
        gb = sum_g.astype(beta.dtype) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batch_norm")
