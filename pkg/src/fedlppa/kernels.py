"""Hot-loop dispatch: compiled Cython kernels when built, numpy otherwise.

Set ``FEDLPPA_KERNELS=python`` to force the fallback (used by the benchmark and
by the cross-backend tests).
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("FEDLPPA_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def use_backend(name):
    """Switch the active implementation; returns the previous backend name."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels as _compiled

        _impl = _compiled
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def has_direct_conv():
    return hasattr(_impl, "conv_direct")


def prefer_direct(c_in, c_out, h, w, k, stride, pad):
    """Direct loops beat im2col+BLAS only on large planes with few channels."""
    return (has_direct_conv() and stride == 1 and 2 * pad == k - 1 and h * w >= 2048
            and c_in * c_out <= 256)


def conv_direct(x, w, out, pad):
    _impl.conv_direct(np.ascontiguousarray(x), np.ascontiguousarray(w), out, pad)
    return out


def conv_direct_grad_input(g, w, shape, pad):
    dx = np.zeros(shape, dtype=g.dtype)
    _impl.conv_direct_grad_input(np.ascontiguousarray(g), np.ascontiguousarray(w), dx, pad)
    return dx


def conv_direct_grad_weight(g, x, shape, pad):
    dw = np.zeros(shape, dtype=g.dtype)
    _impl.conv_direct_grad_weight(np.ascontiguousarray(g), np.ascontiguousarray(x), dw, pad)
    return dw


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix, zero padded."""
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = np.empty((n, c * k * k, ho * wo), dtype=x.dtype)
    _impl.im2col(x, cols, k, stride, pad, ho, wo)
    return cols


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    dx = np.zeros(shape, dtype=cols.dtype)
    _impl.col2im(np.ascontiguousarray(cols), dx, k, stride, pad, ho, wo)
    return dx


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.uint8)
    _impl.maxpool2x2(x, out, arg)
    return out, arg


def maxpool2x2_backward(g, arg, shape):
    dx = np.zeros(shape, dtype=g.dtype)
    _impl.maxpool2x2_backward(np.ascontiguousarray(g), arg, dx)
    return dx


def leaky_relu(x, slope):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _impl.leaky_relu(x.reshape(-1), out.reshape(-1), x.dtype.type(slope))
    return out


def leaky_relu_backward(x, g, slope):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    out = np.empty_like(x)
    _impl.leaky_relu_backward(x.reshape(-1), g.reshape(-1), out.reshape(-1), x.dtype.type(slope))
    return out


def bn_moments(x):
    """Per-channel biased (mean, var) of an NCHW array, as float64."""
    x = np.ascontiguousarray(x)
    n, c = x.shape[:2]
    mean = np.empty(c, dtype=np.float64)
    var = np.empty(c, dtype=np.float64)
    _impl.bn_moments(x.reshape(n, c, -1), mean, var)
    return mean, var


def bn_forward(x, mean, inv_std, gamma, beta):
    """Returns (xhat, out) for per-channel statistics given in float64."""
    x = np.ascontiguousarray(x)
    n, c = x.shape[:2]
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    _impl.bn_forward(x.reshape(n, c, -1), np.ascontiguousarray(mean, dtype=np.float64),
                     np.ascontiguousarray(inv_std, dtype=np.float64),
                     np.ascontiguousarray(gamma, dtype=x.dtype),
                     np.ascontiguousarray(beta, dtype=x.dtype),
                     xhat.reshape(n, c, -1), out.reshape(n, c, -1))
    return xhat, out


def bn_backward(g, xhat, gamma, inv_std, training, need_dx=True):
    """Returns (dx or None, sum of g, sum of g*xhat) per channel."""
    xhat = np.ascontiguousarray(xhat)
    g = np.ascontiguousarray(g, dtype=xhat.dtype)
    n, c = xhat.shape[:2]
    sum_g = np.empty(c, dtype=np.float64)
    sum_gx = np.empty(c, dtype=np.float64)
    dx = np.empty_like(xhat) if need_dx else np.empty((0, c, 1), dtype=xhat.dtype)
    _impl.bn_backward(g.reshape(n, c, -1), xhat.reshape(n, c, -1),
                      np.ascontiguousarray(gamma, dtype=xhat.dtype),
                      np.ascontiguousarray(inv_std, dtype=np.float64), sum_g, sum_gx,
                      dx.reshape(n, c, -1) if need_dx else dx, bool(training))
    return (dx if need_dx else None), sum_g, sum_gx
