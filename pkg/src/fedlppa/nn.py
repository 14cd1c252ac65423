"""Small layer objects over the tensor engine.

Each layer exposes ``entries()``: an ordered list of ``(name, kind, ref)`` where
``kind`` is ``"param"`` (a requires-grad Tensor) or ``"buffer"`` (a numpy
array mutated in place, e.g. batch-norm running statistics). Flattening and
loading of parameter partitions walk these lists in order.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

# a client's 10 local iterations leave 0.7**10 (about 3%) of the received statistics
BN_MOMENTUM = 0.3


def _uniform(rng, bound, shape):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Layer:
    def entries(self, prefix=""):
        out = []
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((key, "param", value))
            elif isinstance(value, Layer):
                out.extend(value.entries(key + "."))
            elif isinstance(value, list) and value and isinstance(value[0], Layer):
                for i, sub in enumerate(value):
                    out.extend(sub.entries(f"{key}.{i}."))
        out.extend((f"{prefix}{name}", "buffer", arr) for name, arr in self.buffers())
        return out

    def buffers(self):
        return []


class Conv2d(Layer):
    """Conv with PyTorch-default (fan-in uniform) initialization."""

    def __init__(self, c_in, c_out, k, rng, padding=None, bias=True):
        bound = 1.0 / np.sqrt(c_in * k * k)
        self.weight = _uniform(rng, bound, (c_out, c_in, k, k))
        self.bias = _uniform(rng, bound, (c_out,)) if bias else None
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=BN_MOMENTUM, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.momentum = momentum
        self.eps = eps

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


class ConvBNAct(Layer):
    """conv3x3 -> batch norm -> leaky ReLU."""

    def __init__(self, c_in, c_out, rng, slope=0.01):
        self.conv = Conv2d(c_in, c_out, 3, rng)
        self.norm = BatchNorm2d(c_out)
        self.slope = slope

    def __call__(self, x, training):
        return T.leaky_relu(self.norm(self.conv(x), training), self.slope)


class ConvBlock(Layer):
    """Two stacked conv3x3-BN-LeakyReLU units (the vanilla U-Net block)."""

    def __init__(self, c_in, c_out, rng):
        self.first = ConvBNAct(c_in, c_out, rng)
        self.second = ConvBNAct(c_out, c_out, rng)

    def __call__(self, x, training):
        return self.second(self.first(x, training), training)
