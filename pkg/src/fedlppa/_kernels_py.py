"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

Same signatures and write-into-output contract, so ``kernels`` can swap them
freely. Loops run over kernel taps only; each tap is one strided slice copy.
"""
import numpy as np


def im2col(x, cols, k, stride, pad, ho, wo):
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    view = cols.reshape(n, c, k, k, ho, wo)
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    for ki in range(k):
        for kj in range(k):
            view[:, :, ki, kj] = xp[:, :, ki:ki + hi:stride, kj:kj + wi:stride]


def col2im(cols, dx, k, stride, pad, ho, wo):
    n, c, h, w = dx.shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dx.dtype)
    view = cols.reshape(n, c, k, k, ho, wo)
    hi = stride * (ho - 1) + 1
    wi = stride * (wo - 1) + 1
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + hi:stride, kj:kj + wi:stride] += view[:, :, ki, kj]
    dx += dxp[:, :, pad:pad + h, pad:pad + w]


def maxpool2x2(x, out, arg):
    n, c, ho, wo = out.shape
    win = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(n, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, 4)
    )
    # argmax returns the first maximal index, matching the compiled tie rule
    a = win.argmax(axis=-1)
    arg[...] = a
    out[...] = np.take_along_axis(win, a[..., None], axis=-1)[..., 0]


def maxpool2x2_backward(g, arg, dx):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(win, arg[..., None].astype(np.intp), g[..., None], axis=-1)
    dx[:, :, : 2 * ho, : 2 * wo] = (
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    )


def leaky_relu(x, out, slope):
    np.multiply(x, np.where(x > 0, x.dtype.type(1), x.dtype.type(slope)), out=out)


def leaky_relu_backward(x, g, out, slope):
    np.multiply(g, np.where(x > 0, x.dtype.type(1), x.dtype.type(slope)), out=out)


def bn_forward(x, mean, inv_std, gamma, beta, xhat, out):
    dt = x.dtype
    np.multiply(x - mean.astype(dt)[:, None], inv_std.astype(dt)[:, None], out=xhat)
    np.multiply(xhat, gamma[:, None], out=out)
    out += beta[:, None]


def bn_moments(x, mean, var):
    mean[...] = x.mean(axis=(0, 2), dtype=np.float64)
    var[...] = ((x - mean[:, None]) ** 2).mean(axis=(0, 2))


def bn_backward(g, xhat, gamma, inv_std, sum_g, sum_gx, dx, training):
    sum_g[...] = g.sum(axis=(0, 2), dtype=np.float64)
    sum_gx[...] = (g * xhat).sum(axis=(0, 2), dtype=np.float64)
    if dx.shape[0] == 0:
        return
    dt = g.dtype
    count = g.shape[0] * g.shape[2]
    ka = (gamma * inv_std).astype(dt)[:, None]
    if training:
        kb = (sum_g / count).astype(dt)[:, None]
        kc = (sum_gx / count).astype(dt)[:, None]
        dx[...] = ka * (g - kb - xhat * kc)
    else:
        dx[...] = ka * g
