# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution lowering and 2x2 max pooling.

Every function writes into a caller-allocated output so the Python wrapper in
``kernels.py`` owns allocation and dtype policy.
"""

ctypedef fused real:
    float
    double


cdef inline void _valid_range(Py_ssize_t kj, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t w,
                              Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns j with 0 <= j*stride + kj - pad < w
    cdef Py_ssize_t a = pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = (w - 1 + pad - kj) // stride + 1 if w - 1 + pad - kj >= 0 else 0
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(const real[:, :, :, ::1] x, real[:, :, ::1] cols,
           int k, int stride, int pad, int ho, int wo):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, c, ki, kj, i, j, row, ii, base, lo, hi, off
    cdef real* dst
    cdef const real* src
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _valid_range(kj, pad, stride, w, wo, &lo, &hi)
                        off = kj - pad
                        for i in range(ho):
                            dst = &cols[n, row, i * wo]
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                for j in range(wo):
                                    dst[j] = 0
                                continue
                            src = &x[n, c, ii, 0]
                            for j in range(lo):
                                dst[j] = 0
                            if stride == 1:
                                for j in range(lo, hi):
                                    dst[j] = src[j + off]
                            else:
                                for j in range(lo, hi):
                                    dst[j] = src[j * stride + off]
                            for j in range(hi, wo):
                                dst[j] = 0


def col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] dx,
           int k, int stride, int pad, int ho, int wo):
    """Scatter-add the column matrix back onto a zeroed ``dx``."""
    cdef Py_ssize_t n_batch = dx.shape[0], n_ch = dx.shape[1]
    cdef Py_ssize_t h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t n, c, ki, kj, i, j, row, ii, lo, hi, off
    cdef real* dst
    cdef const real* src
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for ki in range(k):
                    for kj in range(k):
                        row = (c * k + ki) * k + kj
                        _valid_range(kj, pad, stride, w, wo, &lo, &hi)
                        off = kj - pad
                        for i in range(ho):
                            ii = i * stride + ki - pad
                            if ii < 0 or ii >= h:
                                continue
                            src = &cols[n, row, i * wo]
                            dst = &dx[n, c, ii, 0]
                            if stride == 1:
                                for j in range(lo, hi):
                                    dst[j + off] += src[j]
                            else:
                                for j in range(lo, hi):
                                    dst[j * stride + off] += src[j]


def leaky_relu(const real[::1] x, real[::1] out, real slope):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real v
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = v if v > 0 else v * slope


def leaky_relu_backward(const real[::1] x, const real[::1] g, real[::1] out, real slope):
    cdef Py_ssize_t i, n = x.shape[0]
    with nogil:
        for i in range(n):
            out[i] = g[i] if x[i] > 0 else g[i] * slope


def maxpool2x2(const real[:, :, :, ::1] x, real[:, :, :, ::1] out,
               unsigned char[:, :, :, ::1] arg):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef real best, v
    cdef unsigned char a
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        # ties resolve to the first element in row-major window order
                        best = x[n, c, 2 * i, 2 * j]
                        a = 0
                        v = x[n, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            a = 1
                        v = x[n, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            a = 2
                        v = x[n, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            a = 3
                        out[n, c, i, j] = best
                        arg[n, c, i, j] = a


def maxpool2x2_backward(const real[:, :, :, ::1] g, const unsigned char[:, :, :, ::1] arg,
                        real[:, :, :, ::1] dx):
    cdef Py_ssize_t n_batch = g.shape[0], n_ch = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t n, c, i, j
    cdef unsigned char a
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                for i in range(ho):
                    for j in range(wo):
                        a = arg[n, c, i, j]
                        dx[n, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = g[n, c, i, j]


cdef void _conv3_forward(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w,
                         real[:, :, :, ::1] out) noexcept nogil:
    # 3x3, pad 1: the three horizontal taps are fused into one pass per row
    cdef Py_ssize_t n_batch = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t n, co, ci, ki, i, j, r
    cdef real w0, w1, w2
    cdef real* orow
    cdef const real* xrow
    for n in range(n_batch):
        for co in range(c_out):
            for i in range(h):
                orow = &out[n, co, i, 0]
                for ci in range(c_in):
                    for ki in range(3):
                        r = i + ki - 1
                        if r < 0 or r >= h:
                            continue
                        xrow = &x[n, ci, r, 0]
                        w0 = w[co, ci, ki, 0]
                        w1 = w[co, ci, ki, 1]
                        w2 = w[co, ci, ki, 2]
                        orow[0] += w1 * xrow[0] + w2 * xrow[1]
                        for j in range(1, wd - 1):
                            orow[j] += w0 * xrow[j - 1] + w1 * xrow[j] + w2 * xrow[j + 1]
                        orow[wd - 1] += w0 * xrow[wd - 2] + w1 * xrow[wd - 1]


cdef void _conv3_grad_input(const real[:, :, :, ::1] g, const real[:, :, :, ::1] w,
                            real[:, :, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t n_batch = dx.shape[0], c_in = dx.shape[1], h = dx.shape[2], wd = dx.shape[3]
    cdef Py_ssize_t c_out = w.shape[0]
    cdef Py_ssize_t n, co, ci, ki, i, j, r
    cdef real w0, w1, w2
    cdef real* drow
    cdef const real* grow
    for n in range(n_batch):
        for ci in range(c_in):
            for r in range(h):
                drow = &dx[n, ci, r, 0]
                for co in range(c_out):
                    for ki in range(3):
                        i = r - ki + 1
                        if i < 0 or i >= h:
                            continue
                        grow = &g[n, co, i, 0]
                        w0 = w[co, ci, ki, 0]
                        w1 = w[co, ci, ki, 1]
                        w2 = w[co, ci, ki, 2]
                        drow[0] += w0 * grow[1] + w1 * grow[0]
                        for j in range(1, wd - 1):
                            drow[j] += w0 * grow[j + 1] + w1 * grow[j] + w2 * grow[j - 1]
                        drow[wd - 1] += w1 * grow[wd - 1] + w2 * grow[wd - 2]


cdef void _conv3_grad_weight(const real[:, :, :, ::1] g, const real[:, :, :, ::1] x,
                             real[:, :, :, ::1] dw) noexcept nogil:
    cdef Py_ssize_t n_batch = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = dw.shape[0]
    cdef Py_ssize_t n, co, ci, ki, i, j, r
    cdef real a0, a1, a2, gj
    cdef const real* grow
    cdef const real* xrow
    for co in range(c_out):
        for ci in range(c_in):
            for ki in range(3):
                a0 = 0
                a1 = 0
                a2 = 0
                for n in range(n_batch):
                    for i in range(h):
                        r = i + ki - 1
                        if r < 0 or r >= h:
                            continue
                        grow = &g[n, co, i, 0]
                        xrow = &x[n, ci, r, 0]
                        a1 = a1 + grow[0] * xrow[0]
                        a2 = a2 + grow[0] * xrow[1]
                        for j in range(1, wd - 1):
                            gj = grow[j]
                            a0 = a0 + gj * xrow[j - 1]
                            a1 = a1 + gj * xrow[j]
                            a2 = a2 + gj * xrow[j + 1]
                        a0 = a0 + grow[wd - 1] * xrow[wd - 2]
                        a1 = a1 + grow[wd - 1] * xrow[wd - 1]
                dw[co, ci, ki, 0] = a0
                dw[co, ci, ki, 1] = a1
                dw[co, ci, ki, 2] = a2


cdef inline bint _is_conv3(Py_ssize_t k, int pad, Py_ssize_t wd) noexcept nogil:
    return k == 3 and pad == 1 and wd >= 2


def conv_direct(const real[:, :, :, ::1] x, const real[:, :, :, ::1] w, real[:, :, :, ::1] out,
                int pad):
    """Stride-1 'same'-style correlation accumulated into ``out`` (pre-filled with bias or 0)."""
    cdef Py_ssize_t n_batch = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = out.shape[2], wo = out.shape[3]
    cdef Py_ssize_t n, co, ci, ki, kj, i, j, di, dj, ilo, ihi, jlo, jhi
    cdef real wv
    cdef real* orow
    cdef const real* xrow
    if _is_conv3(k, pad, wd):
        with nogil:
            _conv3_forward(x, w, out)
        return
    with nogil:
        for n in range(n_batch):
            for co in range(c_out):
                for ci in range(c_in):
                    for ki in range(k):
                        di = ki - pad
                        ilo = 0 if di >= 0 else -di
                        ihi = ho if h - di >= ho else h - di
                        for kj in range(k):
                            dj = kj - pad
                            jlo = 0 if dj >= 0 else -dj
                            jhi = wo if wd - dj >= wo else wd - dj
                            wv = w[co, ci, ki, kj]
                            for i in range(ilo, ihi):
                                orow = &out[n, co, i, 0]
                                xrow = &x[n, ci, i + di, dj]
                                for j in range(jlo, jhi):
                                    orow[j] += wv * xrow[j]


def conv_direct_grad_input(const real[:, :, :, ::1] g, const real[:, :, :, ::1] w,
                           real[:, :, :, ::1] dx, int pad):
    cdef Py_ssize_t n_batch = dx.shape[0], c_in = dx.shape[1], h = dx.shape[2], wd = dx.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t n, co, ci, ki, kj, i, j, di, dj, ilo, ihi, jlo, jhi
    cdef real wv
    cdef real* drow
    cdef const real* grow
    if _is_conv3(k, pad, wd):
        with nogil:
            _conv3_grad_input(g, w, dx)
        return
    with nogil:
        for n in range(n_batch):
            for ci in range(c_in):
                for co in range(c_out):
                    for ki in range(k):
                        di = ki - pad
                        ilo = 0 if di >= 0 else -di
                        ihi = ho if h - di >= ho else h - di
                        for kj in range(k):
                            dj = kj - pad
                            jlo = 0 if dj >= 0 else -dj
                            jhi = wo if wd - dj >= wo else wd - dj
                            wv = w[co, ci, ki, kj]
                            for i in range(ilo, ihi):
                                drow = &dx[n, ci, i + di, dj]
                                grow = &g[n, co, i, 0]
                                for j in range(jlo, jhi):
                                    drow[j] += wv * grow[j]


def conv_direct_grad_weight(const real[:, :, :, ::1] g, const real[:, :, :, ::1] x,
                            real[:, :, :, ::1] dw, int pad):
    cdef Py_ssize_t n_batch = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = dw.shape[0], k = dw.shape[2]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t n, co, ci, ki, kj, i, j, di, dj, ilo, ihi, jlo, jhi
    cdef real acc
    cdef const real* grow
    cdef const real* xrow
    if _is_conv3(k, pad, wd):
        with nogil:
            _conv3_grad_weight(g, x, dw)
        return
    with nogil:
        for co in range(c_out):
            for ci in range(c_in):
                for ki in range(k):
                    di = ki - pad
                    ilo = 0 if di >= 0 else -di
                    ihi = ho if h - di >= ho else h - di
                    for kj in range(k):
                        dj = kj - pad
                        jlo = 0 if dj >= 0 else -dj
                        jhi = wo if wd - dj >= wo else wd - dj
                        acc = 0
                        for n in range(n_batch):
                            for i in range(ilo, ihi):
                                grow = &g[n, co, i, 0]
                                xrow = &x[n, ci, i + di, dj]
                                for j in range(jlo, jhi):
                                    acc = acc + grow[j] * xrow[j]
                        dw[co, ci, ki, kj] = acc


def bn_forward(const real[:, :, ::1] x, const double[::1] mean, const double[::1] inv_std,
               const real[::1] gamma, const real[::1] beta, real[:, :, ::1] xhat,
               real[:, :, ::1] out):
    """x viewed as (N, C, HW); writes the normalized input and the affine output."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], hw = x.shape[2]
    cdef Py_ssize_t n, c, i
    cdef real mu, s, ga, be, v
    with nogil:
        for n in range(n_batch):
            for c in range(n_ch):
                mu = <real>mean[c]
                s = <real>inv_std[c]
                ga = gamma[c]
                be = beta[c]
                for i in range(hw):
                    v = (x[n, c, i] - mu) * s
                    xhat[n, c, i] = v
                    out[n, c, i] = v * ga + be


def bn_moments(const real[:, :, ::1] x, double[::1] mean, double[::1] var):
    """Per-channel biased mean and variance, accumulated in double."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], hw = x.shape[2]
    cdef Py_ssize_t n, c, i
    cdef double s, m, d, acc
    cdef double count = n_batch * hw
    with nogil:
        for c in range(n_ch):
            s = 0
            for n in range(n_batch):
                acc = 0
                for i in range(hw):
                    acc = acc + x[n, c, i]
                s += acc
            m = s / count
            s = 0
            for n in range(n_batch):
                acc = 0
                for i in range(hw):
                    d = x[n, c, i] - m
                    acc = acc + d * d
                s += acc
            mean[c] = m
            var[c] = s / count


def bn_backward(const real[:, :, ::1] g, const real[:, :, ::1] xhat, const real[::1] gamma,
                const double[::1] inv_std, double[::1] sum_g, double[::1] sum_gx,
                real[:, :, ::1] dx, bint training):
    """Fills the per-channel sums of g and g*xhat, then dx when ``dx`` is non-empty."""
    cdef Py_ssize_t n_batch = g.shape[0], n_ch = g.shape[1], hw = g.shape[2]
    cdef Py_ssize_t n, c, i
    cdef double a, b
    cdef real ka, kb, kc
    cdef double count = n_batch * hw
    with nogil:
        for c in range(n_ch):
            a = 0
            b = 0
            for n in range(n_batch):
                for i in range(hw):
                    a = a + g[n, c, i]
                    b = b + g[n, c, i] * xhat[n, c, i]
            sum_g[c] = a
            sum_gx[c] = b
        if dx.shape[0] != 0:
            for c in range(n_ch):
                # dx = gamma*inv_std * (g - mean(g) - xhat*mean(g*xhat)) in training mode
                ka = <real>(gamma[c] * inv_std[c])
                kb = <real>(sum_g[c] / count) if training else 0
                kc = <real>(sum_gx[c] / count) if training else 0
                for n in range(n_batch):
                    for i in range(hw):
                        dx[n, c, i] = ka * (g[n, c, i] - kb - xhat[n, c, i] * kc)
