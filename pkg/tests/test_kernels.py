import numpy as np
import pytest

from fedlppa import kernels
from fedlppa import tensor as T
from fedlppa.tensor import Tensor

from oracles import conv2d_loops

try:
    from fedlppa import _kernels  # noqa: F401
    HAVE_COMPILED = True
except ImportError:
    HAVE_COMPILED = False

needs_compiled = pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels not built")


@pytest.fixture
def backend():
    """Run a callable under a named backend and restore the previous one."""
    def run(name, fn, *args):
        previous = kernels.use_backend(name)
        try:
            return fn(*args)
        finally:
            kernels.use_backend(previous)
    return run


def _both(backend, fn, *args):
    return backend("python", fn, *args), backend("cython", fn, *args)


def _assert_same(a, b, dtype):
    tol = 1e-5 if dtype == np.float32 else 1e-12
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _assert_same(x, y, dtype)
    elif a is None:
        assert b is None
    else:
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)


DTYPES = [np.float32, np.float64]


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 2, 5)])
def test_im2col_col2im_backends_agree(backend, dtype, stride, pad, k):
    x = np.random.default_rng(0).standard_normal((2, 3, 9, 8)).astype(dtype)
    a, b = _both(backend, kernels.im2col, x, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    da, db = _both(backend, kernels.col2im, a, x.shape, k, stride, pad)
    _assert_same(da, db, dtype)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 6, 7))
    cols = kernels.im2col(x, 3, 2, 1)
    y = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, x.shape, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_maxpool_backends_agree(backend, dtype):
    x = np.random.default_rng(2).standard_normal((2, 3, 6, 8)).astype(dtype)
    (oa, arga), (ob, argb) = _both(backend, kernels.maxpool2x2, x)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(arga, argb)
    g = np.ones_like(oa)
    np.testing.assert_array_equal(*_both(backend, kernels.maxpool2x2_backward, g, arga, x.shape))


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_leaky_relu_backends_agree(backend, dtype):
    x = np.random.default_rng(3).standard_normal((4, 5, 6)).astype(dtype)
    np.testing.assert_array_equal(*_both(backend, kernels.leaky_relu, x, 0.01))
    g = np.random.default_rng(4).standard_normal(x.shape).astype(dtype)
    np.testing.assert_array_equal(*_both(backend, kernels.leaky_relu_backward, x, g, 0.01))


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_kernels_backends_agree(backend, dtype, training):
    rng = np.random.default_rng(5)
    x = (rng.standard_normal((4, 3, 5, 5)) * 3 + 1).astype(dtype)
    _assert_same(*_both(backend, kernels.bn_moments, x), dtype=np.float64 if dtype == np.float64 else dtype)
    mean, var = kernels.bn_moments(x)
    inv_std = 1.0 / np.sqrt(var + 1e-5)
    gamma, beta = rng.uniform(0.5, 1.5, 3).astype(dtype), rng.standard_normal(3).astype(dtype)
    fa, fb = _both(backend, kernels.bn_forward, x, mean, inv_std, gamma, beta)
    _assert_same(fa, fb, dtype)
    g = rng.standard_normal(x.shape).astype(dtype)
    ba, bb = _both(backend, kernels.bn_backward, g, fa[0], gamma, inv_std, training)
    _assert_same(ba, bb, dtype)
    na, nb = _both(backend, kernels.bn_backward, g, fa[0], gamma, inv_std, training, False)
    assert na[0] is None and nb[0] is None
    _assert_same(na[1:], ba[1:], dtype)


def test_bn_moments_match_numpy():
    x = np.random.default_rng(6).standard_normal((3, 4, 5, 5)) * 10 + 100
    mean, var = kernels.bn_moments(x.astype(np.float32))
    np.testing.assert_allclose(mean, x.astype(np.float32).mean(axis=(0, 2, 3), dtype=np.float64), rtol=1e-7)
    np.testing.assert_allclose(var, x.astype(np.float32).astype(np.float64).var(axis=(0, 2, 3)), rtol=1e-5)


@needs_compiled
@pytest.mark.parametrize("dtype", DTYPES)
def test_direct_conv_matches_oracle_and_lowered_path(backend, dtype):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 2, 48, 48)).astype(dtype)
    w = rng.standard_normal((3, 2, 3, 3)).astype(dtype)
    assert backend("cython", kernels.prefer_direct, 2, 3, 48, 48, 3, 1, 1)
    assert not backend("python", kernels.prefer_direct, 2, 3, 48, 48, 3, 1, 1)

    def fwd_bwd():
        xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
        y = T.conv2d(xt, wt, padding=1)
        T.sum_(T.mul(y, y)).backward()
        return y.data, xt.grad, wt.grad

    lowered, direct = _both(backend, fwd_bwd)
    tol = 2e-4 if dtype == np.float32 else 1e-10
    for a, b in zip(lowered, direct):
        np.testing.assert_allclose(a, b, rtol=tol, atol=tol)
    np.testing.assert_allclose(direct[0][0], conv2d_loops(x[0].astype(np.float64), w.astype(np.float64),
                                                          None, 1, 1), rtol=tol, atol=tol)


def test_backend_switch_rejects_unknown_name():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_python_fallback_runs_model_step(backend):
    from fedlppa.model import build_model

    def step():
        m = build_model(num_classes=2, num_clients=2, image_size=32, channels_base=4, depth=3, rng_seed=0)
        x = np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32)
        p_main, p_aux = m.forward(x, client_id=1, training=True)
        T.sum_(T.mul(p_main, p_aux)).backward()
        return p_main.data, m.flat_grad("theta")

    a = backend("python", step)
    if HAVE_COMPILED:
        b = backend("cython", step)
        np.testing.assert_allclose(a[0], b[0], atol=1e-5)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-3, atol=1e-4)
    assert np.isfinite(a[1]).all()
