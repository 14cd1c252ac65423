import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedlppa import tensor as T
from fedlppa.tensor import Tensor, no_grad

from oracles import conv2d_loops, finite_difference, relative_error, softmax_row

GRAD_TOL = 1e-4
INSTANCES = 20


def check_gradients(fn, arrays, rng=None, max_coords=40):
    """Autodiff vs central differences for every input of a scalar-valued ``fn``."""
    rng = np.random.default_rng(0) if rng is None else rng
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    out.backward()

    def numeric(*xs):
        with no_grad():
            return float(fn(*[Tensor(x) for x in xs]).data)

    worst = 0.0
    for k, t in enumerate(tensors):
        work = [a.copy() for a in arrays]
        coords = None
        if work[k].size > max_coords:
            coords = rng.choice(work[k].size, max_coords, replace=False)
        fd = finite_difference(numeric, work, k, coords=coords)
        worst = max(worst, relative_error(t.grad, fd))
    return worst


def _weights(shape, rng):
    # fixed random projection so non-scalar ops reduce to a scalar with rich gradients
    return rng.standard_normal(shape)


def _project(y, w):
    return T.sum_(T.mul(y, w))


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _distinct_windows(rng, shape):
    # permuted grid values keep every 2x2 pooling window free of near-ties
    return rng.permutation(np.arange(int(np.prod(shape)), dtype=np.float64)).reshape(shape) * 0.1


def _op_cases():
    """(name, builder) where builder(rng) -> (fn, arrays)."""

    def binary(op):
        def build(rng):
            a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
            w = _weights((3, 4), rng)
            return (lambda x, y: _project(op(x, y), w)), [a, b]
        return build

    def div(rng):
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
        w = _weights((3, 4), rng)
        return (lambda x, y: _project(T.div(x, y), w)), [a, b]

    def broadcast_add(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))
        w = _weights((2, 3, 4), rng)
        return (lambda x, y: _project(T.add(x, y), w)), [a, b]

    def matmul(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        w = _weights((2, 3, 5), rng)
        return (lambda x, y: _project(T.matmul(x, y), w)), [a, b]

    def conv(stride, pad, k):
        def build(rng):
            x = rng.standard_normal((2, 3, 6, 6))
            wt = rng.standard_normal((4, 3, k, k)) * 0.5
            b = rng.standard_normal(4)
            ho = (6 + 2 * pad - k) // stride + 1
            w = _weights((2, 4, ho, ho), rng)
            return (lambda x_, w_, b_: _project(T.conv2d(x_, w_, b_, stride=stride, padding=pad), w)), [x, wt, b]
        return build

    def conv_direct(rng):
        # large plane, few channels: routed to the compiled direct kernel when present
        x = rng.standard_normal((1, 2, 48, 48))
        wt = rng.standard_normal((2, 2, 3, 3)) * 0.5
        b = rng.standard_normal(2)
        w = _weights((1, 2, 48, 48), rng)
        return (lambda x_, w_, b_: _project(T.conv2d(x_, w_, b_, padding=1), w)), [x, wt, b]

    def unary(op, gen=None):
        def build(rng):
            x = gen(rng) if gen else rng.standard_normal((3, 5))
            w = _weights(x.shape, rng)
            return (lambda x_: _project(op(x_), w)), [x]
        return build

    def softmax_axis(rng):
        x = rng.standard_normal((2, 3, 4))
        w = _weights(x.shape, rng)
        return (lambda x_: _project(T.softmax(x_, axis=1), w)), [x]

    def maxpool(rng):
        x = _distinct_windows(rng, (2, 2, 4, 6))
        w = _weights((2, 2, 2, 3), rng)
        return (lambda x_: _project(T.max_pool2x2(x_), w)), [x]

    def upsample(rng):
        x = rng.standard_normal((2, 2, 3, 3))
        w = _weights((2, 2, 6, 6), rng)
        return (lambda x_: _project(T.upsample_nearest(x_, 2), w)), [x]

    def batchnorm(training):
        def build(rng):
            x = rng.standard_normal((4, 3, 3, 3)) * 2 + 1
            g, b = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
            rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
            w = _weights(x.shape, rng)

            def fn(x_, g_, b_):
                return _project(T.batch_norm(x_, g_, b_, rm.copy(), rv.copy(), training), w)
            return fn, [x, g, b]
        return build

    def concat(rng):
        a, b = rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 3))
        w = _weights((2, 5, 3), rng)
        return (lambda x, y: _project(T.concat([x, y], axis=1), w)), [a, b]

    def reshape_transpose(rng):
        x = rng.standard_normal((2, 3, 4))
        w = _weights((4, 6), rng)
        return (lambda x_: _project(T.reshape(T.transpose(x_, (2, 0, 1)), (4, 6)), w)), [x]

    def reductions(rng):
        x = rng.standard_normal((3, 4, 5))
        w = _weights((3, 5), rng)
        return (lambda x_: T.add(_project(T.sum_(x_, axis=1), w), T.mean(T.mul(x_, x_)))), [x]

    def clamp(rng):
        x = rng.uniform(-1, 2, (4, 5))
        x = np.where(np.abs(x) < 0.05, 0.1, x)
        x = np.where(np.abs(x - 1) < 0.05, 0.9, x)
        w = _weights(x.shape, rng)
        return (lambda x_: _project(T.clamp(x_, 0.0, 1.0), w)), [x]

    def getitem(rng):
        x = rng.standard_normal((3, 4))
        idx = (np.array([0, 2, 2]), np.array([1, 3, 3]))
        return (lambda x_: T.sum_(T.mul(T.getitem(x_, idx), np.array([1.0, 2.0, -1.0])))), [x]

    return {
        "add": binary(T.add), "sub": binary(T.sub), "mul": binary(T.mul), "div": div,
        "add_broadcast": broadcast_add, "matmul": matmul,
        "conv2d_same": conv(1, 1, 3), "conv2d_stride2": conv(2, 1, 3), "conv2d_valid": conv(1, 0, 3),
        "conv2d_pointwise": conv(1, 0, 1), "conv2d_direct": conv_direct,
        "relu": unary(T.relu, lambda r: _away_from_zero(r, (3, 5))),
        "leaky_relu": unary(T.leaky_relu, lambda r: _away_from_zero(r, (3, 5))),
        "sigmoid": unary(T.sigmoid), "exp": unary(T.exp),
        "log": unary(T.log, lambda r: r.uniform(0.3, 3.0, (3, 5))),
        "softmax": softmax_axis, "softmax_rows": unary(T.softmax_rows),
        "max_pool2x2": maxpool, "upsample_nearest": upsample,
        "batch_norm_train": batchnorm(True), "batch_norm_eval": batchnorm(False),
        "concat": concat, "reshape_transpose": reshape_transpose, "sum_mean": reductions,
        "clamp": clamp, "getitem": getitem,
    }


CASES = _op_cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    worst = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng([7, i])
        fn, arrays = CASES[name](rng)
        worst = max(worst, check_gradients(fn, arrays, rng))
    assert worst < GRAD_TOL, f"{name}: relative error {worst:.2e}"


def test_composite_conv_softmax_dice_gradient():
    from fedlppa.losses import dice_loss

    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3)) * 0.5
    target = rng.integers(0, 2, (1, 4, 4))

    def fn(x_, w_):
        return dice_loss(T.softmax(T.conv2d(x_, w_, padding=1), axis=1), target)

    assert check_gradients(fn, [x, w], rng) < GRAD_TOL


# -- softmax ---------------------------------------------------------------

def test_softmax_uniform_logits():
    out = T.softmax_rows(Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-12)


def test_softmax_known_values():
    out = T.softmax_rows(Tensor(np.array([[1.0, 2.0, 3.0]]))).data[0]
    np.testing.assert_allclose(out, [0.09003, 0.24473, 0.66524], atol=5e-6)
    np.testing.assert_allclose(out, softmax_row([1.0, 2.0, 3.0]), atol=1e-12)


def test_softmax_rows_rejects_empty_and_non_matrix():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(np.zeros(3)))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_are_shift_invariant_simplices(x, c):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-5)
    shifted = T.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(out, shifted, atol=1e-9)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax_rows(Tensor(np.array([[1000.0, 1001.0]], dtype=np.float32))).data
    assert np.all(np.isfinite(out))


# -- convolution -----------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[np.arange(3), np.arange(3)] = 1
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_zero_kernel():
    x = np.random.default_rng(0).standard_normal((2, 6, 6)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.zeros((4, 2, 3, 3), np.float32)), padding=1).data
    assert out.shape == (4, 6, 6) and not out.any()


@pytest.mark.parametrize("stride,pad,shape", [(1, 1, (1, 3, 3)), (1, 0, (2, 5, 6)), (2, 1, (3, 7, 7)),
                                              (1, 2, (1, 4, 4))])
def test_conv_matches_loop_oracle(stride, pad, shape):
    rng = np.random.default_rng(11)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((2, shape[0], 3, 3))
    b = rng.standard_normal(2)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-10)


def test_conv_random_1x3x3_against_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 3, 3))
    w = rng.standard_normal((1, 1, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, None, 1, 1), atol=1e-12)


def test_conv_direct_path_matches_oracle():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 48, 48))
    w = rng.standard_normal((3, 2, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, None, 1, 1), atol=1e-10)


def test_conv_output_size_formula():
    x = Tensor(np.zeros((2, 3, 9, 7), np.float32))
    w = Tensor(np.zeros((5, 3, 3, 3), np.float32))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (2, 5, 5, 4)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))


# -- backward ----------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_half_square_is_identity():
    data = np.random.default_rng(1).standard_normal((5,))
    x = Tensor(data, requires_grad=True)
    T.mul(T.sum_(T.mul(x, x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, data, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(x, 2.0).backward()


def test_backward_accumulates_over_shared_subgraphs():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = T.mul(x, x)
    T.sum_(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.mul(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_float32_stays_float32_with_python_scalars():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    assert T.mean(x).dtype == np.float32
    assert (1.0 - x * 2.0 / 3.0).dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(2, 6),
                                    st.integers(2, 6)), elements=st.floats(-10, 10, width=32)))
def test_forward_ops_keep_finite_values(x):
    t = Tensor(x)
    n, c, h, w = x.shape
    out = T.softmax(T.leaky_relu(T.conv2d(t, Tensor(np.ones((2, c, 3, 3), np.float32)), padding=1)), axis=1)
    assert np.all(np.isfinite(out.data))
    assert np.isfinite(T.sigmoid(t).data).all()


def test_batch_norm_updates_running_stats_only_in_training():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((8, 2, 3, 3)) * 3 + 2)
    rm, rv = np.zeros(2), np.ones(2)
    T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.1)
    m = 8 * 9
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=(0, 2, 3)) * m / (m - 1))
    before = (rm.copy(), rv.copy())
    out = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_array_equal(rm, before[0])
    expect = (x.data - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_clamp_is_exact_projection_onto_unit_interval():
    w = np.array([-0.5, 0.0, 0.3, 1.0, 1.7])
    np.testing.assert_array_equal(T.clamp(Tensor(w), 0.0, 1.0).data, np.maximum(0, np.minimum(1, w)))
