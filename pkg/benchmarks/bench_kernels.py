"""Compare the compiled Cython kernels against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--batch B] [--size S]

Times each hot kernel at desk-scale shapes and one full forward/backward
training step of the default U-Net under both backends.
"""
import argparse
import timeit

import numpy as np

from fedlppa import kernels
from fedlppa import tensor as T
from fedlppa.model import build_model


def kernel_cases(batch, size, rng):
    c = 8
    x = rng.standard_normal((batch, c, size, size)).astype(np.float32)
    w = rng.standard_normal((c, c, 3, 3)).astype(np.float32)
    cols = kernels.im2col(x, 3, 1, 1)
    _, arg = kernels.maxpool2x2(x)
    g_half = rng.standard_normal((batch, c, size // 2, size // 2)).astype(np.float32)
    mean, var = kernels.bn_moments(x)
    inv_std = 1.0 / np.sqrt(var + 1e-5)
    gamma = np.ones(c, np.float32)
    beta = np.zeros(c, np.float32)
    xhat, _ = kernels.bn_forward(x, mean, inv_std, gamma, beta)
    out = np.empty((batch, c, size, size), np.float32)

    cases = {
        "im2col 3x3": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im 3x3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "maxpool2x2": lambda: kernels.maxpool2x2(x),
        "maxpool2x2 backward": lambda: kernels.maxpool2x2_backward(g_half, arg, x.shape),
        "leaky_relu": lambda: kernels.leaky_relu(x, 0.01),
        "leaky_relu backward": lambda: kernels.leaky_relu_backward(x, x, 0.01),
        "bn moments": lambda: kernels.bn_moments(x),
        "bn forward": lambda: kernels.bn_forward(x, mean, inv_std, gamma, beta),
        "bn backward": lambda: kernels.bn_backward(x, xhat, gamma, inv_std, True),
    }
    if kernels.has_direct_conv():
        cases["conv direct 3x3"] = lambda: kernels.conv_direct(x, w, out, 1)
    return cases


def train_step(batch, size):
    model = build_model(num_clients=4, image_size=size, rng_seed=0)
    x = np.random.default_rng(0).random((batch, 1, size, size), dtype=np.float32)

    def run():
        model.zero_grad()
        p_main, p_aux = model.forward(x, client_id=0, training=True)
        T.sum_(T.mul(p_main, p_aux)).backward()

    return run


def best_of(fn, repeat):
    fn()
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-6)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args(argv)

    backends = ["python"]
    try:
        kernels.use_backend("cython")
        backends.append("cython")
    except ImportError:
        print("compiled kernels unavailable; timing the fallback only")

    rng = np.random.default_rng(0)
    timings = {}
    for name in backends:
        kernels.use_backend(name)
        cases = kernel_cases(args.batch, args.size, rng)
        cases["train step (fwd+bwd)"] = train_step(args.batch, args.size)
        timings[name] = {k: best_of(fn, args.repeat) for k, fn in cases.items()}

    print(f"batch {args.batch}, {args.size}x{args.size}, best of {args.repeat}")
    print(f"{'kernel':24s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for k in timings[backends[-1]]:
        py = timings["python"].get(k)
        cy = timings.get("cython", {}).get(k)
        cols = [f"{1e3 * py:10.3f}" if py is not None else f"{'-':>10s}",
                f"{1e3 * cy:10.3f}" if cy is not None else f"{'-':>10s}",
                f"{py / cy:7.1f}x" if py is not None and cy is not None else f"{'-':>8s}"]
        print(f"{k:24s} " + " ".join(cols))


if __name__ == "__main__":
    main()
