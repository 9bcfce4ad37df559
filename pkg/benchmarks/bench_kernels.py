"""Time the numba kernels against their numpy fallbacks on desk-scale shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from eenas import _kernels as K

# (batch, channels, height, width, kernel, stride, pad)
CONV_SHAPES = [(64, 3, 16, 16, 3, 1, 1), (64, 16, 16, 16, 5, 1, 2), (64, 32, 8, 8, 3, 2, 1)]
POOL_SHAPES = [(64, 16, 16, 16, 2), (64, 32, 8, 8, 4)]


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation for numba)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n, c, h, w, k, s, p in CONV_SHAPES:
        x = rng.normal(size=(n, c, h, w))
        cols = K.im2col_numpy(x, k, s, p)
        label = f"{n}x{c}x{h}x{w} k{k} s{s} p{p}"
        rows.append(("im2col", label, _best(lambda: K.im2col_numpy(x, k, s, p), repeat), _best(lambda: K.im2col_numba(x, k, s, p), repeat)))
        rows.append(
            (
                "col2im",
                label,
                _best(lambda: K.col2im_numpy(cols, x.shape, k, s, p), repeat),
                _best(lambda: K.col2im_numba(cols, x.shape, k, s, p), repeat),
            )
        )
    for n, c, h, w, win in POOL_SHAPES:
        x = rng.normal(size=(n, c, h, w))
        out, arg = K.maxpool_forward_numpy(x, win)
        g = rng.normal(size=out.shape)
        label = f"{n}x{c}x{h}x{w} w{win}"
        rows.append(("maxpool fwd", label, _best(lambda: K.maxpool_forward_numpy(x, win), repeat), _best(lambda: K.maxpool_forward_numba(x, win), repeat)))
        rows.append(
            (
                "maxpool bwd",
                label,
                _best(lambda: K.maxpool_backward_numpy(g, arg, x.shape, win), repeat),
                _best(lambda: K.maxpool_backward_numba(g, arg, x.shape, win), repeat),
            )
        )
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':<12} {'shape':<24} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, label, t_np, t_nb in run(args.repeat):
        print(f"{name:<12} {label:<24} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>8.2f}x")


if __name__ == "__main__":
    main()
