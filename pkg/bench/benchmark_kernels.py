"""Benchmark the compiled convolution kernels against the numpy fallback.

Times ``im2col`` and ``col2im`` for the shapes the model actually uses and
prints a per-case speedup table.  Run with ``python3 bench/benchmark_kernels.py``.
"""
import argparse
import time

import numpy as np

from scamnet import kernels
from scamnet.kernels import _npkernels

# (label, C, H, W, k, stride, pad) — the backbone stages plus the RPN conv
CASES = [
    ("stage0 3->16 /2", 3, 64, 64, 3, 2, 1),
    ("stage1 16->32 /2", 16, 32, 32, 3, 2, 1),
    ("stage2 32->32 /2", 32, 16, 16, 3, 2, 1),
    ("stage3 32->32 /2", 32, 8, 8, 3, 2, 1),
    ("rpn conv 3x3", 32, 8, 8, 3, 1, 1),
    ("lateral 1x1", 32, 8, 8, 1, 1, 0),
]


def _time(fn, *args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=30,
                    help="timing repeats per case; the best time is kept")
    args = ap.parse_args()

    if kernels.BACKEND != "cython":
        print("compiled extension not available; benchmarking fallback only")
    rng = np.random.default_rng(0)

    header = f"{'case':<20} {'op':<7} {'numpy (us)':>11} {'cython (us)':>12} {'speedup':>8}"
    print(f"selected backend: {kernels.BACKEND}\n")
    print(header)
    print("-" * len(header))
    for label, C, H, W, k, stride, pad in CASES:
        x = rng.normal(size=(C, H, W))
        cols = _npkernels.im2col(x, k, stride, pad)
        grad = rng.normal(size=cols.shape)

        for op, np_args, c_args in (
            ("im2col", (_npkernels.im2col, x, k, stride, pad),
             (kernels.im2col, x, k, stride, pad)),
            ("col2im", (_npkernels.col2im, grad, C, H, W, k, stride, pad),
             (kernels.col2im, grad, C, H, W, k, stride, pad)),
        ):
            t_np = _time(*np_args, repeats=args.repeats)
            if kernels.BACKEND == "cython":
                t_c = _time(*c_args, repeats=args.repeats)
                print(f"{label:<20} {op:<7} {t_np * 1e6:>11.1f} "
                      f"{t_c * 1e6:>12.1f} {t_np / t_c:>7.2f}x")
            else:
                print(f"{label:<20} {op:<7} {t_np * 1e6:>11.1f} {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
