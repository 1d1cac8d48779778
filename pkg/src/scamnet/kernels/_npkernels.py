"""Pure-numpy fallback for the convolution gather/scatter kernels.

Built from k*k slice copies / slice adds, so it stays vectorized; the compiled
extension is still noticeably faster because it skips the padding copies and
intermediate buffers. Results are float64 on both paths (summation order in
col2im may differ by rounding when windows overlap).
"""
from __future__ import annotations

import numpy as np


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    out = np.empty((C, k, k, oh, ow), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            out[:, ki, kj] = x[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride]
    return out.reshape(C * k * k, oh * ow)


def col2im(cols: np.ndarray, C: int, H: int, W: int, k: int, stride: int, pad: int) -> np.ndarray:
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    cols = cols.reshape(C, k, k, oh, ow)
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=np.float64)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[:, ki, kj]
    if pad:
        xp = xp[:, pad : pad + H, pad : pad + W]
    return np.ascontiguousarray(xp)
