# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels for the convolution inner loop.

The matrix products themselves go through BLAS either way; what these kernels
speed up is the im2col gather and the col2im scatter-add, which are the
per-step hot spots at small image sizes.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(double[:, :, ::1] x, int k, int stride, int pad):
    """Unfold (C,H,W) into a (C*k*k, oh*ow) patch matrix."""
    cdef int C = x.shape[0]
    cdef int H = x.shape[1]
    cdef int W = x.shape[2]
    cdef int oh = (H + 2 * pad - k) // stride + 1
    cdef int ow = (W + 2 * pad - k) // stride + 1
    out_arr = np.zeros((C * k * k, oh * ow), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef int c, ki, kj, i, j, row, hi, wj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for i in range(oh):
                    hi = i * stride + ki - pad
                    if hi < 0 or hi >= H:
                        continue
                    for j in range(ow):
                        wj = j * stride + kj - pad
                        if 0 <= wj < W:
                            out[row, i * ow + j] = x[c, hi, wj]
    return out_arr


def col2im(double[:, ::1] cols, int C, int H, int W, int k, int stride, int pad):
    """Scatter-add a (C*k*k, oh*ow) patch-gradient matrix back to (C,H,W)."""
    cdef int oh = (H + 2 * pad - k) // stride + 1
    cdef int ow = (W + 2 * pad - k) // stride + 1
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef int c, ki, kj, i, j, row, hi, wj
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for i in range(oh):
                    hi = i * stride + ki - pad
                    if hi < 0 or hi >= H:
                        continue
                    for j in range(ow):
                        wj = j * stride + kj - pad
                        if 0 <= wj < W:
                            out[c, hi, wj] += cols[row, i * ow + j]
    return out_arr
