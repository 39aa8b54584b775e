"""Pure-python (numpy) convolution kernels: the fallback lane.

im2col + BLAS matmul. Valid padding only, square kernels, float64
throughout. The compiled lane in `_native.pyx` implements the same four
signatures; `aftl._kernels` picks one at import time.
"""

import numpy as np

BACKEND = "python"


def output_hw(h, w, kernel, stride):
    """Spatial output size of a valid convolution."""
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def _im2col(x, kernel, stride):
    # (n, ci, h, w) -> (n, ci, k, k, oh, ow) patch tensor; views stacked into
    # a contiguous block so tensordot can run as one GEMM.
    n, ci, h, w = x.shape
    oh, ow = output_hw(h, w, kernel, stride)
    cols = np.empty((n, ci, kernel, kernel, oh, ow), dtype=np.float64)
    for u in range(kernel):
        for v in range(kernel):
            cols[:, :, u, v] = x[:, :, u:u + stride * oh:stride,
                                 v:v + stride * ow:stride]
    return cols


def conv2d_forward(x, w, b, stride):
    """x (n,ci,h,w), w (co,ci,k,k), b (co,) -> y (n,co,oh,ow)."""
    kernel = w.shape[2]
    cols = _im2col(x, kernel, stride)
    # (n, oh, ow, co) <- contract over (ci, k, k)
    y = np.tensordot(cols, w, axes=([1, 2, 3], [1, 2, 3]))
    y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, gy, stride):
    """Gradients of a valid conv: returns (gx, gw, gb)."""
    kernel = w.shape[2]
    n, ci, h, wd = x.shape
    oh, ow = output_hw(h, wd, kernel, stride)
    cols = _im2col(x, kernel, stride)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 4, 5]))
    gb = gy.sum(axis=(0, 2, 3))
    # col2im scatter-add of the patch gradients
    gcols = np.tensordot(w, gy, axes=([0], [1]))        # (ci,k,k,n,oh,ow)
    gcols = gcols.transpose(3, 0, 1, 2, 4, 5)           # (n,ci,k,k,oh,ow)
    gx = np.zeros_like(x)
    for u in range(kernel):
        for v in range(kernel):
            gx[:, :, u:u + stride * oh:stride,
               v:v + stride * ow:stride] += gcols[:, :, u, v]
    return gx, gw, gb
