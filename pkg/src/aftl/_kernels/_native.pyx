# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled convolution kernels: the native lane.

Direct (non-im2col) loops over typed memoryviews; no numpy C API, no BLAS,
fixed summation order, so results are reproducible bit-for-bit within this
lane. Signatures mirror `pykernels`.
"""

import numpy as np

BACKEND = "native"


def output_hw(h, w, kernel, stride):
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   double[::1] b, int stride):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (wd - k) // stride + 1
    out = np.empty((n, co, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t i, oc, c, r, s, u, v
    cdef Py_ssize_t rbase, cbase
    cdef double acc
    with nogil:
        for i in range(n):
            for oc in range(co):
                for r in range(oh):
                    rbase = r * stride
                    for s in range(ow):
                        cbase = s * stride
                        acc = b[oc]
                        for c in range(ci):
                            for u in range(k):
                                for v in range(k):
                                    acc = acc + w[oc, c, u, v] * x[i, c, rbase + u, cbase + v]
                        y[i, oc, r, s] = acc
    return out


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] gy, int stride):
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = gy.shape[2], ow = gy.shape[3]
    gx_arr = np.zeros((n, ci, h, wd), dtype=np.float64)
    gw_arr = np.zeros((co, ci, k, k), dtype=np.float64)
    gb_arr = np.zeros(co, dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef Py_ssize_t i, oc, c, r, s, u, v
    cdef Py_ssize_t rbase, cbase
    cdef double g
    with nogil:
        for i in range(n):
            for oc in range(co):
                for r in range(oh):
                    rbase = r * stride
                    for s in range(ow):
                        cbase = s * stride
                        g = gy[i, oc, r, s]
                        gb[oc] = gb[oc] + g
                        for c in range(ci):
                            for u in range(k):
                                for v in range(k):
                                    gw[oc, c, u, v] = gw[oc, c, u, v] + x[i, c, rbase + u, cbase + v] * g
                                    gx[i, c, rbase + u, cbase + v] = gx[i, c, rbase + u, cbase + v] + w[oc, c, u, v] * g
    return gx_arr, gw_arr, gb_arr
