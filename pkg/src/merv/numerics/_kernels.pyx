# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for adaptive pooling.

Accumulation runs in double precision with a fixed loop order, so results are
reproducible and agree with the numpy fallback after the final cast.
"""
import numpy as np
cimport numpy as cnp

from . import _kernels_py as _py

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _start(Py_ssize_t i, Py_ssize_t n_in, Py_ssize_t n_out) nogil:
    return (i * n_in) // n_out


cdef inline Py_ssize_t _stop(Py_ssize_t i, Py_ssize_t n_in, Py_ssize_t n_out) nogil:
    return ((i + 1) * n_in + n_out - 1) // n_out


def _pool_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] out):
    cdef Py_ssize_t T = x.shape[0], H = x.shape[1], W = x.shape[2], D = x.shape[3]
    cdef Py_ssize_t to = out.shape[0], ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t a, b, c, f, r, s, k
    cdef Py_ssize_t f0, f1, r0, r1, s0, s1
    cdef double inv
    cdef double[::1] acc = np.zeros(D, dtype=np.float64)
    with nogil:
        for a in range(to):
            f0 = _start(a, T, to)
            f1 = _stop(a, T, to)
            for b in range(ho):
                r0 = _start(b, H, ho)
                r1 = _stop(b, H, ho)
                for c in range(wo):
                    s0 = _start(c, W, wo)
                    s1 = _stop(c, W, wo)
                    for k in range(D):
                        acc[k] = 0.0
                    for f in range(f0, f1):
                        for r in range(r0, r1):
                            for s in range(s0, s1):
                                for k in range(D):
                                    acc[k] += x[f, r, s, k]
                    inv = 1.0 / ((f1 - f0) * (r1 - r0) * (s1 - s0))
                    for k in range(D):
                        out[a, b, c, k] = <real>(acc[k] * inv)


def _pool_backward(real[:, :, :, ::1] g, real[:, :, :, ::1] gx):
    cdef Py_ssize_t T = gx.shape[0], H = gx.shape[1], W = gx.shape[2], D = gx.shape[3]
    cdef Py_ssize_t to = g.shape[0], ho = g.shape[1], wo = g.shape[2]
    cdef Py_ssize_t a, b, c, f, r, s, k
    cdef Py_ssize_t f0, f1, r0, r1, s0, s1
    cdef double inv
    cdef double[:, :, :, ::1] acc = np.zeros((T, H, W, D), dtype=np.float64)
    with nogil:
        for a in range(to):
            f0 = _start(a, T, to)
            f1 = _stop(a, T, to)
            for b in range(ho):
                r0 = _start(b, H, ho)
                r1 = _stop(b, H, ho)
                for c in range(wo):
                    s0 = _start(c, W, wo)
                    s1 = _stop(c, W, wo)
                    inv = 1.0 / ((f1 - f0) * (r1 - r0) * (s1 - s0))
                    for f in range(f0, f1):
                        for r in range(r0, r1):
                            for s in range(s0, s1):
                                for k in range(D):
                                    acc[f, r, s, k] += g[a, b, c, k] * inv
        for f in range(T):
            for r in range(H):
                for s in range(W):
                    for k in range(D):
                        gx[f, r, s, k] = <real>acc[f, r, s, k]


def pool_forward(x, int t_out, int h_out, int w_out):
    out = np.empty((t_out, h_out, w_out, x.shape[3]), dtype=x.dtype)
    _pool_forward(x, out)
    return out


def pool_backward(g, int T, int H, int W):
    gx = np.empty((T, H, W, g.shape[3]), dtype=g.dtype)
    _pool_backward(g, gx)
    return gx


# Correlation is a sum of one matrix product per kernel offset; BLAS beats a
# scalar loop here, so both backends share the numpy version.
conv3d_into = _py.conv3d_into
