# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused row kernels for the tape engine.

Every kernel works on C-contiguous float64 matrices of shape (rows, cols);
callers reshape to 2-D before dispatching here.  Semantics must match
``_pykernels`` bit-for-bit up to floating-point reassociation.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def softmax_fwd(double[:, ::1] x, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mx, s, v
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef bint masked = mask is not None
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            if masked and not mask[i, j]:
                continue
            if x[i, j] > mx:
                mx = x[i, j]
        if mx == -INFINITY:
            return None
        s = 0.0
        for j in range(m):
            if masked and not mask[i, j]:
                continue
            v = exp(x[i, j] - mx)
            out[i, j] = v
            s += v
        for j in range(m):
            out[i, j] = out[i, j] / s
    return out_arr


def softmax_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    cdef double dot
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    cdef double mu, var, r, d
    out_arr = np.empty((n, m), dtype=np.float64)
    xhat_arr = np.empty((n, m), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            out[i, j] = d * gain[j] + bias[j]
    return out_arr, xhat_arr, rstd_arr


def layer_norm_bwd(double[:, ::1] g, double[:, ::1] xhat, double[::1] rstd, double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], m = g.shape[1], i, j
    cdef double s1, s2, gh
    dx_arr = np.empty((n, m), dtype=np.float64)
    dgain_arr = np.zeros(m, dtype=np.float64)
    dbias_arr = np.zeros(m, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            gh = g[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        s1 /= m
        s2 /= m
        for j in range(m):
            dx[i, j] = rstd[i] * (g[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return dx_arr, dgain_arr, dbias_arr
