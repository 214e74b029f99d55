# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels: layer norm, softmax, tanh-GELU (forward and backward).

Reductions accumulate in double and run in a fixed order, so results are
deterministic for a given input.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, tanh

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, n), dtype=dtype)
    xhat_arr = np.empty((rows, n), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, d, r
    with nogil:
        for i in range(rows):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mean
                var += d * d
            var /= n
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(n):
                d = (x[i, j] - mean) * r
                xhat[i, j] = <real>d
                y[i, j] = <real>(d * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t rows = dy.shape[0], n = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, n), dtype=dtype)
    dgain_acc = np.zeros(n, dtype=np.float64)
    dbias_acc = np.zeros(n, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_acc
    cdef double[::1] dbias = dbias_acc
    cdef double mean_d, mean_dx, g
    with nogil:
        for i in range(rows):
            mean_d = 0.0
            mean_dx = 0.0
            for j in range(n):
                g = dy[i, j] * gain[j]
                mean_d += g
                mean_dx += g * xhat[i, j]
                dgain[j] += dy[i, j] * xhat[i, j]
                dbias[j] += dy[i, j]
            mean_d /= n
            mean_dx /= n
            for j in range(n):
                g = dy[i, j] * gain[j]
                dx[i, j] = <real>((g - mean_d - xhat[i, j] * mean_dx) * rstd[i])
    return dx_arr, dgain_acc.astype(dtype), dbias_acc.astype(dtype)


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, n), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef double m, s, e
    with nogil:
        for i in range(rows):
            m = x[i, 0]
            for j in range(1, n):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(n):
                e = exp(x[i, j] - m)
                y[i, j] = <real>e
                s += e
            for j in range(n):
                y[i, j] = <real>(y[i, j] / s)
    return y_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, n), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double dot
    with nogil:
        for i in range(rows):
            dot = 0.0
            for j in range(n):
                dot += dy[i, j] * y[i, j]
            for j in range(n):
                dx[i, j] = <real>(y[i, j] * (dy[i, j] - dot))
    return dx_arr


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, n), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef double v
    with nogil:
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                y[i, j] = <real>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))
    return y_arr


def gelu_bwd(real[:, ::1] x, real[:, ::1] dy):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, n), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef double v, t, du
    with nogil:
        for i in range(rows):
            for j in range(n):
                v = x[i, j]
                t = tanh(GELU_C * (v + GELU_A * v * v * v))
                du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                dx[i, j] = <real>(dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return dx_arr
