# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, pow, tanh

cnp.import_array()


def log_softmax(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    cdef double m, s
    out_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            s += exp(x[i, j] - m)
        s = log(s)
        for j in range(v):
            out[i, j] = (x[i, j] - m) - s
    return out_arr


def log_softmax_backward(const double[:, ::1] out, const double[:, ::1] g):
    cdef Py_ssize_t n = out.shape[0], v = out.shape[1], i, j
    cdef double s
    gx_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += g[i, j]
        for j in range(v):
            gx[i, j] = g[i, j] - exp(out[i, j]) * s
    return gx_arr


def softmax(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    cdef double m, s
    p_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(v):
            p[i, j] = exp(x[i, j] - m)
            s += p[i, j]
        for j in range(v):
            p[i, j] = p[i, j] / s
    return p_arr


def softmax_backward(const double[:, ::1] p, const double[:, ::1] g):
    cdef Py_ssize_t n = p.shape[0], v = p.shape[1], i, j
    cdef double s
    gx_arr = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    for i in range(n):
        s = 0.0
        for j in range(v):
            s += p[i, j] * g[i, j]
        for j in range(v):
            gx[i, j] = p[i, j] * (g[i, j] - s)
    return gx_arr


def row_entropy(const double[:, ::1] logp):
    cdef Py_ssize_t n = logp.shape[0], v = logp.shape[1], i, j
    cdef double s, p
    h_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] h = h_arr
    for i in range(n):
        s = 0.0
        for j in range(v):
            p = exp(logp[i, j])
            if p > 0.0:
                s -= p * logp[i, j]
        h[i] = s
    return h_arr


def layer_norm(const double[:, ::1] x, const double[::1] gamma,
               const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, r, c
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xhat[i, j] = (x[i, j] - mu) * r
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_backward(const double[:, ::1] g, const double[:, ::1] xhat,
                        const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double s1, s2, gh
    gx_arr = np.empty((n, d), dtype=np.float64)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            dgamma[j] += g[i, j] * xhat[i, j]
            dbeta[j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return gx_arr, dgamma_arr, dbeta_arr


def categorical(const double[:, ::1] probs, const double[::1] u):
    cdef Py_ssize_t n = probs.shape[0], v = probs.shape[1], i, j
    cdef double total, acc, target
    idx_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = idx_arr
    for i in range(n):
        total = 0.0
        for j in range(v):
            total += probs[i, j]
        target = u[i] * total
        acc = 0.0
        idx[i] = v - 1
        for j in range(v):
            acc += probs[i, j]
            if acc > target:
                idx[i] = j
                break
    return idx_arr


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps,
                double weight_decay, long step):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double decay = 1.0 - lr * weight_decay
    for i in range(n):
        if weight_decay != 0.0:
            p[i] *= decay
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)


cdef double GELU_C = 0.7978845608028654


def gelu(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double xi
    out_arr = np.empty(n, dtype=np.float64)
    t_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] t = t_arr
    for i in range(n):
        xi = x[i]
        t[i] = tanh(GELU_C * (xi + 0.044715 * xi * xi * xi))
        out[i] = 0.5 * xi * (1.0 + t[i])
    return out_arr, t_arr


def gelu_backward(const double[::1] x, const double[::1] t, const double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double xi
    gx_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = gx_arr
    for i in range(n):
        xi = x[i]
        gx[i] = g[i] * (0.5 * (1.0 + t[i]) + 0.5 * xi * (1.0 - t[i] * t[i])
                        * GELU_C * (1.0 + 3 * 0.044715 * xi * xi))
    return gx_arr
