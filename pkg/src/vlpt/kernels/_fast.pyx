# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of vlpt.kernels.reference. Fused row loops avoid the
temporaries the numpy versions allocate; results agree with the reference
to rounding error."""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt, tanh, INFINITY

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_rows(x, mask=None):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if mask is None:
        if x.dtype == np.float64:
            _softmax_nomask[double](x, out)
        else:
            _softmax_nomask[float](x, out)
    else:
        m = np.ascontiguousarray(mask, dtype=np.uint8)
        if x.dtype == np.float64:
            _softmax_masked[double](x, m, out)
        else:
            _softmax_masked[float](x, m, out)
    return out


def softmax_rows_backward(y, dy):
    y = np.ascontiguousarray(y)
    dy = np.ascontiguousarray(dy)
    out = np.empty_like(y)
    if y.dtype == np.float64:
        _softmax_backward[double](y, dy, out)
    else:
        _softmax_backward[float](y, dy, out)
    return out


def layernorm_rows(x, gain, bias, eps):
    x = np.ascontiguousarray(x)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    y = np.empty_like(x)
    mu = np.empty((x.shape[0], 1), dtype=x.dtype)
    rstd = np.empty((x.shape[0], 1), dtype=x.dtype)
    if x.dtype == np.float64:
        _layernorm[double](x, gain, bias, eps, y, mu, rstd)
    else:
        _layernorm[float](x, gain, bias, eps, y, mu, rstd)
    return y, mu, rstd


def layernorm_rows_backward(dy, x, gain, mu, rstd):
    dy = np.ascontiguousarray(dy)
    x = np.ascontiguousarray(x)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    mu = np.ascontiguousarray(mu)
    rstd = np.ascontiguousarray(rstd)
    dx = np.empty_like(x)
    dgain = np.zeros(x.shape[1], dtype=x.dtype)
    dbias = np.zeros(x.shape[1], dtype=x.dtype)
    if x.dtype == np.float64:
        _layernorm_backward[double](dy, x, gain, mu, rstd, dx, dgain, dbias)
    else:
        _layernorm_backward[float](dy, x, gain, mu, rstd, dx, dgain, dbias)
    return dx, dgain, dbias


def gelu(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float64:
        _gelu[double](x.reshape(-1), out.reshape(-1))
    else:
        _gelu[float](x.reshape(-1), out.reshape(-1))
    return out


def gelu_backward(x, dy):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy)
    out = np.empty_like(x)
    if x.dtype == np.float64:
        _gelu_backward[double](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    else:
        _gelu_backward[float](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, t):
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    if p.dtype == np.float64:
        _adam[double](p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                      lr, beta1, beta2, eps, weight_decay, bc1, bc2)
    else:
        _adam[float](p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                     lr, beta1, beta2, eps, weight_decay, bc1, bc2)


cdef void _softmax_nomask(real[:, ::1] x, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], k = x.shape[1]
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, k):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(k):
            out[i, j] = <real>exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(k):
            out[i, j] = <real>(out[i, j] / s)


cdef void _softmax_masked(real[:, ::1] x, unsigned char[:, ::1] mask,
                          real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], k = x.shape[1]
    cdef double mx, s
    cdef bint any_on
    for i in range(n):
        any_on = False
        mx = -INFINITY
        for j in range(k):
            if mask[i, j] and x[i, j] > mx:
                mx = x[i, j]
                any_on = True
        if not any_on:
            for j in range(k):
                out[i, j] = 0.0
            continue
        s = 0.0
        for j in range(k):
            if mask[i, j]:
                out[i, j] = <real>exp(x[i, j] - mx)
                s += out[i, j]
            else:
                out[i, j] = 0.0
        for j in range(k):
            out[i, j] = <real>(out[i, j] / s)


cdef void _softmax_backward(real[:, ::1] y, real[:, ::1] dy,
                            real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = y.shape[0], k = y.shape[1]
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(k):
            inner += y[i, j] * dy[i, j]
        for j in range(k):
            out[i, j] = <real>(y[i, j] * (dy[i, j] - inner))


cdef void _layernorm(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                     real[:, ::1] y, real[:, ::1] mu, real[:, ::1] rstd) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], h = x.shape[1]
    cdef double m, var, r, d
    for i in range(n):
        m = 0.0
        for j in range(h):
            m += x[i, j]
        m /= h
        var = 0.0
        for j in range(h):
            d = x[i, j] - m
            var += d * d
        var /= h
        r = 1.0 / sqrt(var + eps)
        mu[i, 0] = <real>m
        rstd[i, 0] = <real>r
        for j in range(h):
            y[i, j] = <real>((x[i, j] - m) * r * gain[j] + bias[j])


cdef void _layernorm_backward(real[:, ::1] dy, real[:, ::1] x, real[::1] gain,
                              real[:, ::1] mu, real[:, ::1] rstd,
                              real[:, ::1] dx, real[::1] dgain,
                              real[::1] dbias) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[0], h = x.shape[1]
    cdef double m, r, s1, s2, xh, g
    for i in range(n):
        m = mu[i, 0]
        r = rstd[i, 0]
        s1 = 0.0
        s2 = 0.0
        for j in range(h):
            xh = (x[i, j] - m) * r
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xh
        s1 /= h
        s2 /= h
        for j in range(h):
            xh = (x[i, j] - m) * r
            g = dy[i, j] * gain[j]
            dx[i, j] = <real>(r * (g - s1 - xh * s2))
            dgain[j] += <real>(dy[i, j] * xh)
            dbias[j] += dy[i, j]


cdef void _gelu(real[::1] x, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = <real>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))))


cdef void _gelu_backward(real[::1] x, real[::1] dy, real[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t, du
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_A * v * v * v))
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = <real>(dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))


cdef void _adam(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double weight_decay, double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <real>mi
        v[i] = <real>vi
        p[i] = <real>(p[i] - lr * ((mi / bc1) / (sqrt(vi / bc2) + eps)
                                   + weight_decay * p[i]))
