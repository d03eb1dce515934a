# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused hot-loop kernels (compiled backend).

Same signatures and semantics as ``phaselab.kernels.pure``; reductions
accumulate in double precision regardless of the working dtype.
"""

import numpy as np

from libc.math cimport exp, log, sqrt
from libc.stdint cimport int64_t

NAME = "compiled"

ctypedef fused floating:
    float
    double


cdef inline object _np_dtype(bint is_double):
    return np.float64 if is_double else np.float32


def layernorm_forward(floating[:, ::1] x, floating[::1] gain, bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef bint is_double = (floating is double)
    dtype = _np_dtype(is_double)
    y_arr = np.empty((n, d), dtype=dtype)
    mean_arr = np.empty(n, dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr
    cdef floating[::1] rstd = rstd_arr
    cdef bint has_bias = bias is not None
    cdef floating[::1] bias_mv = gain if not has_bias else bias
    cdef Py_ssize_t i, j
    cdef double acc, mu, var, rs, diff
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += x[i, j]
        mu = acc / d
        acc = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            acc += diff * diff
        var = acc / d
        rs = 1.0 / sqrt(var + eps)
        mean[i] = <floating> mu
        rstd[i] = <floating> rs
        if has_bias:
            for j in range(d):
                y[i, j] = <floating> (((x[i, j] - <floating> mu) * <floating> rs)
                                      * gain[j] + bias_mv[j])
        else:
            for j in range(d):
                y[i, j] = <floating> (((x[i, j] - <floating> mu) * <floating> rs)
                                      * gain[j])
    return y_arr, mean_arr, rstd_arr


def layernorm_backward(floating[:, ::1] dy, floating[:, ::1] x,
                       floating[::1] gain, floating[::1] mean,
                       floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef bint is_double = (floating is double)
    dtype = _np_dtype(is_double)
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=np.float64)
    dbias_arr = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dgain[j] += dy[i, j] * xhat
            dbias[j] += dy[i, j]
            m1 += dxh
            m2 += dxh * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            dxh = dy[i, j] * gain[j]
            dx[i, j] = <floating> (rstd[i] * (dxh - m1 - xhat * m2))
    return dx_arr, dgain_arr.astype(dtype), dbias_arr.astype(dtype)


def causal_softmax(floating[:, :, ::1] scores):
    cdef Py_ssize_t n = scores.shape[0], t = scores.shape[1]
    cdef bint is_double = (floating is double)
    probs_arr = np.empty((n, t, t), dtype=_np_dtype(is_double))
    cdef floating[:, :, ::1] probs = probs_arr
    cdef Py_ssize_t k, i, j
    cdef double m, z, e
    for k in range(n):
        for i in range(t):
            m = scores[k, i, 0]
            for j in range(1, i + 1):
                if scores[k, i, j] > m:
                    m = scores[k, i, j]
            z = 0.0
            for j in range(i + 1):
                e = exp(<double> scores[k, i, j] - m)
                probs[k, i, j] = <floating> e
                z += e
            for j in range(i + 1):
                probs[k, i, j] = <floating> (probs[k, i, j] / z)
            for j in range(i + 1, t):
                probs[k, i, j] = 0.0
    return probs_arr


def causal_softmax_backward(floating[:, :, ::1] dprobs, floating[:, :, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0], t = probs.shape[1]
    cdef bint is_double = (floating is double)
    ds_arr = np.empty((n, t, t), dtype=_np_dtype(is_double))
    cdef floating[:, :, ::1] ds = ds_arr
    cdef Py_ssize_t k, i, j
    cdef double inner
    for k in range(n):
        for i in range(t):
            inner = 0.0
            for j in range(i + 1):
                inner += <double> dprobs[k, i, j] * probs[k, i, j]
            for j in range(i + 1):
                ds[k, i, j] = <floating> (probs[k, i, j]
                                          * (<double> dprobs[k, i, j] - inner))
            for j in range(i + 1, t):
                ds[k, i, j] = 0.0
    return ds_arr


def softmax_xent(floating[:, ::1] logits, const int64_t[::1] targets,
                 int ignore_index=-1):
    cdef Py_ssize_t n = logits.shape[0], v = logits.shape[1]
    cdef bint is_double = (floating is double)
    dlogits_arr = np.empty((n, v), dtype=_np_dtype(is_double))
    cdef floating[:, ::1] dlogits = dlogits_arr
    cdef Py_ssize_t i, j
    cdef int64_t tgt
    cdef double m, z, loss_sum = 0.0, p
    cdef Py_ssize_t n_valid = 0
    for i in range(n):
        tgt = targets[i]
        if tgt == ignore_index:
            for j in range(v):
                dlogits[i, j] = 0.0
            continue
        n_valid += 1
        m = logits[i, 0]
        for j in range(1, v):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(v):
            z += exp(<double> logits[i, j] - m)
        loss_sum += log(z) + m - <double> logits[i, tgt]
        for j in range(v):
            p = exp(<double> logits[i, j] - m) / z
            dlogits[i, j] = <floating> p
        dlogits[i, tgt] = dlogits[i, tgt] - <floating> 1.0
    return loss_sum, n_valid, dlogits_arr


def silu_mul_forward(floating[:, ::1] gate, floating[:, ::1] up):
    cdef Py_ssize_t n = gate.shape[0], d = gate.shape[1]
    cdef bint is_double = (floating is double)
    out_arr = np.empty((n, d), dtype=_np_dtype(is_double))
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double g, sig
    for i in range(n):
        for j in range(d):
            g = gate[i, j]
            sig = 1.0 / (1.0 + exp(-g))
            out[i, j] = <floating> (g * sig * up[i, j])
    return out_arr


def silu_mul_backward(floating[:, ::1] dout, floating[:, ::1] gate,
                      floating[:, ::1] up):
    cdef Py_ssize_t n = gate.shape[0], d = gate.shape[1]
    cdef bint is_double = (floating is double)
    dtype = _np_dtype(is_double)
    dgate_arr = np.empty((n, d), dtype=dtype)
    dup_arr = np.empty((n, d), dtype=dtype)
    cdef floating[:, ::1] dgate = dgate_arr
    cdef floating[:, ::1] dup = dup_arr
    cdef Py_ssize_t i, j
    cdef double g, sig, silu, do
    for i in range(n):
        for j in range(d):
            g = gate[i, j]
            sig = 1.0 / (1.0 + exp(-g))
            silu = g * sig
            do = dout[i, j]
            dgate[i, j] = <floating> (do * up[i, j] * (sig * (1.0 + g * (1.0 - sig))))
            dup[i, j] = <floating> (do * silu)
    return dgate_arr, dup_arr


def adamw_update(floating[::1] param, floating[::1] grad, floating[::1] m,
                 floating[::1] v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, double bc1, double bc2):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double g, mi, vi, update
    for i in range(n):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = <floating> mi
        v[i] = <floating> vi
        update = (mi / bc1) / (sqrt(vi / bc2) + eps) + weight_decay * param[i]
        param[i] = <floating> (param[i] - lr * update)
    return None
