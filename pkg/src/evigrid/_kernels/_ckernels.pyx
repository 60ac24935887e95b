# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``; same signatures and results."""

import numpy as np
from libc.math cimport exp, log, log1p, sqrt, tanh, INFINITY

BACKEND = "compiled"

cdef double GELU_K = 0.7978845608028654


def attention_forward(qkv_in, int heads):
    cdef const double[:, ::1] qkv = np.ascontiguousarray(qkv_in, dtype=np.float64)
    cdef Py_ssize_t L = qkv.shape[0]
    cdef Py_ssize_t C = qkv.shape[1] // 3
    cdef Py_ssize_t d = C // heads
    cdef double scale = 1.0 / sqrt(<double>d)
    out_a = np.zeros((L, C))
    probs_a = np.zeros((heads, L, L))
    cdef double[:, ::1] out = out_a
    cdef double[:, :, ::1] probs = probs_a
    cdef Py_ssize_t h, i, j, t, off
    cdef double s, m, z, p
    for h in range(heads):
        off = h * d
        for i in range(L):
            m = -INFINITY
            for j in range(i + 1):
                s = 0.0
                for t in range(d):
                    s += qkv[i, off + t] * qkv[j, C + off + t]
                s *= scale
                probs[h, i, j] = s
                if s > m:
                    m = s
            z = 0.0
            for j in range(i + 1):
                p = exp(probs[h, i, j] - m)
                probs[h, i, j] = p
                z += p
            for j in range(i + 1):
                p = probs[h, i, j] / z
                probs[h, i, j] = p
                for t in range(d):
                    out[i, off + t] += p * qkv[j, 2 * C + off + t]
    return out_a, probs_a


def attention_backward(grad_in, qkv_in, probs_in, int heads):
    cdef const double[:, ::1] go = np.ascontiguousarray(grad_in, dtype=np.float64)
    cdef const double[:, ::1] qkv = np.ascontiguousarray(qkv_in, dtype=np.float64)
    cdef const double[:, :, ::1] probs = np.ascontiguousarray(probs_in, dtype=np.float64)
    cdef Py_ssize_t L = qkv.shape[0]
    cdef Py_ssize_t C = qkv.shape[1] // 3
    cdef Py_ssize_t d = C // heads
    cdef double scale = 1.0 / sqrt(<double>d)
    dqkv_a = np.zeros((L, 3 * C))
    dp_a = np.zeros(L)
    cdef double[:, ::1] dqkv = dqkv_a
    cdef double[::1] dp = dp_a
    cdef Py_ssize_t h, i, j, t, off
    cdef double acc, row, ds, p
    for h in range(heads):
        off = h * d
        for i in range(L):
            row = 0.0
            for j in range(i + 1):
                p = probs[h, i, j]
                acc = 0.0
                for t in range(d):
                    acc += go[i, off + t] * qkv[j, 2 * C + off + t]
                    dqkv[j, 2 * C + off + t] += p * go[i, off + t]
                dp[j] = acc
                row += acc * p
            for j in range(i + 1):
                ds = probs[h, i, j] * (dp[j] - row) * scale
                for t in range(d):
                    dqkv[i, off + t] += ds * qkv[j, C + off + t]
                    dqkv[j, C + off + t] += ds * qkv[i, off + t]
    return dqkv_a


def layer_norm_forward(x_in, gain_in, bias_in, double eps):
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[::1] gain = np.ascontiguousarray(gain_in, dtype=np.float64).reshape(-1)
    cdef const double[::1] bias = np.ascontiguousarray(bias_in, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1], i, j
    out_a = np.empty((R, n))
    xhat_a = np.empty((R, n))
    rstd_a = np.empty((R, 1))
    cdef double[:, ::1] out = out_a
    cdef double[:, ::1] xhat = xhat_a
    cdef double[:, ::1] rstd = rstd_a
    cdef double mu, var, r, c
    for i in range(R):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            c = x[i, j] - mu
            var += c * c
        r = 1.0 / sqrt(var / n + eps)
        rstd[i, 0] = r
        for j in range(n):
            c = (x[i, j] - mu) * r
            xhat[i, j] = c
            out[i, j] = c * gain[j] + bias[j]
    return out_a, xhat_a, rstd_a


def layer_norm_backward(grad_in, xhat_in, rstd_in, gain_in):
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_in, dtype=np.float64)
    cdef const double[:, ::1] xhat = np.ascontiguousarray(xhat_in, dtype=np.float64)
    cdef const double[:, ::1] rstd = np.ascontiguousarray(rstd_in, dtype=np.float64)
    cdef const double[::1] gain = np.ascontiguousarray(gain_in, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t R = g.shape[0], n = g.shape[1], i, j
    dx_a = np.empty((R, n))
    dgain_a = np.zeros((1, n))
    dbias_a = np.zeros((1, n))
    cdef double[:, ::1] dx = dx_a
    cdef double[:, ::1] dgain = dgain_a
    cdef double[:, ::1] dbias = dbias_a
    cdef double s1, s2, dxh
    for i in range(R):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            dxh = g[i, j] * gain[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
            dgain[0, j] += g[i, j] * xhat[i, j]
            dbias[0, j] += g[i, j]
        for j in range(n):
            dxh = g[i, j] * gain[j]
            dx[i, j] = rstd[i, 0] / n * (n * dxh - s1 - xhat[i, j] * s2)
    return dx_a, dgain_a, dbias_a


def gelu_forward(x_in):
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1], i, j
    out_a = np.empty((R, n))
    th_a = np.empty((R, n))
    cdef double[:, ::1] out = out_a
    cdef double[:, ::1] th = th_a
    cdef double v, t
    for i in range(R):
        for j in range(n):
            v = x[i, j]
            t = tanh(GELU_K * v * (1.0 + 0.044715 * v * v))
            th[i, j] = t
            out[i, j] = 0.5 * v * (1.0 + t)
    return out_a, th_a


def gelu_backward(grad_in, x_in, th_in):
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_in, dtype=np.float64)
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, ::1] th = np.ascontiguousarray(th_in, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1], i, j
    dx_a = np.empty((R, n))
    cdef double[:, ::1] dx = dx_a
    cdef double v, t, du
    for i in range(R):
        for j in range(n):
            v = x[i, j]
            t = th[i, j]
            du = GELU_K * (1.0 + 3 * 0.044715 * v * v)
            dx[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return dx_a


def log_softmax_forward(x_in):
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], n = x.shape[1], i, j
    out_a = np.empty((R, n))
    cdef double[:, ::1] out = out_a
    cdef double m, z
    for i in range(R):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        z = 0.0
        for j in range(n):
            z += exp(x[i, j] - m)
        z = log(z)
        for j in range(n):
            out[i, j] = x[i, j] - m - z
    return out_a


def log_softmax_backward(grad_in, out_in):
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_in, dtype=np.float64)
    cdef const double[:, ::1] out = np.ascontiguousarray(out_in, dtype=np.float64)
    cdef Py_ssize_t R = g.shape[0], n = g.shape[1], i, j
    dx_a = np.empty((R, n))
    cdef double[:, ::1] dx = dx_a
    cdef double s
    for i in range(R):
        s = 0.0
        for j in range(n):
            s += g[i, j]
        for j in range(n):
            dx[i, j] = g[i, j] - exp(out[i, j]) * s
    return dx_a


def bernoulli_loglik(sims_in, targets_in, double eps):
    cdef const double[:, ::1] sims = np.ascontiguousarray(sims_in, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(targets_in, dtype=np.float64)
    cdef Py_ssize_t R = sims.shape[0], T = sims.shape[1], i, t
    ll_a = np.zeros(R)
    grad_a = np.zeros((R, T))
    cdef double[::1] ll = ll_a
    cdef double[:, ::1] grad = grad_a
    cdef double s, raw, acc
    for i in range(R):
        acc = 0.0
        for t in range(T):
            raw = sims[i, t]
            s = raw
            if s < eps:
                s = eps
            elif s > 1.0 - eps:
                s = 1.0 - eps
            acc += y[i, t] * log(s) + (1.0 - y[i, t]) * log1p(-s)
            if raw >= eps and raw <= 1.0 - eps:
                grad[i, t] = y[i, t] / s - (1.0 - y[i, t]) / (1.0 - s)
        ll[i] = acc
    return ll_a, grad_a


def best_interval(sims_in, double eps):
    cdef const double[::1] sims = np.ascontiguousarray(sims_in, dtype=np.float64).reshape(-1)
    cdef Py_ssize_t T = sims.shape[0], a, b
    gain_a = np.zeros(T + 1)
    cdef double[::1] gain = gain_a
    cdef double s, base = 0.0, val, best = -INFINITY
    cdef Py_ssize_t best_a = 0, best_b = 0
    for a in range(T):
        s = sims[a]
        if s < eps:
            s = eps
        elif s > 1.0 - eps:
            s = 1.0 - eps
        base += log1p(-s)
        gain[a + 1] = gain[a] + (log(s) - log1p(-s))
    for a in range(T):
        for b in range(a, T):
            val = gain[b + 1] - gain[a]
            if val > best:
                best = val
                best_a = a
                best_b = b
    return int(best_a), int(best_b), base + best


def greedy_match(ious_in, double thresh):
    cdef const double[:, ::1] ious = np.ascontiguousarray(ious_in, dtype=np.float64)
    cdef Py_ssize_t n_p = ious.shape[0], n_g = ious.shape[1], i, j
    cand = []
    for i in range(n_p):
        for j in range(n_g):
            if ious[i, j] >= thresh:
                cand.append((-ious[i, j], i, j))
    cand.sort()
    used_p = np.zeros(n_p, dtype=np.uint8)
    used_g = np.zeros(n_g, dtype=np.uint8)
    cdef unsigned char[::1] up = used_p
    cdef unsigned char[::1] ug = used_g
    pairs = []
    for _, i, j in cand:
        if up[i] or ug[j]:
            continue
        up[i] = 1
        ug[j] = 1
        pairs.append((i, j))
    return pairs
