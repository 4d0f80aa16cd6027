"""numba-compiled kernels; same contracts as ``_numpy``.

No fastmath: results must be reproducible run to run.
"""
import math

import numpy as np
from numba import njit

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


@njit(cache=True)
def softmax_rows(x, tau):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(m):
            v = math.exp(x[i, j] / tau - mx / tau)
            out[i, j] = v
            total += v
        for j in range(m):
            out[i, j] /= total
    return out


@njit(cache=True)
def softmax_rows_backward(p, g, tau):
    n, m = p.shape
    out = np.empty((n, m))
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += g[i, j] * p[i, j]
        for j in range(m):
            out[i, j] = p[i, j] * (g[i, j] - dot) / tau
    return out


@njit(cache=True)
def gelu(x):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            out[i, j] = 0.5 * v * (1.0 + math.tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


@njit(cache=True)
def gelu_backward(x, g):
    n, m = x.shape
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            t = math.tanh(GELU_C * (v + GELU_A * v * v * v))
            d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
            out[i, j] = g[i, j] * d
    return out


@njit(cache=True)
def layernorm(x, gain, bias, eps):
    n, m = x.shape
    y = np.empty((n, m))
    xhat = np.empty((n, m))
    rstd = np.empty(n)
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
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[0, j] + bias[0, j]
    return y, xhat, rstd


@njit(cache=True)
def layernorm_backward(g, xhat, rstd, gain):
    n, m = g.shape
    dx = np.empty((n, m))
    dgain = np.zeros(m)
    dbias = np.zeros(m)
    dxhat = np.empty(m)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
            d = g[i, j] * gain[0, j]
            dxhat[j] = d
            m1 += d
            m2 += d * xhat[i, j]
        m1 /= m
        m2 /= m
        for j in range(m):
            dx[i, j] = (dxhat[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx, dgain, dbias


@njit(cache=True)
def energy(z, eps):
    n, r = z.shape
    e = np.empty((n, r))
    denom = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(r):
            s += z[i, j] * z[i, j]
        s += eps
        denom[i] = s
        for j in range(r):
            e[i, j] = z[i, j] * z[i, j] / s
    return e, denom


@njit(cache=True)
def energy_backward(z, e, denom, g):
    n, r = z.shape
    out = np.empty((n, r))
    for i in range(n):
        dot = 0.0
        for j in range(r):
            dot += g[i, j] * e[i, j]
        for j in range(r):
            out[i, j] = 2.0 * z[i, j] / denom[i] * (g[i, j] - dot)
    return out


@njit(cache=True)
def top1(p):
    n, k = p.shape
    idx = np.zeros(n, dtype=np.int64)
    gate = np.empty(n)
    for i in range(n):
        best = 0
        for j in range(1, k):
            if p[i, j] > p[i, best]:
                best = j
        idx[i] = best
        gate[i] = p[i, best]
    return idx, gate


@njit(cache=True)
def count_routes(expert_index, labels, num_experts, num_classes):
    counts = np.zeros((num_experts, num_classes), dtype=np.int64)
    for i in range(expert_index.shape[0]):
        counts[expert_index[i], labels[i]] += 1
    return counts
