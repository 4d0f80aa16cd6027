"""Pure-numpy reference kernels.

Every function here has a twin of the same name and signature in
``_numba``. Inputs are 2D C-contiguous float64 arrays unless stated.
"""
import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)
GELU_A = 0.044715


def softmax_rows(x, tau):
    s = x / tau
    s = s - s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def softmax_rows_backward(p, g, tau):
    dot = (g * p).sum(axis=1, keepdims=True)
    return p * (g - dot) / tau


def gelu(x):
    inner = GELU_C * (x + GELU_A * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, g):
    inner = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(inner)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * d


def layernorm(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_backward(g, xhat, rstd, gain):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    dxhat = g * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def energy(z, eps):
    sq = z * z
    denom = sq.sum(axis=1) + eps
    return sq / denom[:, None], denom


def energy_backward(z, e, denom, g):
    dot = (g * e).sum(axis=1, keepdims=True)
    return 2.0 * z / denom[:, None] * (g - dot)


def top1(p):
    idx = np.argmax(p, axis=1)
    return idx.astype(np.int64), p[np.arange(p.shape[0]), idx]


def count_routes(expert_index, labels, num_experts, num_classes):
    flat = expert_index.astype(np.int64) * num_classes + labels.astype(np.int64)
    counts = np.bincount(flat, minlength=num_experts * num_classes)
    return counts.reshape(num_experts, num_classes)
