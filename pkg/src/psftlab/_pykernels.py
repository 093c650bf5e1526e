"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
All array arguments are C-contiguous float64 (``idx`` outputs are int64);
row-wise kernels operate over the last axis of a 2-D array.
"""

import numpy as np


def log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def log_softmax_backward(out, g):
    return g - np.exp(out) * g.sum(axis=1, keepdims=True)


def softmax(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, g):
    return p * (g - (p * g).sum(axis=1, keepdims=True))


def row_entropy(logp):
    """Entropy per row; zero-probability entries (logp = -inf) contribute 0."""
    p = np.exp(logp)
    return -np.multiply(p, logp, out=np.zeros_like(p), where=p > 0).sum(axis=1)


def layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(g, xhat, rstd, gamma):
    d = xhat.shape[1]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gh = g * gamma
    gx = (gh - gh.sum(axis=1, keepdims=True) / d
          - xhat * (gh * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return gx, dgamma, dbeta


def categorical(probs, u):
    """Inverse-CDF draw per row; ``u`` holds one uniform in [0, 1) per row."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1).astype(np.int64)


def adam_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place AdamW step on flat arrays."""
    if weight_decay:
        p *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximate GELU on a flat array; returns (out, tanh term)."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, g):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
