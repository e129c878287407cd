"""Pure-numpy twins of the compiled row kernels in ``_kernels.pyx``."""
import numpy as np


def softmax_fwd(x, mask=None):
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    valid = mask.astype(bool)
    if not valid.any(axis=1).all():
        return None
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd[:, None]
    return xhat * gain + bias, xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    gh = g * gain
    m = g.shape[1]
    s1 = gh.sum(axis=1, keepdims=True) / m
    s2 = (gh * xhat).sum(axis=1, keepdims=True) / m
    dx = rstd[:, None] * (gh - s1 - xhat * s2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)
