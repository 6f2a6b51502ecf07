"""Dense/conv/norm primitives with explicit backward passes.

Activations are channel-last float64 arrays. Every forward returns the output
plus the cache its backward needs; nothing here mutates its inputs, so the
same functions serve training, frozen-phase inference, and finite-difference
checks.
"""
from __future__ import annotations

import numpy as np


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# -- 3x3 convolution, padding 1, stride 1 or 2 ------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, stride: int = 1):
    # x: (B, H, W, Cin), w: (3, 3, Cin, Cout); H and W must divide by stride
    b, h, wd, ci = x.shape
    co = w.shape[-1]
    if h % stride or wd % stride:
        raise ValueError(f"spatial size {h}x{wd} not divisible by stride {stride}")
    ho, wo = h // stride, wd // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((b, ho, wo, 9 * ci), dtype=x.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            cols[..., k * ci:(k + 1) * ci] = xp[
                :, di:di + (ho - 1) * stride + 1:stride, dj:dj + (wo - 1) * stride + 1:stride, :
            ]
            k += 1
    y = cols @ w.reshape(9 * ci, co)
    return y, (cols, x.shape, w, stride)


def conv3x3_backward(dy: np.ndarray, cache):
    cols, x_shape, w, stride = cache
    b, h, wd, ci = x_shape
    co = w.shape[-1]
    ho, wo = dy.shape[1], dy.shape[2]
    dcols = dy @ w.reshape(9 * ci, co).T
    dw = cols.reshape(-1, 9 * ci).T @ dy.reshape(-1, co)
    dxp = np.zeros((b, h + 2, wd + 2, ci), dtype=dy.dtype)
    k = 0
    for di in range(3):
        for dj in range(3):
            dxp[
                :, di:di + (ho - 1) * stride + 1:stride, dj:dj + (wo - 1) * stride + 1:stride, :
            ] += dcols[..., k * ci:(k + 1) * ci]
            k += 1
    return dxp[:, 1:h + 1, 1:wd + 1, :], dw.reshape(w.shape)


# -- batch normalization over arbitrary leading axes ------------------------

def bn_forward(x, gamma, beta, running_mean, running_var, axes, train,
               eps=1e-5, momentum=0.1):
    """Returns (y, cache, new_running_mean, new_running_var).

    Running statistics are returned, not written in place: the caller decides
    whether the step commits them, which is what keeps frozen phases bit-exact.
    """
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    y = gamma * xhat + beta
    return y, (xhat, inv, gamma, axes, train, x.shape), new_mean, new_var


def bn_backward(dy, cache):
    xhat, inv, gamma, axes, train, x_shape = cache
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if train:
        n = 1
        for a in axes:
            n *= x_shape[a]
        dx = (gamma * inv) * (dy - dbeta / n - xhat * (dgamma / n))
    else:
        dx = dy * gamma * inv
    return dx, dgamma, dbeta


# -- elementwise pieces ------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dy, cache):
    return dy * (cache > 0.0)


def dropout_forward(x, rate, train, rng):
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    return x * keep * scale, (keep, scale)


def dropout_backward(dy, cache):
    if cache is None:
        return dy
    keep, scale = cache
    return dy * keep * scale


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
