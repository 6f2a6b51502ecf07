"""Stripe pooling, per-part dimension reduction, and classifier heads.

Core shapes: T (B, M, N, C), pooled parts g (B, p, C), reduced parts
h (B, p, r), class probabilities (B, heads, K). Every op also accepts the
single-image form without the batch axis and returns the same rank it was
given.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .layers import bn_backward, bn_forward, he_normal, relu_backward, relu_forward, softmax


def _batched(arr: np.ndarray, rank: int):
    if arr.ndim == rank:
        return arr, False
    if arr.ndim == rank - 1:
        return arr[None], True
    raise ValueError(f"expected array of rank {rank} or {rank - 1}, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# uniform stripe pooling
# ---------------------------------------------------------------------------

def uniform_pool(T: np.ndarray, p: int) -> np.ndarray:
    """Average the tensor over p equal horizontal stripes.

    Strict about geometry: p must not exceed the row count and must divide it.
    """
    t, single = _batched(T, 4)
    b, m, n, c = t.shape
    if p > m:
        raise ConfigError(f"p={p} exceeds the {m} tensor rows")
    if m % p:
        raise ConfigError(f"tensor height {m} is not divisible by p={p}")
    g = t.reshape(b, p, m // p, n, c).mean(axis=(2, 3))
    return g[0] if single else g


def uniform_pool_backward(dg: np.ndarray, tensor_shape) -> np.ndarray:
    b, m, n, c = tensor_shape
    p = dg.shape[1]
    stripe = m // p
    dt = np.broadcast_to(
        dg[:, :, None, None, :] / (stripe * n), (b, p, stripe, n, c)
    )
    return dt.reshape(b, m, n, c)


# ---------------------------------------------------------------------------
# per-part reduction: linear -> batch norm -> relu
# ---------------------------------------------------------------------------

def init_reduce_params(p: int, c: int, r: int, rng, share: bool = False):
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    names = ["reduce.shared"] if share else [f"reduce.p{i}" for i in range(p)]
    for name in names:
        params[f"{name}.w"] = he_normal(rng, (c, r), c)
        params[f"{name}.b"] = np.zeros(r)
        params[f"{name}.bn.gamma"] = np.ones(r)
        params[f"{name}.bn.beta"] = np.zeros(r)
        buffers[f"{name}.bn.mean"] = np.zeros(r)
        buffers[f"{name}.bn.var"] = np.ones(r)
    return params, buffers


def reduce_dim(g, w, b, gamma, beta, running_mean, running_var, train=False,
               eps=1e-5, momentum=0.1):
    """h[i] = relu(bn_i(g[i] @ w[i] + b[i])) for each part independently.

    Stacked parameter shapes: w (p, C, r), b (p, r), bn params (p, r).
    Returns (h, cache, new_running_mean, new_running_var).
    """
    gb, single = _batched(g, 3)
    z = np.einsum("bpc,pcr->bpr", gb, w) + b
    zn, bn_cache, nm, nv = bn_forward(
        z, gamma, beta, running_mean, running_var, axes=(0,), train=train,
        eps=eps, momentum=momentum,
    )
    h, relu_cache = relu_forward(zn)
    cache = (gb, w, bn_cache, relu_cache, single)
    return (h[0] if single else h), cache, nm, nv


def reduce_dim_backward(dh, cache):
    gb, w, bn_cache, relu_cache, single = cache
    if single:
        dh = dh[None]
    dzn = relu_backward(dh, relu_cache)
    dz, dgamma, dbeta = bn_backward(dzn, bn_cache)
    dw = np.einsum("bpc,bpr->pcr", gb, dz)
    db = dz.sum(axis=0)
    dg = np.einsum("bpr,pcr->bpc", dz, w)
    return (dg[0] if single else dg), dw, db, dgamma, dbeta


# ---------------------------------------------------------------------------
# classifiers
# ---------------------------------------------------------------------------

def init_classifier_params(heads: int, r: int, k: int, rng, shared: bool = False):
    params: dict[str, np.ndarray] = {}
    names = ["cls.shared"] if shared else [f"cls.p{i}" for i in range(heads)]
    for name in names:
        params[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(r), size=(r, k))
        params[f"{name}.b"] = np.zeros(k)
    return params


def classify(h, w, b):
    """Per-part softmax classification.

    w is (p, r, K) for independent classifiers or (r, K) shared across parts.
    Returns ((B, p, K) probabilities, cache).
    """
    hb, single = _batched(h, 3)
    if w.ndim == 2:
        logits = np.einsum("bpr,rk->bpk", hb, w) + b
    else:
        logits = np.einsum("bpr,prk->bpk", hb, w) + b
    probs = softmax(logits, axis=-1)
    cache = (hb, w, probs, single)
    return (probs[0] if single else probs), cache


def classify_backward(dlogits, cache):
    """Backward from d(logits); the loss layer folds softmax into dlogits."""
    hb, w, _, single = cache
    if single:
        dlogits = dlogits[None]
    if w.ndim == 2:
        dw = np.einsum("bpr,bpk->rk", hb, dlogits)
        db = dlogits.sum(axis=(0, 1))
        dh = np.einsum("bpk,rk->bpr", dlogits, w)
    else:
        dw = np.einsum("bpr,bpk->prk", hb, dlogits)
        db = dlogits.sum(axis=0)
        dh = np.einsum("bpk,prk->bpr", dlogits, w)
    return (dh[0] if single else dh), dw, db


def average_parts(h):
    """Mean over the part axis, used by the single-loss head variant."""
    hb, single = _batched(h, 3)
    out = hb.mean(axis=1, keepdims=True)
    return out[0] if single else out


def average_parts_backward(dhbar, p):
    return np.repeat(dhbar, p, axis=1) / p


# ---------------------------------------------------------------------------
# global-pooling head (the p=1 baseline)
# ---------------------------------------------------------------------------

def ide_head(T, w_r, b_r, gamma, beta, running_mean, running_var, w_c, b_c,
             dropout=0.0, train=False, rng=None, eps=1e-5):
    """Global average pool -> dropout -> linear+bn+relu -> single classifier.

    Convenience composition for the p=1 baseline; parameter shapes follow
    reduce_dim/classify with p=1. Returns (B, 1, K) probabilities.
    """
    from .layers import dropout_forward

    t, single = _batched(T, 4)
    g = uniform_pool(t, 1)
    g, _ = dropout_forward(g, dropout, train, rng)
    h, _, _, _ = reduce_dim(
        g, w_r, b_r, gamma, beta, running_mean, running_var, train=train, eps=eps
    )
    probs, _ = classify(h, w_c, b_c)
    return probs[0] if single else probs
