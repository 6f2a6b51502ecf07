"""Learned soft part assignment over tensor fibers, and weighted pooling.

A linear classifier scores every spatial fiber f of the activation tensor
against p parts; softmax over parts yields the assignment map A. Pooling then
aggregates fibers weighted by A. With the normalized form (the default), an
assignment that is exactly the one-hot stripe indicator reproduces uniform
stripe pooling.
"""
from __future__ import annotations

import logging

import numpy as np

from .errors import ConfigError, NumericAbortError

log = logging.getLogger(__name__)


def init_assign_params(p: int, c: int, bias: bool = False):
    """Part-classifier weights start at zero: the assignment begins uniform."""
    params = {"rpp.wc": np.zeros((p, c))}
    if bias:
        params["rpp.bias"] = np.zeros(p)
    return params


def _batched(T):
    if T.ndim == 4:
        return T, False
    if T.ndim == 3:
        return T[None], True
    raise ValueError(f"expected tensor of rank 3 or 4, got shape {T.shape}")


def assign(T: np.ndarray, wc: np.ndarray, bias: np.ndarray | None = None):
    """Softmax part membership for every fiber. Returns (A, cache).

    A has shape (..., M, N, p) and sums to one over the part axis. Non-finite
    logits abort rather than propagate.
    """
    t, single = _batched(T)
    logits = np.einsum("bmnc,pc->bmnp", t, wc)
    if bias is not None:
        logits = logits + bias
    if not np.isfinite(logits).all():
        raise NumericAbortError("part-assignment logits are not finite")
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    a = e / e.sum(axis=-1, keepdims=True)
    cache = (t, wc, a, bias is not None, single)
    return (a[0] if single else a), cache


def assign_backward(dA, cache):
    t, wc, a, has_bias, single = cache
    if single:
        dA = dA[None]
    # softmax backward over the part axis
    inner = (dA * a).sum(axis=-1, keepdims=True)
    dlogits = a * (dA - inner)
    dwc = np.einsum("bmnp,bmnc->pc", dlogits, t)
    dt = np.einsum("bmnp,pc->bmnc", dlogits, wc)
    dbias = dlogits.sum(axis=(0, 1, 2)) if has_bias else None
    return (dt[0] if single else dt), dwc, dbias


def soft_pool(T: np.ndarray, A: np.ndarray, normalize: bool = True, eps: float = 1e-8):
    """Aggregate fibers into p part vectors weighted by the assignment map.

    normalize=True: g[i] = sum(A_i * f) / sum(A_i), a weighted mean; a part
    whose total weight falls below eps returns the zero vector and is flagged
    empty. normalize=False: g[i] = sum(A_i * f) / (M*N).

    Returns (g, empty, cache) where empty is a (..., p) boolean mask.
    """
    t, single = _batched(T)
    a, asingle = (A[None], True) if A.ndim == 3 else (A, False)
    if single != asingle:
        raise ValueError("tensor and assignment map must both be batched or both single")
    if a.shape[:3] != t.shape[:3]:
        raise ValueError(f"assignment shape {a.shape} does not match tensor {t.shape}")
    u = np.einsum("bmnp,bmnc->bpc", a, t)
    mass = a.sum(axis=(1, 2))  # (B, p)
    empty = mass < eps
    if normalize:
        g = u / np.maximum(mass, eps)[..., None]
        g = np.where(empty[..., None], 0.0, g)
    else:
        mn = t.shape[1] * t.shape[2]
        g = u / mn
    cache = (t, a, u, mass, empty, normalize, eps, single)
    return (g[0] if single else g), (empty[0] if single else empty), cache


def soft_pool_backward(dg, cache):
    t, a, u, mass, empty, normalize, eps, single = cache
    if single:
        dg = dg[None]
    if normalize:
        safe = np.maximum(mass, eps)
        du = dg / safe[..., None]
        dmass = -(dg * u).sum(axis=-1) / safe**2
        # empty parts emitted a constant zero: no gradient flows
        du = np.where(empty[..., None], 0.0, du)
        dmass = np.where(empty, 0.0, dmass)
    else:
        mn = t.shape[1] * t.shape[2]
        du = dg / mn
        dmass = np.zeros_like(mass)
    dA = np.einsum("bmnc,bpc->bmnp", t, du) + dmass[:, None, None, :]
    dT = np.einsum("bmnp,bpc->bmnc", a, du)
    return (dT[0] if single else dT), (dA[0] if single else dA)


def one_hot_stripe_assignment(m: int, n: int, p: int) -> np.ndarray:
    """The (M, N, p) indicator map of the uniform horizontal stripes."""
    if p > m or m % p:
        raise ConfigError(f"cannot stripe {m} rows into p={p} parts")
    a = np.zeros((m, n, p))
    stripe = m // p
    for i in range(p):
        a[i * stripe:(i + 1) * stripe, :, i] = 1.0
    return a


def build_rpp_head(model, p: int | None = None):
    """Convert a trained uniform-stripe model into a refined-pooling one.

    Every existing parameter and buffer is copied; the new part classifier
    starts at zero so the initial assignment equals the global softmax
    uniform. Building on an untrained source is allowed but recorded as the
    no-induction ablation.
    """
    from .model import Model

    if model.cfg.pooling != "uniform" or model.cfg.head.mode != "pcb":
        raise ConfigError("refined pooling builds on a uniform-stripe pcb model")
    if p is not None and p != model.cfg.head.p:
        raise ConfigError(
            f"requested p={p} does not match the source model's p={model.cfg.head.p}"
        )
    induced = bool(model.meta.get("trained"))
    if not induced:
        log.warning("building refined pooling on an untrained source (no-induction mode)")
    refined = Model.from_source(model, pooling="rpp")
    refined.meta["induced"] = induced
    return refined
