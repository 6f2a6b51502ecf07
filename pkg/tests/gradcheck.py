"""Shared finite-difference gradient checking helpers for the test suite.

Central differences with a fixed float64 step; the loss callable must be a
pure function of the parameter dict.
"""
from __future__ import annotations

import numpy as np


def numeric_grad(loss_fn, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of loss_fn() w.r.t. arr, perturbed in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def check_model_grads(model, x, labels, h: float = 1e-6,
                      use_batch_stats: bool = True) -> dict[str, float]:
    """Max relative error per parameter array for the full training loss."""
    from partpool.train import pcb_loss

    def loss_fn():
        fw = model.forward(x, train=True, use_batch_stats=use_batch_stats)
        return pcb_loss(fw.probs, labels)

    fw = model.forward(x, train=True, use_batch_stats=use_batch_stats)
    grads = model.backward(fw, labels)
    errs = {}
    for name, arr in model.params.items():
        num = numeric_grad(loss_fn, arr, h)
        errs[name] = max_rel_err(grads[name], num)
    return errs
