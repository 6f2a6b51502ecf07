"""Convolutional trunk producing the spatial activation tensor.

Each stage is conv3x3 -> batch norm -> relu. The tensor layout is
channel-last: images (B, H, W, 3) map to activations (B, M, N, C) with
M = H / d and N = W / d for the total downsample factor d.
"""
from __future__ import annotations

import numpy as np

from .config import BackboneConfig
from .errors import ConfigError
from .layers import (
    bn_backward,
    bn_forward,
    conv3x3_backward,
    conv3x3_forward,
    he_normal,
    relu_backward,
    relu_forward,
)


def output_shape(cfg: BackboneConfig) -> tuple[int, int, int]:
    """(M, N, C) for the configured input size; divisibility is checked here."""
    cfg.validate()
    d = cfg.total_downsample()
    h, w = cfg.input_size
    if h % d or w % d:
        raise ConfigError(f"input {h}x{w} is not divisible by total downsample {d}")
    return h // d, w // d, cfg.out_channels


def init_params(cfg: BackboneConfig, rng: np.random.Generator):
    """Fresh parameter and buffer dicts, keyed backbone.s{i}.*"""
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    cin = 3
    for i, (cout, _) in enumerate(cfg.stages):
        fan_in = 9 * cin
        params[f"backbone.s{i}.conv.w"] = he_normal(rng, (3, 3, cin, cout), fan_in)
        params[f"backbone.s{i}.bn.gamma"] = np.ones(cout)
        params[f"backbone.s{i}.bn.beta"] = np.zeros(cout)
        buffers[f"backbone.s{i}.bn.mean"] = np.zeros(cout)
        buffers[f"backbone.s{i}.bn.var"] = np.ones(cout)
        cin = cout
    return params, buffers


def forward(x: np.ndarray, cfg: BackboneConfig, params, buffers, train: bool,
            use_batch_stats: bool | None = None):
    """Run the trunk. Returns (T, caches, new_buffers).

    Shape problems raise before any arithmetic. ``use_batch_stats`` separates
    the normalization mode from the train flag so a frozen phase can keep
    using running statistics while gradients still flow.
    """
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ConfigError(f"expected images shaped (B, H, W, 3), got {x.shape}")
    d = cfg.total_downsample()
    if x.shape[1] % d or x.shape[2] % d:
        raise ConfigError(
            f"input {x.shape[1]}x{x.shape[2]} is not divisible by total downsample {d}"
        )
    if use_batch_stats is None:
        use_batch_stats = train
    strides = cfg.effective_strides()
    caches = []
    new_buffers = dict(buffers)
    for i, stride in enumerate(strides):
        y, conv_cache = conv3x3_forward(x, params[f"backbone.s{i}.conv.w"], stride)
        y, bn_cache, nm, nv = bn_forward(
            y,
            params[f"backbone.s{i}.bn.gamma"],
            params[f"backbone.s{i}.bn.beta"],
            buffers[f"backbone.s{i}.bn.mean"],
            buffers[f"backbone.s{i}.bn.var"],
            axes=(0, 1, 2),
            train=use_batch_stats,
            eps=cfg.bn_eps,
            momentum=cfg.bn_momentum,
        )
        new_buffers[f"backbone.s{i}.bn.mean"] = nm
        new_buffers[f"backbone.s{i}.bn.var"] = nv
        x, relu_cache = relu_forward(y)
        caches.append((conv_cache, bn_cache, relu_cache))
    return x, caches, new_buffers


def backward(dT: np.ndarray, caches):
    """Gradients for every trunk parameter; returns (grads, dx)."""
    grads: dict[str, np.ndarray] = {}
    dy = dT
    for i in reversed(range(len(caches))):
        conv_cache, bn_cache, relu_cache = caches[i]
        dy = relu_backward(dy, relu_cache)
        dy, dgamma, dbeta = bn_backward(dy, bn_cache)
        grads[f"backbone.s{i}.bn.gamma"] = dgamma
        grads[f"backbone.s{i}.bn.beta"] = dbeta
        dy, dw = conv3x3_backward(dy, conv_cache)
        grads[f"backbone.s{i}.conv.w"] = dw
    return grads, dy
