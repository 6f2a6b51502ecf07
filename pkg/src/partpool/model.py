"""End-to-end model: trunk, pooling strategy, reduction, classifier heads.

Parameters live in a flat dict of named float64 arrays, so freezing,
checkpointing, and checksumming operate on names rather than objects. All
forward variants return the intermediate activations needed both for
backward passes and for descriptor extraction.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import backbone as bb
from . import heads, rpp
from .config import ModelConfig, model_config_from_dict, config_to_dict
from .errors import CheckpointError, ConfigError
from .layers import dropout_backward, dropout_forward

FORMAT = "partpool-v1"


@dataclass
class Forward:
    probs: np.ndarray  # (B, heads, K)
    T: np.ndarray  # (B, M, N, C)
    A: np.ndarray | None  # (B, M, N, p) for refined pooling
    g: np.ndarray  # (B, p, C) pooled part vectors
    h: np.ndarray  # (B, p, r) reduced part vectors
    empty: np.ndarray  # (B, p) empty-part flags
    new_buffers: dict
    caches: dict


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 input_mean=None, input_std=None):
        cfg.validate()
        self.cfg = cfg
        init_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3779B9]))
        params, buffers = bb.init_params(cfg.backbone, init_rng)
        p = cfg.head.effective_p
        c = cfg.backbone.out_channels
        rp, rbuf = heads.init_reduce_params(
            p, c, cfg.head.r, init_rng, share=cfg.head.share_reduce
        )
        params.update(rp)
        buffers.update(rbuf)
        heads_n = self.num_heads
        shared_cls = cfg.head.mode == "variant2"
        params.update(
            heads.init_classifier_params(
                1 if cfg.head.mode in ("variant1", "ide") else heads_n,
                cfg.head.r,
                cfg.head.num_classes,
                init_rng,
                shared=shared_cls,
            )
        )
        if cfg.pooling == "rpp":
            params.update(rpp.init_assign_params(p, c, bias=cfg.rpp.bias))
        self.params = params
        self.buffers = buffers
        self.input_mean = np.zeros(3) if input_mean is None else np.asarray(input_mean, float)
        self.input_std = np.ones(3) if input_std is None else np.asarray(input_std, float)
        self.meta: dict = {"seed": seed, "trained": False, "induced": None}

    # -- structure helpers --------------------------------------------------

    @property
    def num_heads(self) -> int:
        return 1 if self.cfg.head.mode in ("variant1", "ide") else self.cfg.head.effective_p

    @property
    def tensor_shape(self) -> tuple[int, int, int]:
        return bb.output_shape(self.cfg.backbone)

    def param_names(self) -> list[str]:
        return list(self.params)

    def _reduce_names(self) -> list[str]:
        if self.cfg.head.share_reduce:
            return ["reduce.shared"]
        return [f"reduce.p{i}" for i in range(self.cfg.head.effective_p)]

    def _cls_names(self) -> list[str]:
        if self.cfg.head.mode == "variant2":
            return ["cls.shared"]
        if self.cfg.head.mode in ("variant1", "ide"):
            return ["cls.p0"]
        return [f"cls.p{i}" for i in range(self.cfg.head.effective_p)]

    def _stack(self, names: list[str], leaf: str) -> np.ndarray:
        return np.stack([self.params[f"{n}.{leaf}"] for n in names])

    def _stack_buf(self, names: list[str], leaf: str) -> np.ndarray:
        return np.stack([self.buffers[f"{n}.{leaf}"] for n in names])

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False,
                use_batch_stats: bool | None = None,
                rng: np.random.Generator | None = None) -> Forward:
        """Run the full pipeline on normalized images (B, H, W, 3)."""
        if use_batch_stats is None:
            use_batch_stats = train
        cfg = self.cfg
        p = cfg.head.effective_p
        caches: dict = {}
        T, caches["backbone"], new_buffers = bb.forward(
            x, cfg.backbone, self.params, self.buffers, train,
            use_batch_stats=use_batch_stats,
        )
        if cfg.pooling == "rpp":
            A, caches["assign"] = rpp.assign(
                T, self.params["rpp.wc"], self.params.get("rpp.bias")
            )
            g, empty, caches["pool"] = rpp.soft_pool(
                T, A, normalize=cfg.rpp.normalize, eps=cfg.rpp.eps
            )
        else:
            A = None
            g = heads.uniform_pool(T, p)
            empty = np.zeros(g.shape[:2], dtype=bool)

        g_used = g
        if cfg.head.mode == "ide" and cfg.head.dropout > 0.0:
            g_used, caches["dropout"] = dropout_forward(g, cfg.head.dropout, train, rng)

        rnames = self._reduce_names()
        share = cfg.head.share_reduce
        if share:
            b_sz = g_used.shape[0]
            g_red = g_used.reshape(b_sz * p, 1, -1)
        else:
            g_red = g_used
        h, caches["reduce"], nm, nv = heads.reduce_dim(
            g_red,
            self._stack(rnames, "w"),
            self._stack(rnames, "b"),
            self._stack(rnames, "bn.gamma"),
            self._stack(rnames, "bn.beta"),
            self._stack_buf(rnames, "bn.mean"),
            self._stack_buf(rnames, "bn.var"),
            train=use_batch_stats,
            eps=cfg.backbone.bn_eps,
            momentum=cfg.backbone.bn_momentum,
        )
        for i, name in enumerate(rnames):
            new_buffers[f"{name}.bn.mean"] = nm[i]
            new_buffers[f"{name}.bn.var"] = nv[i]
        if share:
            h = h.reshape(-1, p, cfg.head.r)

        cnames = self._cls_names()
        if cfg.head.mode == "variant1":
            cls_in = heads.average_parts(h)
        else:
            cls_in = h if cfg.head.mode in ("pcb", "variant2") else h[:, :1, :]
        if cfg.head.mode == "variant2":
            w_c = self.params["cls.shared.w"]
            b_c = self.params["cls.shared.b"]
        else:
            w_c = self._stack(cnames, "w")
            b_c = self._stack(cnames, "b")
        probs, caches["cls"] = heads.classify(cls_in, w_c, b_c)
        return Forward(
            probs=probs, T=T, A=A, g=g, h=h, empty=empty,
            new_buffers=new_buffers, caches=caches,
        )

    def backward(self, fw: Forward, labels: np.ndarray,
                 skip_backbone: bool = False) -> dict[str, np.ndarray]:
        """Analytic gradients of the summed per-head cross-entropy loss
        (mean over the batch) with respect to every parameter."""
        cfg = self.cfg
        p = cfg.head.effective_p
        b_sz, n_heads, k = fw.probs.shape
        onehot = np.zeros((b_sz, k))
        onehot[np.arange(b_sz), labels] = 1.0
        dlogits = (fw.probs - onehot[:, None, :]) / b_sz

        grads: dict[str, np.ndarray] = {}
        dcls_in, dw_c, db_c = heads.classify_backward(dlogits, fw.caches["cls"])
        cnames = self._cls_names()
        if cfg.head.mode == "variant2":
            grads["cls.shared.w"] = dw_c
            grads["cls.shared.b"] = db_c
        else:
            for i, name in enumerate(cnames):
                grads[f"{name}.w"] = dw_c[i]
                grads[f"{name}.b"] = db_c[i]

        if cfg.head.mode == "variant1":
            dh = heads.average_parts_backward(dcls_in, p)
        elif cfg.head.mode == "ide":
            dh = dcls_in  # p is 1
        else:
            dh = dcls_in

        share = cfg.head.share_reduce
        if share:
            dh = dh.reshape(b_sz * p, 1, cfg.head.r)
        dg_used, dw_r, db_r, dgamma_r, dbeta_r = heads.reduce_dim_backward(
            dh, fw.caches["reduce"]
        )
        rnames = self._reduce_names()
        for i, name in enumerate(rnames):
            grads[f"{name}.w"] = dw_r[i]
            grads[f"{name}.b"] = db_r[i]
            grads[f"{name}.bn.gamma"] = dgamma_r[i]
            grads[f"{name}.bn.beta"] = dbeta_r[i]
        if share:
            dg_used = dg_used.reshape(b_sz, p, -1)

        if "dropout" in fw.caches:
            dg = dropout_backward(dg_used, fw.caches["dropout"])
        else:
            dg = dg_used

        if cfg.pooling == "rpp":
            dT, dA = rpp.soft_pool_backward(dg, fw.caches["pool"])
            dT2, dwc, dbias = rpp.assign_backward(dA, fw.caches["assign"])
            dT = dT + dT2
            grads["rpp.wc"] = dwc
            if dbias is not None:
                grads["rpp.bias"] = dbias
        else:
            dT = heads.uniform_pool_backward(dg, fw.T.shape)

        if not skip_backbone:
            bb_grads, _ = bb.backward(dT, fw.caches["backbone"])
            grads.update(bb_grads)
        return grads

    def loss_and_grads(self, x, labels, train=True, use_batch_stats=None,
                       rng=None, skip_backbone=False):
        from .train import pcb_loss  # local import to avoid a cycle

        fw = self.forward(x, train=train, use_batch_stats=use_batch_stats, rng=rng)
        loss = pcb_loss(fw.probs, labels)
        grads = self.backward(fw, labels, skip_backbone=skip_backbone)
        return loss, grads, fw

    # -- descriptors ---------------------------------------------------------

    def descriptors(self, x: np.ndarray, kind: str) -> np.ndarray:
        """Stacked part descriptors for normalized images, eval mode."""
        if kind not in ("G", "H"):
            raise ConfigError(f"descriptor kind {kind!r} must be 'G' or 'H'")
        fw = self.forward(x, train=False)
        feats = fw.g if kind == "G" else fw.h
        return feats.reshape(feats.shape[0], -1)

    def descriptor_dim(self, kind: str) -> int:
        p = self.cfg.head.effective_p
        per = self.cfg.backbone.out_channels if kind == "G" else self.cfg.head.r
        return p * per

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        out["extra/input_mean"] = self.input_mean
        out["extra/input_std"] = self.input_std
        return out

    def save(self, path) -> None:
        arrays = self.state_arrays()
        np.savez(
            path,
            __format__=np.array(FORMAT),
            __config__=np.array(json.dumps(config_to_dict(self.cfg), sort_keys=True)),
            __meta__=np.array(json.dumps(self.meta, sort_keys=True)),
            **arrays,
        )

    @classmethod
    def load(cls, path) -> "Model":
        try:
            with np.load(path, allow_pickle=False) as z:
                files = set(z.files)
                if "__format__" not in files:
                    raise CheckpointError(f"{path} is not a model archive")
                fmt = str(z["__format__"])
                if fmt != FORMAT:
                    raise CheckpointError(
                        f"archive format {fmt!r} does not match expected {FORMAT!r}"
                    )
                cfg = model_config_from_dict(json.loads(str(z["__config__"])))
                meta = json.loads(str(z["__meta__"]))
                model = cls(cfg, seed=meta.get("seed", 0))
                _load_arrays_into(model, z, path)
                model.meta = meta
                return model
        except (OSError, ValueError) as e:
            raise CheckpointError(f"cannot read archive {path}: {e}")

    @classmethod
    def from_source(cls, source: "Model", pooling: str) -> "Model":
        """New model with the given pooling whose shared layers are copies."""
        cfg = dataclasses.replace(source.cfg, pooling=pooling)
        model = cls(cfg, seed=source.meta.get("seed", 0),
                    input_mean=source.input_mean, input_std=source.input_std)
        for name, arr in source.params.items():
            model.params[name] = arr.copy()
        for name, arr in source.buffers.items():
            model.buffers[name] = arr.copy()
        model.meta = dict(source.meta)
        model.meta["trained"] = False
        return model

    def clone(self) -> "Model":
        other = Model(self.cfg, seed=self.meta.get("seed", 0),
                      input_mean=self.input_mean, input_std=self.input_std)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.meta = copy.deepcopy(self.meta)
        return other


def _load_arrays_into(model: Model, z, path) -> None:
    expected = model.state_arrays()
    stored = {k for k in z.files if k.startswith(("param/", "buffer/", "extra/"))}
    missing = set(expected) - stored
    surplus = stored - set(expected)
    if missing or surplus:
        raise CheckpointError(
            f"archive {path} does not match the configured architecture: "
            f"missing {sorted(missing)[:4]}, surplus {sorted(surplus)[:4]}"
        )
    for key in expected:
        arr = z[key]
        if arr.shape != expected[key].shape:
            raise CheckpointError(
                f"array {key} in {path} has shape {arr.shape}, "
                f"expected {expected[key].shape}"
            )
    for key in z.files:
        if key.startswith("param/"):
            model.params[key[len("param/"):]] = z[key].copy()
        elif key.startswith("buffer/"):
            model.buffers[key[len("buffer/"):]] = z[key].copy()
    model.input_mean = z["extra/input_mean"].copy()
    model.input_std = z["extra/input_std"].copy()
