"""Loss, SGD, the staged training procedure, and train-state checkpoints.

Training runs in three named phases. PCB_UNIFORM trains a uniform-stripe
model end to end. RPP_CLASSIFIER_ONLY freezes every pre-existing parameter
(and all normalization statistics) and fits only the part-assignment
classifier. RPP_FINETUNE unfreezes everything for a short joint pass.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .config import ModelConfig, RunConfig, Schedule, config_to_dict, schedule_from_dict
from .data import DatasetManifest, augment_batch, compute_normalization
from .errors import CheckpointError, ConfigError, NumericAbortError
from .model import FORMAT, Model
from .rpp import build_rpp_head

log = logging.getLogger(__name__)


class Phase(str, Enum):
    PCB_UNIFORM = "PCB_UNIFORM"
    RPP_CLASSIFIER_ONLY = "RPP_CLASSIFIER_ONLY"
    RPP_FINETUNE = "RPP_FINETUNE"


def batch_stats_enabled(phase: Phase) -> bool:
    # the classifier-only phase keeps normalization statistics frozen and
    # normalizes with the stored running values
    return phase is not Phase.RPP_CLASSIFIER_ONLY


def freeze_mask_for(model: Model, phase: Phase) -> frozenset[str]:
    """Names of parameters that must not move in the given phase."""
    if phase is Phase.RPP_CLASSIFIER_ONLY:
        if "rpp.wc" not in model.params:
            raise ConfigError("classifier-only phase needs a refined-pooling model")
        return frozenset(n for n in model.params if not n.startswith("rpp."))
    return frozenset()


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def pcb_loss(probs, labels) -> float:
    """Sum of per-head cross-entropies, averaged over the batch.

    probs: (B, heads, K) probabilities (or a single sample (heads, K));
    labels: (B,) integer class indices. Out-of-range labels raise.
    """
    probs = np.asarray(probs)
    if probs.ndim == 2:
        probs = probs[None]
        labels = np.atleast_1d(labels)
    labels = np.asarray(labels)
    b, _, k = probs.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes")
    picked = probs[np.arange(b)[:, None], np.arange(probs.shape[1])[None, :], labels[:, None]]
    per_sample = -np.log(np.maximum(picked, np.finfo(np.float64).tiny)).sum(axis=1)
    return float(per_sample.mean())


def sgd_update(params, grads, velocity, freeze_mask, lr, momentum=0.9,
               weight_decay=5e-4, scaled_names=frozenset(), lr_scale=1.0):
    """v <- momentum * v + (grad + wd * p); p <- p - lr * v.

    Frozen parameters are skipped entirely, so their bytes never change.
    Names in scaled_names use lr * lr_scale (pre-trained layers).
    """
    for name, p in params.items():
        if name in freeze_mask:
            continue
        g = grads[name] + weight_decay * p
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g
        velocity[name] = v
        step = lr * lr_scale if name in scaled_names else lr
        p -= step * v


# ---------------------------------------------------------------------------
# train state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: Model
    schedule: Schedule
    phase: Phase = Phase.PCB_UNIFORM
    epoch: int = 0
    lr: float = 0.0
    rng_seed: int = 0
    rng: np.random.Generator = None
    velocity: dict = field(default_factory=dict)
    freeze_mask: frozenset = frozenset()
    log: list = field(default_factory=list)
    last_loss: float = float("nan")
    snapshot_dir: str | None = None

    @classmethod
    def fresh(cls, model: Model, schedule: Schedule, seed: int,
              phase: Phase = Phase.PCB_UNIFORM) -> "TrainState":
        state = cls(
            model=model,
            schedule=schedule,
            phase=phase,
            rng_seed=seed,
            rng=np.random.default_rng(np.random.SeedSequence([seed, 0x51ED5EED])),
        )
        state.freeze_mask = freeze_mask_for(model, phase)
        return state

    def enter_phase(self, phase: Phase, lr: float | None = None) -> None:
        self.phase = phase
        if lr is not None:
            self.lr = lr
        self.freeze_mask = freeze_mask_for(self.model, phase)
        self.velocity = {}  # momentum does not carry across phase boundaries


def run_step(state: TrainState, batch) -> TrainState:
    """One SGD step on an already-normalized (images, labels) batch."""
    images, labels = batch
    model = state.model
    use_batch = batch_stats_enabled(state.phase)
    skip_backbone = state.phase is Phase.RPP_CLASSIFIER_ONLY
    loss, grads, fw = model.loss_and_grads(
        images, labels, train=True, use_batch_stats=use_batch,
        rng=state.rng, skip_backbone=skip_backbone,
    )
    if not np.isfinite(loss):
        diagnostics = {
            "phase": state.phase.value,
            "epoch": state.epoch,
            "lr": state.lr,
            "loss": float(loss),
        }
        if state.snapshot_dir is not None:
            snap = Path(state.snapshot_dir) / "abort_snapshot.npz"
            checkpoint(state, snap)
            diagnostics["snapshot"] = str(snap)
        raise NumericAbortError("training loss is not finite", diagnostics)
    if skip_backbone:
        for name in model.params:
            if name not in grads:
                grads[name] = np.zeros_like(model.params[name])
    scaled = frozenset(model.meta.get("pretrained_names", ()))
    sgd_update(
        model.params, grads, state.velocity, state.freeze_mask, state.lr,
        momentum=state.schedule.momentum, weight_decay=state.schedule.weight_decay,
        scaled_names=scaled, lr_scale=state.schedule.pretrained_lr_scale,
    )
    if use_batch:
        model.buffers.update(fw.new_buffers)
    state.last_loss = loss
    state.last_empty = int(fw.empty.sum())
    return state


def train_phase(state: TrainState, pixels: np.ndarray, labels: np.ndarray,
                epochs: int, lr_for_epoch, early_stop: bool = True) -> None:
    """Run one phase: shuffled epochs of augment + step, with early stop on
    a plateau of the epoch-mean loss."""
    sched = state.schedule
    n = len(pixels)
    bs = min(sched.batch_size, n)
    model = state.model
    prev_mean = None
    streak = 0
    for local_epoch in range(epochs):
        state.lr = lr_for_epoch(local_epoch)
        perm = state.rng.permutation(n)
        losses = []
        empties = 0
        for start in range(0, n - bs + 1, bs):
            idx = perm[start:start + bs]
            batch_px = augment_batch(
                pixels[idx], sched.flip_prob, model.input_mean, model.input_std,
                state.rng,
            )
            run_step(state, (batch_px, labels[idx]))
            losses.append(state.last_loss)
            empties += state.last_empty
        mean_loss = float(np.mean(losses))
        state.epoch += 1
        state.log.append(
            {
                "phase": state.phase.value,
                "epoch": state.epoch,
                "lr": state.lr,
                "mean_loss": mean_loss,
                "empty_part_count": empties,
            }
        )
        if early_stop and prev_mean is not None:
            if prev_mean - mean_loss < sched.min_delta:
                streak += 1
            else:
                streak = 0
            if streak >= sched.patience:
                log.info("phase %s stopped early after epoch %d", state.phase.value, state.epoch)
                break
        prev_mean = mean_loss


# ---------------------------------------------------------------------------
# whole-run training entry points
# ---------------------------------------------------------------------------

def _uniform_model_config(config: RunConfig, mode: str, num_classes: int) -> ModelConfig:
    head = dataclasses.replace(config.head, mode=mode, num_classes=num_classes)
    return ModelConfig(backbone=config.backbone, head=head, rpp=config.rpp, pooling="uniform")


def fit(manifest: DatasetManifest, config: RunConfig, mode: str | None = None,
        seed: int | None = None, snapshot_dir: str | None = None,
        init_from: Model | None = None) -> tuple[Model, list[dict]]:
    """Train a fresh single-phase model (pcb, ide, variant1, or variant2).

    init_from seeds any shape-matching weights from another model (typically
    a backbone trained elsewhere); those arrays then follow the reduced
    pretrained learning rate."""
    mode = mode or config.mode
    if mode not in ("pcb", "ide", "variant1", "variant2"):
        raise ConfigError(f"fit() trains uniform-pooling modes, not {mode!r}")
    seed = config.seed if seed is None else seed
    sched = config.schedule
    mean, std = compute_normalization(manifest)
    mc = _uniform_model_config(config, mode, manifest.num_identities)
    model = Model(mc, seed=seed, input_mean=mean, input_std=std)
    if init_from is not None:
        carried = []
        for name, arr in init_from.params.items():
            if name in model.params and model.params[name].shape == arr.shape:
                model.params[name] = arr.copy()
                carried.append(name)
        for name, arr in init_from.buffers.items():
            if name in model.buffers and model.buffers[name].shape == arr.shape:
                model.buffers[name] = arr.copy()
        if not carried:
            raise ConfigError("init_from model shares no parameter shapes")
        model.meta["pretrained_names"] = carried
    state = TrainState.fresh(model, sched, seed)
    state.snapshot_dir = snapshot_dir
    pixels, labels = manifest.train_arrays()
    train_phase(state, pixels, labels, sched.total_epochs, sched.lr_at,
                early_stop=sched.early_stop)
    model.meta["trained"] = True
    return model, state.log


def induced_training(manifest: DatasetManifest, config: RunConfig,
                     seed: int | None = None, pcb: Model | None = None,
                     no_induction: bool = False,
                     snapshot_dir: str | None = None) -> tuple[Model, list[dict]]:
    """Staged refinement training.

    Default path: converge a uniform-stripe model (or accept a trained one),
    append the part-assignment classifier, fit it alone with everything else
    frozen, then fine-tune jointly. With no_induction=True the first stage is
    skipped and a randomly initialized refined model trains jointly from
    scratch under the phase-one schedule.
    """
    seed = config.seed if seed is None else seed
    sched = config.schedule
    records: list[dict] = []
    pixels, labels = manifest.train_arrays()

    if no_induction:
        mean, std = compute_normalization(manifest)
        mc = dataclasses.replace(
            _uniform_model_config(config, "pcb", manifest.num_identities), pooling="rpp"
        )
        refined = Model(mc, seed=seed, input_mean=mean, input_std=std)
        refined.meta["induced"] = False
        state = TrainState.fresh(refined, sched, seed, phase=Phase.RPP_FINETUNE)
        state.snapshot_dir = snapshot_dir
        state.lr = sched.base_lr
        train_phase(state, pixels, labels, sched.total_epochs, sched.lr_at,
                    early_stop=sched.early_stop)
        refined.meta["trained"] = True
        return refined, state.log

    if pcb is None:
        pcb, records = fit(manifest, config, mode="pcb", seed=seed,
                           snapshot_dir=snapshot_dir)
    elif not pcb.meta.get("trained"):
        raise ConfigError(
            "refinement requires a converged uniform-stripe model; "
            "pass no_induction=True to train without one"
        )
    records = list(records)

    refined = build_rpp_head(pcb)
    state = TrainState.fresh(refined, sched, seed + 1, phase=Phase.RPP_CLASSIFIER_ONLY)
    state.snapshot_dir = snapshot_dir
    state.lr = sched.rpp_lr
    step3 = sched.classifier_only_epochs()
    step4 = sched.finetune_epochs()
    train_phase(state, pixels, labels, step3, lambda _e: sched.rpp_lr,
                early_stop=sched.early_stop)
    state.enter_phase(Phase.RPP_FINETUNE, sched.rpp_lr)
    train_phase(state, pixels, labels, step4, lambda _e: sched.rpp_lr,
                early_stop=sched.early_stop)
    refined.meta["trained"] = True
    records.extend(state.log)
    return refined, records


def write_log(records: list[dict], path) -> None:
    """JSON-lines training log, one record per epoch."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def checkpoint(state: TrainState, path) -> None:
    """Single-archive snapshot: model arrays, optimizer state, phase, rng."""
    arrays = state.model.state_arrays()
    for name, v in state.velocity.items():
        arrays[f"vel/{name}"] = v
    train_doc = {
        "phase": state.phase.value,
        "epoch": state.epoch,
        "lr": state.lr,
        "rng_seed": state.rng_seed,
        "rng_state": state.rng.bit_generator.state,
        "frozen": sorted(state.freeze_mask),
        "schedule": config_to_dict(state.schedule),
        "log": state.log,
    }
    np.savez(
        path,
        __format__=np.array(FORMAT),
        __config__=np.array(json.dumps(config_to_dict(state.model.cfg), sort_keys=True)),
        __meta__=np.array(json.dumps(state.model.meta, sort_keys=True)),
        __train__=np.array(json.dumps(train_doc, sort_keys=True)),
        **arrays,
    )


def restore(path) -> TrainState:
    """Rebuild a TrainState bit-for-bit from a checkpoint archive."""
    model = Model.load(path)
    with np.load(path, allow_pickle=False) as z:
        if "__train__" not in z.files:
            raise CheckpointError(f"{path} holds a model but no training state")
        doc = json.loads(str(z["__train__"]))
        velocity = {
            k[len("vel/"):]: z[k].copy() for k in z.files if k.startswith("vel/")
        }
    schedule = schedule_from_dict(doc["schedule"])
    state = TrainState(
        model=model,
        schedule=schedule,
        phase=Phase(doc["phase"]),
        epoch=doc["epoch"],
        lr=doc["lr"],
        rng_seed=doc["rng_seed"],
        rng=np.random.default_rng(),
        velocity=velocity,
        log=list(doc["log"]),
    )
    state.rng.bit_generator.state = doc["rng_state"]
    frozen = set(doc["frozen"])
    state.freeze_mask = frozenset(frozen)
    return state
