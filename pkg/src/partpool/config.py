"""Dataclass configuration for every stage of the pipeline.

A full run is described by one JSON document (RunConfig). Section dataclasses
are deliberately flat so they serialize to plain dicts and back without any
custom machinery beyond tuple/list coercion.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

HEAD_MODES = ("pcb", "variant1", "variant2", "ide")
POOLINGS = ("uniform", "rpp")
DESCRIPTOR_KINDS = ("G", "H")
METRICS = ("cosine", "euclidean")


@dataclass(frozen=True)
class BackboneConfig:
    """Stack of conv3x3 -> batch norm -> relu stages.

    Each stage is (out_channels, downsample) with downsample in {1, 2}.
    When halve_last_downsample is true the final stage runs at stride 1,
    so the total downsample factor is half its configured value.
    """

    stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 1), (64, 2))
    halve_last_downsample: bool = True
    input_size: tuple[int, int] = (48, 16)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for i, stage in enumerate(self.stages):
            if len(stage) != 2:
                raise ConfigError(f"stage {i} must be (channels, downsample)")
            ch, ds = stage
            if ch < 1:
                raise ConfigError(f"stage {i} channel count {ch} must be >= 1")
            if ds not in (1, 2):
                raise ConfigError(f"stage {i} downsample {ds} must be 1 or 2")
        if self.halve_last_downsample and self.stages[-1][1] != 2:
            raise ConfigError(
                "halve_last_downsample requires the final stage to be configured "
                "with downsample 2"
            )
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input size {self.input_size} must be positive")

    def effective_strides(self) -> tuple[int, ...]:
        strides = [ds for _, ds in self.stages]
        if self.halve_last_downsample:
            strides[-1] = 1
        return tuple(strides)

    def total_downsample(self) -> int:
        d = 1
        for s in self.effective_strides():
            d *= s
        return d

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0]


@dataclass(frozen=True)
class HeadConfig:
    """Part count, reduced dimension, and classifier wiring."""

    p: int = 6
    r: int = 256
    mode: str = "pcb"
    num_classes: int = 2
    share_reduce: bool = False
    dropout: float = 0.5  # applied to the pooled vector, ide mode only

    def validate(self) -> None:
        if self.mode not in HEAD_MODES:
            raise ConfigError(f"unknown head mode {self.mode!r}; expected one of {HEAD_MODES}")
        if self.p < 1:
            raise ConfigError(f"part count p={self.p} must be >= 1")
        if self.r < 1:
            raise ConfigError(f"reduced dimension r={self.r} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes={self.num_classes} must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} must be in [0, 1)")

    @property
    def effective_p(self) -> int:
        # a global-pooling head is the p=1 special case regardless of the flag
        return 1 if self.mode == "ide" else self.p


@dataclass(frozen=True)
class RppConfig:
    """Soft part assignment settings."""

    normalize: bool = True
    bias: bool = False
    eps: float = 1e-8

    def validate(self) -> None:
        if self.eps <= 0:
            raise ConfigError(f"eps={self.eps} must be > 0")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    rpp: RppConfig = field(default_factory=RppConfig)
    pooling: str = "uniform"

    def validate(self) -> None:
        self.backbone.validate()
        self.head.validate()
        self.rpp.validate()
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}; expected one of {POOLINGS}")
        if self.pooling == "rpp" and self.head.mode != "pcb":
            raise ConfigError("refined pooling is only defined for the pcb head")
        d = self.backbone.total_downsample()
        h, w = self.backbone.input_size
        if h % d or w % d:
            raise ConfigError(
                f"input {h}x{w} is not divisible by the total downsample factor {d}"
            )
        m = h // d
        p = self.head.effective_p
        if p > m:
            raise ConfigError(f"p={p} exceeds the {m} tensor rows")
        if m % p:
            raise ConfigError(f"tensor height {m} is not divisible by p={p}")


@dataclass(frozen=True)
class Schedule:
    """Learning-rate plan for the staged training procedure.

    Phase one runs total_epochs at base_lr, dropping to base_lr/10 at
    decay_epoch. The refinement phases run rpp_epochs in total at rpp_lr,
    split between classifier-only and joint fine-tuning.
    """

    base_lr: float = 0.05
    decay_epoch: int = 20
    total_epochs: int = 30
    rpp_epochs: int = 12
    rpp_lr: float = 0.005
    step3_epochs: int | None = None  # default: rpp_epochs // 2
    pretrained_lr_scale: float = 0.1
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    flip_prob: float = 0.5
    min_delta: float = 1e-4  # early-stop threshold on epoch-mean loss improvement
    patience: int = 3
    early_stop: bool = True

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not 0 <= self.decay_epoch < self.total_epochs:
            raise ConfigError(
                f"decay_epoch={self.decay_epoch} must lie inside the "
                f"{self.total_epochs}-epoch budget"
            )
        if self.rpp_epochs < 0:
            raise ConfigError("rpp_epochs must be >= 0")
        if self.step3_epochs is not None and not 0 <= self.step3_epochs <= self.rpp_epochs:
            raise ConfigError("step3_epochs must be within rpp_epochs")
        if self.base_lr <= 0 or self.rpp_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics need it)")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def classifier_only_epochs(self) -> int:
        if self.step3_epochs is not None:
            return self.step3_epochs
        return self.rpp_epochs // 2

    def finetune_epochs(self) -> int:
        return self.rpp_epochs - self.classifier_only_epochs()

    def lr_at(self, epoch: int) -> float:
        return self.base_lr if epoch < self.decay_epoch else self.base_lr / 10.0


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic banded-identity dataset parameters."""

    num_ids: int = 64
    imgs_per_id: int = 20
    bands: int = 4
    shift_rows: int = 0
    image_size: tuple[int, int] = (48, 16)
    noise: float = 0.05
    query_fraction: float = 0.25

    def validate(self) -> None:
        if self.bands < 2:
            raise ConfigError(f"bands={self.bands} must be >= 2")
        if self.num_ids < 2:
            raise ConfigError("num_ids must be >= 2")
        if self.imgs_per_id < 2:
            raise ConfigError("imgs_per_id must be >= 2")
        if self.shift_rows < 0:
            raise ConfigError("shift_rows must be >= 0")
        h, w = self.image_size
        if h % self.bands:
            raise ConfigError(f"image height {h} is not divisible by bands={self.bands}")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not 0.0 < self.query_fraction < 1.0:
            raise ConfigError("query_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    ranks: tuple[int, ...] = (1, 5, 10)
    kind: str = "G"
    metric: str = "cosine"

    def validate(self) -> None:
        if not self.ranks or any(k < 1 for k in self.ranks):
            raise ConfigError("ranks must be a non-empty list of integers >= 1")
        if self.kind not in DESCRIPTOR_KINDS:
            raise ConfigError(f"descriptor kind {self.kind!r} must be one of {DESCRIPTOR_KINDS}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric {self.metric!r} must be one of {METRICS}")


@dataclass(frozen=True)
class RunConfig:
    """The whole-run configuration document."""

    seed: int = 0
    mode: str = "pcb"  # training mode; rpp modes imply pooling
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    rpp: RppConfig = field(default_factory=RppConfig)
    schedule: Schedule = field(default_factory=Schedule)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.mode not in HEAD_MODES + ("rpp", "rpp-no-induction"):
            raise ConfigError(f"unknown run mode {self.mode!r}")
        self.schedule.validate()
        self.synth.validate()
        self.eval.validate()
        self.model_config().validate()

    def model_config(self, num_classes: int | None = None) -> ModelConfig:
        head_mode = self.head.mode
        pooling = "uniform"
        if self.mode in ("rpp", "rpp-no-induction"):
            head_mode, pooling = "pcb", "rpp"
        elif self.mode in HEAD_MODES:
            head_mode = self.mode
        head = dataclasses.replace(
            self.head,
            mode=head_mode,
            num_classes=num_classes if num_classes is not None else self.head.num_classes,
        )
        return ModelConfig(backbone=self.backbone, head=head, rpp=self.rpp, pooling=pooling)


# ---------------------------------------------------------------------------
# JSON round-trip helpers
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {"stages", "input_size", "image_size", "ranks"}


def _to_jsonable(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_jsonable(v) for v in value]
    return value


def config_to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def _coerce(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _SECTION_TYPES.get((cls, name))
        if sub is not None:
            kwargs[name] = _coerce(sub, value)
        elif name in _TUPLE_FIELDS:
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    (ModelConfig, "backbone"): BackboneConfig,
    (ModelConfig, "head"): HeadConfig,
    (ModelConfig, "rpp"): RppConfig,
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "head"): HeadConfig,
    (RunConfig, "rpp"): RppConfig,
    (RunConfig, "schedule"): Schedule,
    (RunConfig, "synth"): SynthConfig,
    (RunConfig, "eval"): EvalConfig,
}


def model_config_from_dict(data: dict) -> ModelConfig:
    return _coerce(ModelConfig, data)


def schedule_from_dict(data: dict) -> Schedule:
    return _coerce(Schedule, data)


def run_config_from_dict(data: dict) -> RunConfig:
    return _coerce(RunConfig, data)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    cfg = run_config_from_dict(data)
    cfg.validate()
    return cfg


def save_config(cfg, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
