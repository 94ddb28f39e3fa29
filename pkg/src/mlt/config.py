"""Run configuration: one JSON document with model / loss / optim / data /
eval / run objects. Unknown keys are rejected, every field has a default,
and the defaults reproduce the reference training setup."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

from .losses import LossConfig
from .model import ConfigError, ModelConfig


@dataclass
class ScheduleConfig:
    """Schedule for one parameter group. interval=None means one epoch
    (resolved to steps-per-epoch at training time); scale_dim=None means
    the group's natural dimension (patch count or label count)."""

    kind: str = "warmup"
    lr0: float = 5e-4
    decay: float = 0.99
    interval: Optional[float] = None
    scale_dim: Optional[int] = None
    warmup_steps: int = 4000

    def validate(self) -> "ScheduleConfig":
        if self.kind not in ("exp_decay", "warmup"):
            raise ConfigError(f"schedule kind {self.kind!r} not one of "
                              f"'exp_decay', 'warmup'")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.interval is not None and self.interval <= 0:
            raise ConfigError(f"interval must be > 0, got {self.interval}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.scale_dim is not None and self.scale_dim < 1:
            raise ConfigError(f"scale_dim must be >= 1, got {self.scale_dim}")
        return self


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    backbone: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(
        kind="exp_decay"))
    encoder: ScheduleConfig = field(default_factory=ScheduleConfig)
    decoder: ScheduleConfig = field(default_factory=ScheduleConfig)

    def validate(self) -> "OptimConfig":
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"betas must be in [0, 1), got "
                              f"{self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for group in (self.backbone, self.encoder, self.decoder):
            group.validate()
        return self


@dataclass
class DataSection:
    train_path: Optional[str] = None
    val_path: Optional[str] = None
    batch_size: int = 32
    mixup_alpha: float = 0.2
    noise_std_augment: float = 0.0

    def validate(self) -> "DataSection":
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.mixup_alpha < 0:
            raise ConfigError(f"mixup_alpha must be >= 0, got {self.mixup_alpha}")
        if self.noise_std_augment < 0:
            raise ConfigError(f"noise_std_augment must be >= 0, "
                              f"got {self.noise_std_augment}")
        return self


@dataclass
class EvalSection:
    threshold: float = 0.5
    smoothing_window: int = 20

    def validate(self) -> "EvalSection":
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.smoothing_window < 1:
            raise ConfigError(f"smoothing_window must be >= 1, "
                              f"got {self.smoothing_window}")
        return self


@dataclass
class RunSection:
    epochs: int = 8
    max_steps: Optional[int] = None
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    log_path: str = "train.log"

    def validate(self) -> "RunSection":
        if self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        return self


@dataclass
class LossSection:
    """weights: 'frequency' derives inverse-rate weights from the training
    manifest; 'uniform' or an explicit per-label list bypass that."""

    weights: Union[str, list] = "frequency"
    dice_weight: float = 1.0
    dice_smooth: float = 1.0
    label_smoothing: float = 0.0
    clamp_p: float = 1e-12

    def validate(self) -> "LossSection":
        if isinstance(self.weights, str) and self.weights not in ("frequency",
                                                                  "uniform"):
            raise ConfigError(f"weights must be 'frequency', 'uniform' or a "
                              f"list, got {self.weights!r}")
        # range checks shared with the loss module
        LossConfig(weights=None, dice_weight=self.dice_weight,
                   dice_smooth=self.dice_smooth,
                   label_smoothing=self.label_smoothing,
                   clamp_p=self.clamp_p).validate()
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.optim.validate()
        self.data.validate()
        self.eval.validate()
        self.run.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "config").validate()

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(doc)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _build(cls, doc: dict, where: str):
    """Recursively construct nested dataclasses, rejecting unknown keys."""
    fields = cls.__dataclass_fields__
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        nested = {"model": ModelConfig, "loss": LossSection,
                  "optim": OptimConfig, "data": DataSection,
                  "eval": EvalSection, "run": RunSection,
                  "backbone": ScheduleConfig, "encoder": ScheduleConfig,
                  "decoder": ScheduleConfig}.get(name)
        if nested is not None and isinstance(value, dict):
            kwargs[name] = _build(nested, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}")
