"""Experiment configuration: dataclasses plus key=value config-file support.

Config files are standard INI text with three sections, [model], [loss] and
[train]; every field has a default, so a config file only needs the keys it
overrides.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Every architectural hyperparameter of the grounded GAR model."""

    # widths
    d_model: int = 256
    num_heads: int = 8
    d_ff_mult: int = 4
    dropout: float = 0.1

    # stack depths (0 disables the stage; used by the ablation sweep)
    encoder_layers: int = 2
    decoder_layers: int = 3

    # video geometry
    frames: int = 8               # T, sampled frames per clip
    grid_h: int = 4
    grid_w: int = 4
    raster_h: int = 32
    raster_w: int = 32
    channels: int = 1

    # text
    l_max: int = 16
    vocab_size: int = 64

    # actors / labels
    num_queries: int = 8          # N, actor query slots
    num_actions: int = 6
    num_groups: int = 6

    # toggles
    use_fast_branch: bool = True
    use_actor_fusion: bool = True
    fusion_refeed: bool = False   # also re-fuse predicted boxes at layers > 0
    teacher_forcing: bool = False
    fusion_kernel: int = 3

    @property
    def hw(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def d_ff(self) -> int:
        return self.d_ff_mult * self.d_model

    @property
    def patch_h(self) -> int:
        return self.raster_h // self.grid_h

    @property
    def patch_w(self) -> int:
        return self.raster_w // self.grid_w

    def validate(self):
        if self.d_model % self.num_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.raster_h % self.grid_h or self.raster_w % self.grid_w:
            raise ConfigError("raster size not divisible by patch grid")
        if self.fusion_kernel % 2 == 0:
            raise ConfigError(f"fusion_kernel must be odd, got {self.fusion_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")


@dataclass
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    group_ce: float = 1.0
    action_bce: float = 1.0
    aux_layers: bool = True       # per-decoder-layer box losses

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and v < 0:
                raise ConfigError(f"loss weight {f.name} negative: {v}")


@dataclass
class TrainConfig:
    peak_lr: float = 5e-4
    warmup_epochs: int = 5
    total_epochs: int = 30
    steps_per_epoch: int = 16
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.1
    batch_size: int = 4
    grad_clip: float = 1.0        # 0 disables clipping
    seed: int = 0
    eval_every: int = 50
    mode: str = "full"            # full | weak

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def validate(self):
        if self.warmup_epochs >= self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if self.weight_decay_start > self.weight_decay_end:
            raise ConfigError("weight decay bounds out of order")
        if self.mode not in ("full", "weak"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.train.validate()


_SECTIONS = {"model": ModelConfig, "loss": LossWeights, "train": TrainConfig}


def _parse_value(text: str, ftype):
    if ftype is bool or ftype == "bool":
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean {text!r}")
    if ftype is int or ftype == "int":
        return int(text)
    if ftype is float or ftype == "float":
        return float(text)
    return text


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = ExperimentConfig()
    for section, cls in _SECTIONS.items():
        if not parser.has_section(section):
            continue
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _parse_value(raw, known[key].type))
    cfg.validate()
    return cfg


def save_config(cfg: ExperimentConfig, path):
    parser = configparser.ConfigParser()
    for section in _SECTIONS:
        target = getattr(cfg, section)
        parser[section] = {f.name: str(getattr(target, f.name))
                           for f in fields(target)}
    with open(path, "w") as fh:
        parser.write(fh)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ExperimentConfig:
    cfg = ExperimentConfig(
        model=ModelConfig(**d.get("model", {})),
        loss=LossWeights(**d.get("loss", {})),
        train=TrainConfig(**d.get("train", {})),
    )
    cfg.validate()
    return cfg
